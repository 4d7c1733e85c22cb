"""Episodic meta-training with SGD + Nesterov momentum.

Each step samples one episode from the base split, backpropagates the
episodic loss, and applies

    g <- g + wd * p
    v <- mu * v + g
    p <- p - lr * (g + mu * v)

The learning rate decays by a fixed factor every ``period`` epochs.
Validation runs every ``eval_period`` epochs on a fixed set of episodes and
the best checkpoint is kept. The whole run is a pure function of
(config, seed): logs are byte-identical across reruns on one worker.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as md
from . import tensor as T
from .config import RunConfig, build_dataset, resolve_output_dir
from .episodes import Dataset, EpisodeSpec, augment_images, sample_episode, substream
from .evaluate import evaluate
from .tensor import NumericError, Tensor

LOG_HEADER = "epoch,loss,lr,lambda1,lambda2,tau,val_acc"


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the offending episode seed."""

    def __init__(self, epoch: int, episode_index: int, episode_seed: int, cause: str):
        self.epoch = epoch
        self.episode_index = episode_index
        self.episode_seed = episode_seed
        super().__init__(
            f"non-finite loss at epoch {epoch}, episode {episode_index} "
            f"(episode seed {episode_seed}): {cause}")


@dataclass
class LrSchedule:
    initial: float
    factor: float = 0.1
    period: int = 400

    def __post_init__(self):
        if self.initial <= 0:
            raise ValueError(f"lr must be > 0, got {self.initial}")
        if not (0.0 < self.factor <= 1.0):
            raise ValueError(f"decay factor must be in (0, 1], got {self.factor}")
        if self.period < 1:
            raise ValueError(f"decay period must be >= 1, got {self.period}")


def lr_at(epoch: int, schedule: LrSchedule) -> float:
    """Step decay: the rate drops at epoch == period, 2*period, ..."""
    return schedule.initial * schedule.factor ** (epoch // schedule.period)


def sgd_nesterov_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
                      state: dict, lr: float, momentum: float,
                      weight_decay: float = 0.0,
                      keys: Optional[Sequence] = None) -> None:
    """One in-place Nesterov update. ``state`` maps key -> velocity buffer.

    Velocity buffers are created lazily. ``keys`` defaults to list indices.
    """
    if not (0.0 <= momentum < 1.0):
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if keys is None:
        keys = range(len(list(params)))
    for key, p, g in zip(keys, params, grads):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise T.ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
        g = g + weight_decay * p.data
        v = state.get(key)
        if v is None:
            v = np.zeros_like(p.data)
            state[key] = v
        v *= momentum
        v += g
        p.data -= (lr * (g + momentum * v)).astype(p.data.dtype, copy=False)


@dataclass
class TrainResult:
    log_rows: list
    log_path: Path
    best_path: Path
    final_path: Path
    best_val_acc: float
    best_epoch: int
    val_seed: int
    seconds: float


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def train(cfg: RunConfig, dataset: Optional[Dataset] = None,
          params: Optional[md.ModelParams] = None) -> TrainResult:
    """Run the full episodic training loop described by ``cfg``."""
    t0 = time.perf_counter()
    out_dir = resolve_output_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = build_dataset(cfg)

    variant = cfg.ablation
    if params is None:
        params = md.init_model(substream(cfg.seed, "init"), cfg.model)
    md.apply_variant(params, variant)

    trainable = params.trainable(variant)
    velocity: dict = {}
    schedule = LrSchedule(cfg.train.lr, cfg.train.lr_decay_factor,
                          cfg.train.lr_decay_period)
    train_spec = EpisodeSpec(way=cfg.train.way, shot=cfg.train.shot,
                             queries=cfg.train.queries, split="base")
    val_spec = EpisodeSpec(way=cfg.eval.way, shot=cfg.eval.shot,
                           queries=cfg.eval.queries, split="val")
    episodes_rng = substream(cfg.seed, "episodes")
    augment_rng = substream(cfg.seed, "augment")
    val_seed = cfg.seed  # evaluate() derives per-task substreams from it

    best_acc, best_epoch = -1.0, -1
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"
    rows = [LOG_HEADER]

    for epoch in range(cfg.train.epochs):
        lr = lr_at(epoch, schedule)
        losses = []
        for idx in range(cfg.train.episodes_per_epoch):
            ep_seed = int(episodes_rng.integers(2 ** 63))
            episode = sample_episode(train_spec, dataset,
                                     np.random.default_rng(ep_seed))
            if dataset.mode == "images":
                episode.support_x = augment_images(episode.support_x, augment_rng)
                episode.query_x = augment_images(episode.query_x, augment_rng)
            try:
                with T.record_tape():
                    loss = md.episode_loss(params, episode, variant, training=True)
                    loss_val = loss.item()
                    T.backward(loss)
            except NumericError as e:
                (out_dir / "diverged.txt").write_text(
                    f"epoch={epoch}\nepisode={idx}\nepisode_seed={ep_seed}\n"
                    f"cause={e}\n")
                raise TrainingDiverged(epoch, idx, ep_seed, str(e)) from e
            sgd_nesterov_step([t for _, t in trainable],
                              [t.grad for _, t in trainable],
                              velocity, lr, cfg.train.momentum,
                              cfg.train.weight_decay,
                              keys=[n for n, _ in trainable])
            params.zero_grads()
            losses.append(loss_val)
        params.metric.warn_if_negative()

        val_cell = ""
        if cfg.train.eval_period and (epoch + 1) % cfg.train.eval_period == 0:
            report = evaluate(params, dataset, val_spec,
                              n_tasks=cfg.train.val_episodes, seed=val_seed,
                              variant=variant)
            val_cell = _fmt(report.mean_accuracy)
            if report.mean_accuracy > best_acc:
                best_acc = report.mean_accuracy
                best_epoch = epoch
                md.save_model(best_path, params)
        rows.append(",".join([
            str(epoch), _fmt(float(np.mean(losses))), _fmt(lr),
            _fmt(params.metric.lambda1.item()),
            _fmt(params.metric.lambda2.item()),
            _fmt(np.exp(params.metric.log_tau.item())),
            val_cell,
        ]))

    md.save_model(final_path, params)
    if best_epoch < 0:  # no validation epochs: final doubles as best
        md.save_model(best_path, params)
    log_path = out_dir / "train_log.csv"
    log_path.write_text("\n".join(rows) + "\n")
    return TrainResult(rows, log_path, best_path, final_path, best_acc,
                       best_epoch, val_seed, time.perf_counter() - t0)


def run_ablation(cfg: RunConfig, variants: Sequence[str] = md.VARIANTS,
                 shots: Sequence[int] = (1, 5)) -> list[dict]:
    """Train every variant under identical seeds and score both shot settings.

    Returns one row per variant with accuracy and CI for each shot count.
    """
    dataset = build_dataset(cfg)
    rows = []
    for variant in variants:
        vcfg = cfg.with_overrides(ablation=variant,
                                  output_dir=str(Path(cfg.output_dir) / variant))
        result = train(vcfg, dataset=dataset)
        params = md.init_model(substream(vcfg.seed, "init"), vcfg.model)
        md.apply_variant(params, variant)
        md.load_model(result.best_path, params)
        row = {"variant": variant}
        for shot in shots:
            spec = EpisodeSpec(way=cfg.eval.way, shot=shot,
                               queries=cfg.eval.queries, split="novel")
            rep = evaluate(params, dataset, spec, n_tasks=cfg.eval.n_tasks,
                           seed=cfg.seed, variant=variant)
            row[f"{shot}shot_acc"] = rep.mean_accuracy
            row[f"{shot}shot_ci"] = rep.ci95
        rows.append(row)
    return rows


def ablation_csv(rows: list[dict], shots: Sequence[int] = (1, 5)) -> str:
    header = ["variant"]
    for shot in shots:
        header += [f"{shot}shot_acc", f"{shot}shot_ci"]
    lines = [",".join(header)]
    for row in rows:
        cells = [row["variant"]]
        for shot in shots:
            cells += [_fmt(row[f"{shot}shot_acc"]), _fmt(row[f"{shot}shot_ci"])]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
