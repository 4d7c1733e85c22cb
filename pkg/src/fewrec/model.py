"""Full model assembly and the episode forward pass.

Variants (the ablation switches) share one parameter set and differ only in
which stages run:

    full              self-reconstruction + mutual reconstruction, fused
    fsrm_only         self-reconstruction, then mean-prototype distance
    fmrm_only         mutual reconstruction on raw backbone rows
    q_to_s_only       full pipeline with lambda2 pinned to 0
    s_to_q_only       full pipeline with lambda1 pinned to 0
    protonet_baseline mean-prototype distance on raw backbone rows
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import backbone as bb
from . import checkpoint as ckpt
from . import fmrm as fm
from . import fsrm as fs
from . import metric as mt
from . import tensor as T
from .episodes import Episode
from .tensor import ShapeError, Tensor

VARIANTS = ("full", "fsrm_only", "fmrm_only", "q_to_s_only", "s_to_q_only",
            "protonet_baseline")


@dataclass
class ModelConfig:
    feature_dim: int = 64
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    mlp_hidden: Optional[int] = None
    transformer_standard_block: bool = False
    separate_mutual_weights: bool = False
    normalize_distances: bool = True
    dtype: str = "float32"

    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class ModelParams:
    config: ModelConfig
    backbone: bb.BackboneParams
    fsrm: fs.FsrmParams
    fmrm: fm.FmrmParams
    metric: mt.MetricParams

    def named(self) -> Iterator[tuple[str, Tensor]]:
        seen = set()
        for group in (self.backbone.named(), self.fsrm.named(),
                      self.fmrm.named(), self.metric.named()):
            for name, t in group:
                if id(t) not in seen:
                    seen.add(id(t))
                    yield name, t

    def trainable(self, variant: str) -> list[tuple[str, Tensor]]:
        """Parameters the optimizer may touch for a variant."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        frozen = set()
        if variant == "q_to_s_only":
            frozen.add("metric.lambda2")
        elif variant == "s_to_q_only":
            frozen.add("metric.lambda1")
        elif variant in ("fsrm_only", "protonet_baseline"):
            frozen.update({"metric.lambda1", "metric.lambda2"})
        return [(n, t) for n, t in self.named() if n not in frozen]

    def zero_grads(self) -> None:
        for _, t in self.named():
            t.zero_grad()


def init_model(rng: np.random.Generator, config: ModelConfig) -> ModelParams:
    dtype = config.np_dtype()
    d = config.feature_dim
    if config.backbone.kind != "bypass" and config.backbone.channels != d:
        raise ShapeError("backbone channels must equal model feature_dim")
    if config.backbone.kind == "bypass":
        config.backbone.channels = d
    params = ModelParams(
        config=config,
        backbone=bb.init_backbone(rng, config.backbone, dtype=dtype),
        fsrm=fs.init_fsrm(rng, d, mlp_hidden=config.mlp_hidden,
                          standard_block=config.transformer_standard_block,
                          dtype=dtype),
        fmrm=fm.init_fmrm(rng, d, separate_weights=config.separate_mutual_weights,
                          dtype=dtype),
        metric=mt.init_metric(dtype=dtype),
    )
    return params


def apply_variant(params: ModelParams, variant: str) -> None:
    """Pin fusion weights for the unidirectional variants."""
    if variant == "q_to_s_only":
        params.metric.lambda2.data[...] = 0.0
    elif variant == "s_to_q_only":
        params.metric.lambda1.data[...] = 0.0


def _episode_rows(params: ModelParams, episode: Episode,
                  training: bool) -> tuple[Tensor, Tensor]:
    """Embed support and query samples into (n, r, d) local feature rows."""
    dtype = params.config.np_dtype()
    batch = np.concatenate([episode.support_x, episode.query_x], axis=0)
    x = Tensor(batch.astype(dtype))
    fmap = bb.embed(x, params.backbone, training=training)
    rows = fmap if params.config.backbone.kind == "bypass" \
        else bb.reshape_local_features(fmap)
    n_support = len(episode.support_x)
    return (T.narrow(rows, 0, n_support),
            T.narrow(rows, n_support, len(episode.query_x)))


def _prototype_distances(support: Tensor, queries: Tensor, c: int, k: int,
                         params: ModelParams) -> Tensor:
    """Squared distance of each query to each class-mean embedding."""
    r, d = support.shape[-2], support.shape[-1]
    flat_s = T.reshape(support, (c, k, r * d))
    protos = T.tmean(flat_s, axis=1)                       # (C, r*d)
    nq = queries.shape[0]
    flat_q = T.reshape(queries, (nq, 1, r * d))
    diff = T.sub(flat_q, T.reshape(protos, (1, c, r * d)))
    dist = T.sum_squares(diff, axis=-1)                    # (Nq, C)
    if params.config.normalize_distances:
        dist = T.scale(dist, 1.0 / (r * d))
    return T.mul(params.metric.tau(), dist)


def episode_forward(params: ModelParams, episode: Episode, variant: str = "full",
                    training: bool = False) -> mt.DistanceTable:
    """Per-query, per-class fused distance table for one episode."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    cfg = params.config
    c = episode.way
    k = len(episode.support_x) // c
    support_rows, query_rows = _episode_rows(params, episode, training)
    r, d = support_rows.shape[-2], support_rows.shape[-1]

    use_fsrm = variant in ("full", "fsrm_only", "q_to_s_only", "s_to_q_only")
    if use_fsrm:
        table = Tensor(fs.sinusoidal_encoding(r, d, dtype=cfg.np_dtype()))
        support_rows = fs.fsrm_forward(support_rows, table, params.fsrm,
                                       standard_block=cfg.transformer_standard_block)
        query_rows = fs.fsrm_forward(query_rows, table, params.fsrm,
                                     standard_block=cfg.transformer_standard_block)

    if variant in ("fsrm_only", "protonet_baseline"):
        fused = _prototype_distances(support_rows, query_rows, c, k, params)
        return mt.make_table(fused)

    support_pool = T.reshape(support_rows, (c, k * r, d))
    recon = fm.mutual_reconstruct(support_pool, query_rows, params.fmrm)
    nq = query_rows.shape[0]

    norm = cfg.normalize_distances
    dqs = mt.dist_q_to_s(T.reshape(recon.query_v, (nq, 1, r, d)),
                         recon.query_hat, normalize=norm)        # (Nq, C)
    dsq = mt.dist_s_to_q(T.reshape(recon.support_v, (1, c, k * r, d)),
                         recon.support_hat, normalize=norm)      # (Nq, C)
    fused = mt.fuse(dqs, dsq, params.metric)
    return mt.make_table(fused)


def episode_loss(params: ModelParams, episode: Episode, variant: str = "full",
                 training: bool = True) -> Tensor:
    table = episode_forward(params, episode, variant, training=training)
    return mt.episode_loss(table, episode.query_y)


# ---------------------------------------------------------------------------
# checkpoint glue


def save_model(path, params: ModelParams) -> None:
    records = {name: t.data for name, t in params.named()}
    records.update(dict(params.backbone.buffers()))
    ckpt.save(path, records)


def load_model(path, params: ModelParams) -> ModelParams:
    """Load weights into an already-initialized parameter set in place."""
    records = ckpt.load(path)
    for name, t in params.named():
        if name not in records:
            raise ckpt.CheckpointError(f"checkpoint missing record {name!r}")
        if records[name].shape != t.data.shape:
            raise ckpt.CheckpointError(
                f"record {name!r}: shape {records[name].shape} != {t.data.shape}")
        t.data = records[name].astype(t.data.dtype, copy=True)
    if params.backbone.blocks:
        params.backbone.load_buffers(records)
    return params


# ---------------------------------------------------------------------------
# end-to-end gradient check


def tiny_episode_gradcheck(tol: float = 1e-3, seed: int = 7):
    """Finite-difference check of the episode loss through every parameter.

    Uses a bypass backbone at d=8, r=4 on a 3-way 2-shot episode with 2
    queries per class, in double precision.
    """
    from .gradcheck import check_gradients

    rng = np.random.default_rng(seed)
    config = ModelConfig(
        feature_dim=8,
        backbone=bb.BackboneConfig(kind="bypass", channels=8, feature_rows=4),
        dtype="float64",
    )
    params = init_model(rng, config)
    c, k, m, r, d = 3, 2, 2, 4, 8
    episode = Episode(
        support_x=rng.standard_normal((c * k, r, d)),
        support_y=np.repeat(np.arange(1, c + 1), k),
        query_x=rng.standard_normal((c * m, r, d)),
        query_y=np.repeat(np.arange(1, c + 1), m),
        class_ids=[f"c{i}" for i in range(c)],
    )
    names_params = list(params.named())
    tensors = [t for _, t in names_params]
    return check_gradients(
        "episode_loss(full, tiny)",
        lambda: episode_loss(params, episode, "full", training=False),
        tensors, tol=tol)
