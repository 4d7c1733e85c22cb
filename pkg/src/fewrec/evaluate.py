"""Test-time evaluation and feature variation analysis.

Evaluation samples tasks from per-task RNG substreams (so the task list is
a pure function of the seed, independent of execution order) and reports
mean accuracy with a 95% confidence interval, 1.96 * std / sqrt(N) using
the sample standard deviation.

Variation analysis quantifies the spread of per-class feature clouds as
mean pairwise squared euclidean distance, within classes (intra) and across
classes (inter), at three stages of the pipeline: raw backbone rows,
after self-reconstruction, and same-class mutual reconstructions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import fmrm as fm
from . import fsrm as fs
from . import metric as mt
from . import model as md
from . import tensor as T
from .backbone import embed, reshape_local_features
from .episodes import Dataset, EpisodeSpec, sample_episode, substream
from .tensor import Tensor

STAGES = ("raw", "post_fsrm", "post_fmrm")


@dataclass
class EvalReport:
    n_tasks: int
    accuracies: np.ndarray
    mean_accuracy: float
    ci95: float
    variant: str
    seed: int

    def csv(self) -> str:
        lines = ["task_id,accuracy"]
        lines += [f"{i},{acc:.10g}" for i, acc in enumerate(self.accuracies)]
        lines.append("N,mean,ci95")
        lines.append(f"{self.n_tasks},{self.mean_accuracy:.10g},{self.ci95:.10g}")
        return "\n".join(lines) + "\n"


def evaluate(params: md.ModelParams, dataset: Dataset, spec: EpisodeSpec,
             n_tasks: int, seed: int, variant: str = "full") -> EvalReport:
    """Mean accuracy over n_tasks freshly sampled episodes."""
    accs = np.empty(n_tasks, dtype=np.float64)
    for i in range(n_tasks):
        rng = substream(seed, f"eval_task_{i}")
        episode = sample_episode(spec, dataset, rng)
        table = md.episode_forward(params, episode, variant, training=False)
        pred = mt.predict(table)
        accs[i] = float(np.mean(pred == episode.query_y))
    mean = float(accs.mean())
    ci = 0.0 if n_tasks < 2 else float(1.96 * accs.std(ddof=1) / math.sqrt(n_tasks))
    return EvalReport(n_tasks, accs, mean, ci, variant, seed)


# ---------------------------------------------------------------------------
# variation analysis


@dataclass
class VariationReport:
    stage: str
    intra: float
    inter: float

    @property
    def ratio(self) -> float:
        return 0.0 if self.intra == 0.0 else self.intra / self.inter

    def csv_row(self) -> str:
        return f"{self.stage},{self.intra:.10g},{self.inter:.10g},{self.ratio:.10g}"


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def variation_stats(features_by_class: Mapping, stage: str) -> VariationReport:
    """Mean pairwise squared distances within and across classes.

    Needs at least two classes and two samples per class.
    """
    names = sorted(features_by_class)
    if len(names) < 2:
        raise ValueError(f"variation_stats needs >= 2 classes, got {len(names)}")
    clouds = []
    for name in names:
        arr = np.asarray(features_by_class[name], dtype=np.float64)
        if arr.ndim != 2 or len(arr) < 2:
            raise ValueError(f"class {name!r} needs >= 2 flat feature vectors")
        clouds.append(arr)

    intra_sum, intra_n = 0.0, 0
    for arr in clouds:
        d = _pairwise_sq(arr, arr)
        n = len(arr)
        intra_sum += float(np.triu(d, 1).sum())
        intra_n += n * (n - 1) // 2
    inter_sum, inter_n = 0.0, 0
    for i in range(len(clouds)):
        for j in range(i + 1, len(clouds)):
            d = _pairwise_sq(clouds[i], clouds[j])
            inter_sum += float(d.sum())
            inter_n += d.size
    return VariationReport(stage=stage, intra=intra_sum / intra_n,
                           inter=inter_sum / inter_n)


def stage_features(params: md.ModelParams, dataset: Dataset, split: str,
                   way: int, shot: int, probes: int, seed: int,
                   cross_class: bool = False) -> dict:
    """Per-class probe feature clouds at each pipeline stage.

    Samples ``way`` classes with shot+probes samples each. The post_fmrm
    stage holds each probe reconstructed from its own class's support pool
    (or, with cross_class, from the next class's pool), flattened to
    vectors of length r*d.
    """
    spec = EpisodeSpec(way=way, shot=shot, queries=probes, split=split)
    episode = sample_episode(spec, dataset, substream(seed, "analysis"))
    cfg = params.config
    dtype = cfg.np_dtype()

    batch = np.concatenate([episode.support_x, episode.query_x], axis=0)
    fmap = embed(Tensor(batch.astype(dtype)), params.backbone, training=False)
    rows = fmap if cfg.backbone.kind == "bypass" else reshape_local_features(fmap)
    n_support = len(episode.support_x)
    r, d = rows.shape[-2], rows.shape[-1]

    table = Tensor(fs.sinusoidal_encoding(r, d, dtype=dtype))
    post = fs.fsrm_forward(rows, table, params.fsrm,
                           standard_block=cfg.transformer_standard_block)

    support_pool = T.reshape(T.narrow(post, 0, n_support), (way, shot * r, d))
    probe_rows = T.narrow(post, n_support, way * probes)
    recon = fm.mutual_reconstruct(support_pool, probe_rows, params.fmrm)

    raw_flat = rows.data[n_support:].reshape(way * probes, r * d)
    post_flat = probe_rows.data.reshape(way * probes, r * d)
    qhat = recon.query_hat.data  # (Nq, way, r, d)
    out = {stage: {} for stage in STAGES}
    for c in range(way):
        sel = slice(c * probes, (c + 1) * probes)
        source = (c + 1) % way if cross_class else c
        out["raw"][episode.class_ids[c]] = raw_flat[sel]
        out["post_fsrm"][episode.class_ids[c]] = post_flat[sel]
        out["post_fmrm"][episode.class_ids[c]] = \
            qhat[sel, source].reshape(probes, r * d)
    return out


def variation_suite(params: md.ModelParams, dataset: Dataset, split: str,
                    way: int, shot: int, probes: int, seed: int,
                    cross_class: bool = False) -> list[VariationReport]:
    feats = stage_features(params, dataset, split, way, shot, probes, seed,
                           cross_class=cross_class)
    return [variation_stats(feats[stage], stage) for stage in STAGES]


def variation_csv(reports: list[VariationReport]) -> str:
    lines = ["stage,intra,inter,ratio"]
    lines += [rep.csv_row() for rep in reports]
    return "\n".join(lines) + "\n"
