"""Bi-directional reconstruction distances, fusion, and episodic loss.

Distances are squared Frobenius norms of reconstruction residuals. The two
directions sum over different element counts (r*d vs kr*d), so by default
each is divided by its element count before fusion; ``normalize=False``
restores the raw sums. Fusion is tau * (lambda1 * d_qs + lambda2 * d_sq)
with tau kept positive through an exp parametrization.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class MetricParams:
    """Scalar fusion weights; lambda1/lambda2 unconstrained, tau = exp(log_tau) > 0."""
    lambda1: Tensor
    lambda2: Tensor
    log_tau: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "metric.lambda1", self.lambda1
        yield "metric.lambda2", self.lambda2
        yield "metric.log_tau", self.log_tau

    def tau(self) -> Tensor:
        return T.exp(self.log_tau)

    def warn_if_negative(self) -> None:
        for name, t in (("lambda1", self.lambda1), ("lambda2", self.lambda2)):
            if float(t.data) < 0:
                log.warning("metric weight %s drifted negative: %g", name, float(t.data))


def init_metric(dtype=np.float32) -> MetricParams:
    return MetricParams(
        lambda1=Tensor(0.5, requires_grad=True, dtype=dtype),
        lambda2=Tensor(0.5, requires_grad=True, dtype=dtype),
        log_tau=Tensor(0.0, requires_grad=True, dtype=dtype),
    )


def _residual_distance(orig: Tensor, recon: Tensor, normalize: bool) -> Tensor:
    if orig.shape[-2:] != recon.shape[-2:]:
        raise ShapeError(f"distance: row blocks differ, {orig.shape} vs {recon.shape}")
    d = T.sum_squares(T.sub(orig, recon), axis=(-2, -1))
    if normalize:
        n, w = orig.shape[-2], orig.shape[-1]
        d = T.scale(d, 1.0 / (n * w))
    return d


def dist_q_to_s(query_v: Tensor, query_hat: Tensor, normalize: bool = True) -> Tensor:
    """|| Q_v - Q_hat ||^2 over the trailing (r, d) block; leading axes broadcast."""
    return _residual_distance(query_v, query_hat, normalize)


def dist_s_to_q(support_v: Tensor, support_hat: Tensor, normalize: bool = True) -> Tensor:
    """|| S_v - S_hat ||^2 over the trailing (kr, d) block."""
    return _residual_distance(support_v, support_hat, normalize)


def fuse(dqs: Tensor, dsq: Tensor, m: MetricParams) -> Tensor:
    """Temperature-scaled weighted sum of the two directional distances."""
    return T.mul(m.tau(), T.add(T.mul(m.lambda1, dqs), T.mul(m.lambda2, dsq)))


def normalize_distances(fused: Tensor) -> Tensor:
    """Per-query softmax over negated distances; rows sum to 1."""
    return T.softmax_rows(T.neg(fused))


@dataclass
class DistanceTable:
    """Per-query, per-class fused distances and their normalized scores."""
    fused: Tensor       # (Nq, C)
    normalized: Tensor  # (Nq, C), rows on the probability simplex

    @property
    def way(self) -> int:
        return self.fused.shape[-1]


def make_table(fused: Tensor) -> DistanceTable:
    if fused.ndim != 2:
        raise ShapeError(f"distance table must be (queries, classes), got {fused.shape}")
    return DistanceTable(fused=fused, normalized=normalize_distances(fused))


def episode_loss(table: DistanceTable, labels: np.ndarray) -> Tensor:
    """Mean negative log normalized score of each query's true class.

    ``labels`` are episode-local classes in 1..C. Computed from the fused
    distances via log-softmax, which equals log(normalized) exactly.
    """
    labels = np.asarray(labels)
    nq, c = table.fused.shape
    if labels.shape != (nq,):
        raise ShapeError(f"labels must have shape ({nq},), got {labels.shape}")
    if labels.min() < 1 or labels.max() > c:
        raise ValueError(f"label out of range 1..{c}")
    onehot = np.zeros((nq, c), dtype=table.fused.dtype)
    onehot[np.arange(nq), labels - 1] = 1.0
    log_scores = T.log_softmax_rows(T.neg(table.fused))
    return T.scale(T.tsum(T.mul(log_scores, Tensor(onehot))), -1.0 / nq)


def predict(table: DistanceTable) -> np.ndarray:
    """Episode-local class per query: the class with the smallest fused
    distance, which is also the argmax of the normalized score for any
    tau > 0. Ties break toward the lowest class index."""
    return np.argmin(table.fused.data, axis=1) + 1
