"""Feature mutual reconstruction module (FMRM).

Cross-attention in both directions between a query's r feature rows and a
class's K*r pooled support rows: queries are rebuilt as convex combinations
of support value rows, and supports are rebuilt from query value rows. One
shared QKV projection triple serves both sides by default; a separate
query-side triple is available for ablation.

The per-pair functions are the contract; ``mutual_reconstruct`` computes
all (query, class) pairs at once as a broadcast 4-D batch and must agree
with them exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .attention import scaled_dot_attention
from .tensor import ShapeError, Tensor


@dataclass
class ProjectionTriple:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


@dataclass
class FmrmParams:
    """QKV projections for supports and queries; identical objects when shared."""
    support: ProjectionTriple
    query: ProjectionTriple

    @property
    def shared(self) -> bool:
        return self.support is self.query

    def named(self) -> Iterator[tuple[str, Tensor]]:
        if self.shared:
            for f in ("w_q", "w_k", "w_v"):
                yield f"fmrm.{f}", getattr(self.support, f)
        else:
            for side, triple in (("support", self.support), ("query", self.query)):
                for f in ("w_q", "w_k", "w_v"):
                    yield f"fmrm.{side}.{f}", getattr(triple, f)


def init_fmrm(rng: np.random.Generator, d: int, separate_weights: bool = False,
              dtype=np.float32) -> FmrmParams:
    std = 1.0 / np.sqrt(d)

    def triple():
        return ProjectionTriple(
            *(Tensor(rng.standard_normal((d, d)) * std, requires_grad=True,
                     dtype=dtype) for _ in range(3)))

    support = triple()
    query = triple() if separate_weights else support
    return FmrmParams(support=support, query=query)


class Projected(NamedTuple):
    q: Tensor
    k: Tensor
    v: Tensor


def project(rows: Tensor, triple: ProjectionTriple) -> Projected:
    """Apply the three d x d projections to (..., n, d) feature rows."""
    return Projected(T.matmul(rows, triple.w_q),
                     T.matmul(rows, triple.w_k),
                     T.matmul(rows, triple.w_v))


def reconstruct_query(query_rows: Tensor, support_rows: Tensor,
                      p: FmrmParams, return_weights: bool = False):
    """Rebuild one query (r, d) from one class's support pool (kr, d)."""
    if query_rows.shape[-1] != support_rows.shape[-1]:
        raise ShapeError("reconstruct_query: feature width mismatch")
    qq = T.matmul(query_rows, p.query.w_q)
    sk = T.matmul(support_rows, p.support.w_k)
    sv = T.matmul(support_rows, p.support.w_v)
    return scaled_dot_attention(qq, sk, sv, return_weights=return_weights)


def reconstruct_support(support_rows: Tensor, query_rows: Tensor,
                        p: FmrmParams, return_weights: bool = False):
    """Rebuild one class's support pool (kr, d) from one query (r, d)."""
    if query_rows.shape[-1] != support_rows.shape[-1]:
        raise ShapeError("reconstruct_support: feature width mismatch")
    sq = T.matmul(support_rows, p.support.w_q)
    qk = T.matmul(query_rows, p.query.w_k)
    qv = T.matmul(query_rows, p.query.w_v)
    return scaled_dot_attention(sq, qk, qv, return_weights=return_weights)


class MutualReconstruction(NamedTuple):
    """All-pairs outputs; axis order is (query, class, rows, d)."""
    query_hat: Tensor    # (Nq, C, r, d)  queries rebuilt from each class
    support_hat: Tensor  # (Nq, C, kr, d) supports rebuilt from each query
    query_v: Tensor      # (Nq, r, d)   value-projected queries
    support_v: Tensor    # (C, kr, d)   value-projected supports


def mutual_reconstruct(support_rows: Tensor, query_rows: Tensor,
                       p: FmrmParams) -> MutualReconstruction:
    """Batched bidirectional reconstruction over all (query, class) pairs.

    support_rows: (C, kr, d), query_rows: (Nq, r, d). Semantically equal to
    looping reconstruct_query / reconstruct_support over the Nq x C pairs.
    """
    if support_rows.ndim != 3 or query_rows.ndim != 3:
        raise ShapeError("mutual_reconstruct expects (C, kr, d) and (Nq, r, d)")
    c, kr, d = support_rows.shape
    nq, r, _ = query_rows.shape

    s = project(support_rows, p.support)   # each (C, kr, d)
    q = project(query_rows, p.query)       # each (Nq, r, d)

    sq = T.reshape(s.q, (1, c, kr, d))
    sk = T.reshape(s.k, (1, c, kr, d))
    sv = T.reshape(s.v, (1, c, kr, d))
    qq = T.reshape(q.q, (nq, 1, r, d))
    qk = T.reshape(q.k, (nq, 1, r, d))
    qv = T.reshape(q.v, (nq, 1, r, d))

    query_hat = scaled_dot_attention(qq, sk, sv)      # (Nq, C, r, d)
    support_hat = scaled_dot_attention(sq, qk, qv)    # (Nq, C, kr, d)
    return MutualReconstruction(query_hat, support_hat, q.v, s.v)
