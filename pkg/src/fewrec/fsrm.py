"""Feature self-reconstruction module (FSRM).

Each sample's r local feature rows attend over themselves: add a sinusoidal
position table, project to query/key/value, run scaled dot-product
attention, then layer-norm the residual sum and push it through a two-layer
MLP. The default composition is exactly

    out = MLP(LN(z + attention(z)))

with no second residual around the MLP; ``standard_block=True`` switches to
the conventional encoder block ``LN(h + MLP(h))`` for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .attention import scaled_dot_attention
from .tensor import ShapeError, Tensor


def sinusoidal_encoding(r: int, d: int, dtype=np.float64) -> np.ndarray:
    """(r, d) table; even columns sine, odd columns cosine.

    Column pair 2k uses angular frequency 10000^(-2k/d), so position 0 maps
    to (0, 1, 0, 1, ...). All values lie in [-1, 1].
    """
    if r < 1 or d < 1:
        raise ShapeError(f"sinusoidal_encoding: bad table size {r}x{d}")
    pos = np.arange(r, dtype=np.float64)[:, None]
    col = np.arange(d, dtype=np.float64)[None, :]
    freq = np.power(10000.0, -2.0 * np.floor(col / 2.0) / d)
    angle = pos * freq
    table = np.where(col % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


@dataclass
class FsrmParams:
    """Learnable weights: QKV projections, layer-norm affine, MLP."""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln2_gain: Optional[Tensor] = None  # only with the standard block
    ln2_bias: Optional[Tensor] = None

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in ("w_q", "w_k", "w_v", "ln_gain", "ln_bias",
                  "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
                  "ln2_gain", "ln2_bias"):
            t = getattr(self, f)
            if t is not None:
                yield f"fsrm.{f}", t


def init_fsrm(rng: np.random.Generator, d: int, mlp_hidden: Optional[int] = None,
              standard_block: bool = False, dtype=np.float32) -> FsrmParams:
    """Fan-in-scaled normal init for projections, identity-ish affine."""
    dm = mlp_hidden or d
    std = 1.0 / np.sqrt(d)

    def w(shape, scale):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True,
                      dtype=dtype)

    params = FsrmParams(
        w_q=w((d, d), std), w_k=w((d, d), std), w_v=w((d, d), std),
        ln_gain=Tensor(np.ones(d), requires_grad=True, dtype=dtype),
        ln_bias=Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
        mlp_w1=w((d, dm), std),
        mlp_b1=Tensor(np.zeros(dm), requires_grad=True, dtype=dtype),
        mlp_w2=w((dm, d), 1.0 / np.sqrt(dm)),
        mlp_b2=Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
    )
    if standard_block:
        params.ln2_gain = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        params.ln2_bias = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
    return params


def add_position(x_rows: Tensor, table: Tensor) -> Tensor:
    """Elementwise sum of feature rows and the position table."""
    if x_rows.shape[-2:] != table.shape:
        raise ShapeError(f"add_position: rows {x_rows.shape} vs table {table.shape}")
    return T.add(x_rows, table)


def self_attend(z: Tensor, p: FsrmParams, return_weights: bool = False):
    """Attention of position-encoded rows over themselves."""
    q = T.matmul(z, p.w_q)
    k = T.matmul(z, p.w_k)
    v = T.matmul(z, p.w_v)
    return scaled_dot_attention(q, k, v, return_weights=return_weights)


def mlp(h: Tensor, p: FsrmParams) -> Tensor:
    hidden = T.relu(T.add(T.matmul(h, p.mlp_w1), p.mlp_b1))
    return T.add(T.matmul(hidden, p.mlp_w2), p.mlp_b2)


def fsrm_forward(x_rows: Tensor, table: Tensor, p: FsrmParams,
                 standard_block: bool = False, eps: float = 1e-5) -> Tensor:
    """Full self-reconstruction pass. Shape-preserving: (..., r, d) in and out."""
    z = add_position(x_rows, table)
    att = self_attend(z, p)
    h = T.layer_norm(T.add(z, att), p.ln_gain, p.ln_bias, eps=eps)
    out = mlp(h, p)
    if standard_block:
        if p.ln2_gain is None or p.ln2_bias is None:
            raise ShapeError("standard_block requires ln2 parameters")
        out = T.layer_norm(T.add(h, out), p.ln2_gain, p.ln2_bias, eps=eps)
    return out
