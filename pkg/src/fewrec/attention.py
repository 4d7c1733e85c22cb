"""Scaled dot-product attention shared by both reconstruction modules."""
from __future__ import annotations

import math

from . import tensor as T
from .tensor import Tensor


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         return_weights: bool = False):
    """softmax(q kT / sqrt(d)) v over the trailing two axes.

    q: (..., nq, d), k: (..., nk, d), v: (..., nk, d). Leading axes
    broadcast. Each output row is a convex combination of the rows of v.
    """
    d = q.shape[-1]
    logits = T.scale(T.matmul(q, T.swap_last_two(k)), 1.0 / math.sqrt(d))
    weights = T.softmax_rows(logits)
    out = T.matmul(weights, v)
    if return_weights:
        return out, weights
    return out
