"""Central finite-difference gradient checking.

The numerical side perturbs each parameter element by +/-h and re-runs the
forward function with no tape active, so it is independent of the backward
rules it validates. All checks run in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name}  rel_err={self.max_rel_err:.3e}  tol={self.tol:.0e}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Scale-symmetric worst-case error between two gradient arrays."""
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    denom = float(max(np.max(np.abs(analytic), initial=0.0),
                      np.max(np.abs(numeric), initial=0.0), 1e-8))
    return diff / denom


def fd_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar fn() w.r.t. one parameter."""
    if param.data.dtype != np.float64:
        raise ValueError("finite-difference checks require float64 parameters")
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(name: str, fn: Callable[[], Tensor],
                    params: Sequence[Tensor], h: float = 1e-5,
                    tol: float = 1e-4) -> GradCheckResult:
    """Compare backward() grads of fn() against central differences.

    fn must be a closure over ``params`` that rebuilds the graph on every
    call and returns a scalar Tensor.
    """
    for p in params:
        p.zero_grad()
    with T.record_tape():
        loss = fn()
        T.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = fd_gradient(fn, p, h)
        worst = max(worst, relative_error(analytic, numeric))
    return GradCheckResult(name, worst, tol)


def _rt(seed: int, *shape, lo: float = -1.0, hi: float = 1.0,
        requires_grad: bool = True) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad)


def primitive_checks(seed: int = 0, tol: float = 1e-4) -> list[GradCheckResult]:
    """One finite-difference check per differentiable primitive.

    Each scenario reduces the primitive's output to a scalar through a
    fixed random weighting so every output element influences the loss.
    """
    results = []

    def weighted(out: Tensor, wseed: int) -> Tensor:
        w = np.random.default_rng(wseed).uniform(0.5, 1.5, size=out.shape)
        return T.tsum(T.mul(out, Tensor(w)))

    def run(name, fn, params):
        results.append(check_gradients(name, fn, params, tol=tol))

    a = _rt(seed + 1, 3, 4)
    b = _rt(seed + 2, 3, 4)
    run("add", lambda: weighted(T.add(a, b), 90), [a, b])
    run("sub", lambda: weighted(T.sub(a, b), 91), [a, b])
    run("mul", lambda: weighted(T.mul(a, b), 92), [a, b])
    bd = _rt(seed + 3, 3, 4, lo=0.5, hi=2.0)
    run("div", lambda: weighted(T.div(a, bd), 93), [a, bd])
    bias = _rt(seed + 4, 4)
    run("broadcast_bias_add", lambda: weighted(T.add(a, bias), 94), [a, bias])
    run("neg", lambda: weighted(T.neg(a), 95), [a])
    run("scale", lambda: weighted(T.scale(a, -2.5), 96), [a])
    run("relu", lambda: weighted(T.relu(a), 97), [a])
    run("exp", lambda: weighted(T.exp(a), 98), [a])
    xp = _rt(seed + 5, 3, 4, lo=0.2, hi=3.0)
    run("log", lambda: weighted(T.log(xp), 99), [xp])
    run("sqrt", lambda: weighted(T.sqrt(xp), 100), [xp])

    m1 = _rt(seed + 6, 3, 4)
    m2 = _rt(seed + 7, 4, 2)
    run("matmul", lambda: weighted(T.matmul(m1, m2), 101), [m1, m2])
    b1 = _rt(seed + 8, 2, 3, 4)
    b2 = _rt(seed + 9, 1, 4, 2)
    run("matmul_batched", lambda: weighted(T.matmul(b1, b2), 102), [b1, b2])

    run("reshape", lambda: weighted(T.reshape(a, (4, 3)), 103), [a])
    t3 = _rt(seed + 10, 2, 3, 4)
    run("transpose", lambda: weighted(T.transpose(t3, (2, 0, 1)), 104), [t3])
    run("narrow", lambda: weighted(T.narrow(t3, 1, 2, axis=2), 105), [t3])

    run("sum_all", lambda: T.tsum(t3), [t3])
    run("sum_axis", lambda: weighted(T.tsum(t3, axis=(0, 2)), 106), [t3])
    run("mean", lambda: weighted(T.tmean(t3, axis=1), 107), [t3])
    run("sum_squares", lambda: T.sum_squares(t3), [t3])

    sx = _rt(seed + 11, 3, 5, lo=-2.0, hi=2.0)
    run("softmax_rows", lambda: weighted(T.softmax_rows(sx), 108), [sx])
    run("log_softmax_rows", lambda: weighted(T.log_softmax_rows(sx), 109), [sx])

    ln_x = _rt(seed + 12, 3, 6, lo=-2.0, hi=2.0)
    ln_g = _rt(seed + 13, 6, lo=0.5, hi=1.5)
    ln_b = _rt(seed + 14, 6)
    run("layer_norm",
        lambda: weighted(T.layer_norm(ln_x, ln_g, ln_b, eps=1e-6), 110),
        [ln_x, ln_g, ln_b])

    cx = _rt(seed + 15, 2, 3, 6, 6)
    cw = _rt(seed + 16, 4, 3, 3, 3)
    run("conv2d", lambda: weighted(T.conv2d(cx, cw, padding=1), 111), [cx, cw])
    px = _rt(seed + 17, 2, 3, 5, 6)
    run("max_pool2d", lambda: weighted(T.max_pool2d(px, 2), 112), [px])

    return results
