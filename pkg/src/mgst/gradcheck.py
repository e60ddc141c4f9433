"""Central finite-difference gradient oracle.

The analytic side runs at the tensor's own dtype; the numeric side perturbs a
float64 copy, so the comparison measures the backward rules rather than f32
rounding in the difference quotient.
"""
from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Parameter, Tensor, backward, no_grad


class NondeterminismError(RuntimeError):
    pass


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ValueError(f"function must return a scalar, got shape {list(t.shape)}")
    return float(t.data.reshape(-1)[0])


def finite_diff_check(f: Callable[[Tensor], Tensor], params, eps: float = 1e-6,
                      fd_dtype=np.float64) -> float:
    """Max relative error between ``backward`` and central differences of ``f``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.asarray(params)
    if base.dtype.kind != "f":
        base = base.astype(np.float32)
    p = Parameter(base.copy())
    analytic = backward(f(p), [p])[p]

    x = base.astype(fd_dtype)
    with no_grad():
        first = _scalar(f(Tensor(x.copy())))
        if _scalar(f(Tensor(x.copy()))) != first:
            raise NondeterminismError("f returned different values for identical inputs")
        numeric = np.empty(x.shape, dtype=np.float64)
        for i in np.ndindex(*x.shape):
            xp = x.copy()
            xp[i] += eps
            xm = x.copy()
            xm[i] -= eps
            numeric[i] = (_scalar(f(Tensor(xp))) - _scalar(f(Tensor(xm)))) / (2 * eps)
    return float(relative_error(analytic, numeric).max(initial=0.0))


def check_tensors(loss_fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], eps: float = 1e-6,
                  max_per_tensor: Optional[int] = None, seed: int = 0) -> dict[str, float]:
    """Finite-difference check over several leaves in place.

    ``loss_fn`` recomputes the loss from the current ``.data`` of every
    tensor.  While one tensor is perturbed its data is held in float64;
    the original array is restored afterwards.  With ``max_per_tensor`` a
    random subset of elements is checked per tensor.
    """
    rng = np.random.default_rng(seed)
    grads = backward(loss_fn(), list(tensors.values()))
    with no_grad():
        ref = _scalar(loss_fn())
        if _scalar(loss_fn()) != ref:
            raise NondeterminismError("loss_fn is not deterministic")
    report = {}
    for name, t in tensors.items():
        analytic = grads[t]
        original = t.data
        flat_n = original.size
        idx = np.arange(flat_n)
        if max_per_tensor is not None and flat_n > max_per_tensor:
            idx = np.sort(rng.choice(flat_n, size=max_per_tensor, replace=False))
        x = original.astype(np.float64)
        errs = []
        try:
            with no_grad():
                for j in idx:
                    pos = np.unravel_index(j, original.shape)
                    xp = x.copy()
                    xp[pos] += eps
                    t.data = xp
                    fp = _scalar(loss_fn())
                    xm = x.copy()
                    xm[pos] -= eps
                    t.data = xm
                    fm = _scalar(loss_fn())
                    errs.append(relative_error(analytic[pos], (fp - fm) / (2 * eps)))
        finally:
            t.data = original
        report[name] = float(np.max(errs)) if errs else 0.0
    return report
