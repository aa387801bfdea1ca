"""Central finite differences, the independent oracle for every gradient."""

from __future__ import annotations

from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def _call(program, inputs):
    if isinstance(inputs, Mapping):
        return program(**inputs)
    return program(*inputs)


def _scalar(value) -> float:
    v = value.data if isinstance(value, Tensor) else np.asarray(value)
    if v.size != 1:
        raise ShapeError(f"finite_difference_gradient: program must be scalar-valued, got shape {v.shape}")
    return float(v.reshape(()))


def finite_difference_gradient(program: Callable[..., Tensor], inputs: Mapping[str, Tensor] | Sequence[Tensor],
                               leaf: Hashable, step: float = 1e-3,
                               coords: Sequence[int] | None = None) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for each coordinate ``i`` of ``inputs[leaf]``.

    With ``coords`` (flat indices) only those partials are computed and a 1-D
    array is returned; otherwise the result has the leaf's shape. No tape is
    involved, so the oracle shares nothing with the reverse sweep except the
    forward primitives themselves.
    """
    if step <= 0:
        raise ValueError("finite_difference_gradient: step must be positive")
    mutable = dict(inputs) if isinstance(inputs, Mapping) else list(inputs)
    base = mutable[leaf]
    flat = np.array(base.data, copy=True).reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx), dtype=np.float64)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(flat[i])  # the step actually realised after rounding to the leaf dtype
        mutable[leaf] = Tensor(flat.reshape(base.shape), dtype=base.dtype)
        fp = _scalar(_call(program, mutable))
        flat[i] = orig - step
        lo = float(flat[i])
        mutable[leaf] = Tensor(flat.reshape(base.shape), dtype=base.dtype)
        fm = _scalar(_call(program, mutable))
        flat[i] = orig
        out[n] = (fp - fm) / (hi - lo)
    if coords is None:
        return out.reshape(base.shape).astype(base.dtype)
    return out


def relative_error(a, b) -> float:
    """Max-norm relative discrepancy ``|a - b|_inf / max(|a|_inf, |b|_inf)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    diff = np.abs(a - b).max(initial=0.0)
    if denom == 0.0:
        return diff
    return diff / denom
