"""DDPM sampling with WINN data consistency, and a measurement-domain baseline.

At every reverse step the clean estimate ``x0_t`` is pushed through the
WINN forward transform, its coarse branch is swapped for the measurement
``y``, and the WINN inverse yields the consistent estimate ``xhat``. The
unconditional update is then corrected by ``-zeta * grad_{x_t} |xhat - x0_t|^2``,
with the gradient taken through the denoiser and both WINN passes.

WINN works on images in [0, 1]; the diffusion runs in [-1, 1]. ``x0_t`` is
mapped to [0, 1] before the WINN and the guidance loss is measured there, in
the same units as ``y``. The gradient is still taken with respect to the
diffusion state ``x_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, SamplingError, ddpm_step, step_noise, to_unit
from .engine import NonFiniteError, ShapeError, Tape, Tensor, gradient, ops
from .rng import Rng, draw_normal
from .winn import WinnModel, winn_forward, winn_inverse


@dataclass(frozen=True)
class GuidanceConfig:
    zeta: float = 0.5
    T: int = 200
    seed: int = 0
    record_trace: bool = False
    trace_steps: tuple[int, ...] = ()  # empty means (T // 2,)

    def __post_init__(self):
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")

    def snapshot_steps(self) -> tuple[int, ...]:
        return self.trace_steps or (max(1, self.T // 2),)


@dataclass
class Trace:
    """Snapshots of ``(x0_t, c_t, xhat_t)`` in image units, keyed by ``t``."""

    x0: dict[int, np.ndarray] = field(default_factory=dict)
    coarse: dict[int, np.ndarray] = field(default_factory=dict)
    xhat: dict[int, np.ndarray] = field(default_factory=dict)


def chain_rngs(seed: int, shape: Sequence[int]) -> "Rng | list[Rng]":
    """One stream for a single image, else one per image seeded ``seed ^ index``."""
    if len(shape) == 3:
        return Rng(seed)
    return [Rng(seed ^ i) for i in range(shape[0])]


def guidance_loss(x0_t: Tensor, y: Tensor, winn: WinnModel) -> tuple[Tensor, Tensor, Tensor]:
    """``|xhat - x0_t|^2`` in image units, ``xhat = WINN_I(y, d(x0_t))``.

    Returns ``(loss, c_t, xhat)`` with ``xhat`` in [0, 1] units (unclipped).
    """
    u = to_unit(x0_t)
    c, d = winn_forward(winn, u)
    xhat = winn_inverse(winn, y, d)
    return ops.sq_l2(ops.sub(xhat, u)), c, xhat


def measurement_loss(x0_t: Tensor, y: Tensor, H: Callable[[Tensor], Tensor]) -> Tensor:
    """``|y - H(x0_t)|^2`` in image units."""
    return ops.sq_l2(ops.sub(y, H(to_unit(x0_t))))


def _guided_step(x_t: Tensor, t: int, denoiser: Denoiser, s: NoiseSchedule, zeta: float, rng,
                 loss_fn: Callable[[Tensor], tuple]) -> tuple[Tensor, tuple]:
    z = step_noise(rng, t, x_t.shape, x_t.dtype)
    leaf = x_t.watch()
    try:
        with Tape() as tape:
            x_prev, x0_t = ddpm_step(denoiser, leaf, t, z, s)
            loss, *extras = loss_fn(x0_t)
        g = gradient(tape, loss, [leaf])[leaf].data
    except NonFiniteError as e:
        raise SamplingError(t, str(e)) from e
    if not np.isfinite(g).all():
        raise SamplingError(t, "non-finite guidance gradient")
    out = x_prev.data - np.asarray(zeta, dtype=g.dtype) * g
    if not np.isfinite(out).all():
        raise SamplingError(t, "non-finite state after guidance")
    return Tensor._wrap(out), (x0_t, *extras)


def _check_measurement(y: Tensor, x_shape, winn: WinnModel) -> None:
    expected = winn.coarse_shape(x_shape)
    if tuple(y.shape) != tuple(expected):
        raise ShapeError(f"measurement {y.shape} does not match WINN coarse shape {expected}")


def indigo_step(x_t: Tensor, t: int, y: Tensor, denoiser: Denoiser, winn: WinnModel, s: NoiseSchedule,
                cfg: GuidanceConfig, rng, trace: Trace | None = None) -> Tensor:
    """One reverse step with WINN guidance; returns ``x_{t-1}``."""
    _check_measurement(y, x_t.shape, winn)
    y = ops.constant(y, x_t.dtype)
    x_prev, (x0_t, c, xhat) = _guided_step(x_t, t, denoiser, s, cfg.zeta, rng,
                                           lambda x0: guidance_loss(x0, y, winn))
    if trace is not None:
        trace.x0[t] = np.clip(to_unit(x0_t).data, 0, 1)
        trace.coarse[t] = c.data.copy()
        trace.xhat[t] = np.clip(xhat.data, 0, 1)
    return x_prev


def indigo_sample(y, denoiser: Denoiser, winn: WinnModel, s: NoiseSchedule, cfg: GuidanceConfig,
                  image_shape: Sequence[int], rng=None) -> tuple[Tensor, Trace | None]:
    """Full guided reverse chain from ``x_T ~ N(0, I)``.

    ``y`` is one measurement ``(C, h, w)`` or a batch ``(N, C, h, w)``;
    ``image_shape`` is the per-image ``(C, H, W)``. Returns the reconstruction
    clipped to [0, 1] and the trace when ``cfg.record_trace`` is set.
    """
    y = ops.constant(y)
    shape = tuple(image_shape) if y.ndim == 3 else (y.shape[0],) + tuple(image_shape)
    _check_measurement(y, shape, winn)
    rng = chain_rngs(cfg.seed, shape) if rng is None else rng
    dtype = np.dtype(getattr(denoiser, "dtype", np.float32))
    y = ops.constant(y, dtype)
    trace = Trace() if cfg.record_trace else None
    keep = set(cfg.snapshot_steps())
    x = Tensor._wrap(draw_normal(rng, shape, dtype))
    for t in range(s.T, 0, -1):
        x = indigo_step(x, t, y, denoiser, winn, s, cfg, rng, trace if t in keep else None)
    return Tensor._wrap(np.clip(to_unit(x).data, 0.0, 1.0)), trace


def consistency_residual(x, y, winn: WinnModel):
    """``|coarse(WINN_F(x)) - y|_2`` for an image in [0, 1]; per image for batches."""
    x = ops.constant(x)
    y = ops.constant(y, x.dtype)
    c, _ = winn_forward(winn, x)
    if c.shape != y.shape:
        raise ShapeError(f"consistency_residual: coarse {c.shape} vs measurement {y.shape}")
    r = (c.data - y.data).astype(np.float64)
    if r.ndim == 3:
        return float(np.sqrt(np.sum(r ** 2)))
    return np.sqrt(np.sum(r ** 2, axis=(-3, -2, -1)))


def baseline_measurement_step(x_t: Tensor, t: int, y: Tensor, denoiser: Denoiser,
                              H: Callable[[Tensor], Tensor] | None, s: NoiseSchedule, cfg: GuidanceConfig,
                              rng) -> Tensor:
    """Reverse step guided by ``|y - H(x0_t)|^2``; needs ``H`` in closed form."""
    if H is None:
        raise ValueError("measurement-domain guidance needs a closed-form degradation operator H")
    y = ops.constant(y, x_t.dtype)
    x_prev, _ = _guided_step(x_t, t, denoiser, s, cfg.zeta, rng, lambda x0: (measurement_loss(x0, y, H),))
    return x_prev


def baseline_sample(y, denoiser: Denoiser, H: Callable[[Tensor], Tensor] | None, s: NoiseSchedule,
                    cfg: GuidanceConfig, image_shape: Sequence[int], rng=None) -> Tensor:
    if H is None:
        raise ValueError("measurement-domain guidance needs a closed-form degradation operator H")
    y = ops.constant(y)
    shape = tuple(image_shape) if y.ndim == 3 else (y.shape[0],) + tuple(image_shape)
    rng = chain_rngs(cfg.seed, shape) if rng is None else rng
    dtype = np.dtype(getattr(denoiser, "dtype", np.float32))
    y = ops.constant(y, dtype)
    x = Tensor._wrap(draw_normal(rng, shape, dtype))
    for t in range(s.T, 0, -1):
        x = baseline_measurement_step(x, t, y, denoiser, H, s, cfg, rng)
    return Tensor._wrap(np.clip(to_unit(x).data, 0.0, 1.0))
