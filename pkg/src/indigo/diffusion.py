"""Closed-form DDPM quantities: schedules, forward noising, x0 decoding and the
posterior reverse step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import NonFiniteError, ShapeError, Tensor, ops
from .rng import Rng, draw_normal

# A denoiser is anything mapping (x_t, t) -> predicted noise of the same shape.
Denoiser = Callable[[Tensor, int], Tensor]


class SamplingError(NonFiniteError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables indexed ``1..T``; index 0 holds ``alpha_bar[0] = 1``."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    # 1 - alpha_bar by its own recurrence, exact at t=1 where it equals beta[1]
    one_minus_alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 1..{self.T}")


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.ones(T + 1)
    omab = np.zeros(T + 1)
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
        omab[t] = omab[t - 1] * alpha[t] + beta[t]
    sigma = np.zeros(T + 1)
    sigma[1:] = np.sqrt(omab[:-1] / omab[1:] * beta[1:])
    for a in (beta, alpha, alpha_bar, omab, sigma):
        a.setflags(write=False)
    return NoiseSchedule(T, beta_start, beta_end, beta, alpha, alpha_bar, omab, sigma)


def _per_sample(coef: np.ndarray, like: Tensor) -> Tensor:
    shape = (len(coef),) + (1,) * (like.ndim - 1)
    return Tensor._wrap(np.broadcast_to(coef.reshape(shape), like.shape).astype(like.dtype))


def forward_marginal(x0: Tensor, t, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may be per-sample."""
    if x0.shape != eps.shape:
        raise ShapeError(f"forward_marginal: x0 {x0.shape} vs eps {eps.shape}")
    if np.ndim(t) == 0:
        s.check_step(int(t))
        return ops.add(ops.scale(x0, np.sqrt(s.alpha_bar[t])), ops.scale(eps, np.sqrt(s.one_minus_alpha_bar[t])))
    t = np.asarray(t)
    if len(t) != x0.shape[0]:
        raise ShapeError(f"forward_marginal: {len(t)} steps for batch {x0.shape}")
    if t.min() < 1 or t.max() > s.T:
        raise ValueError(f"steps outside 1..{s.T}")
    a = _per_sample(np.sqrt(s.alpha_bar[t]), x0)
    b = _per_sample(np.sqrt(s.one_minus_alpha_bar[t]), x0)
    return ops.add(ops.mul(x0, a), ops.mul(eps, b))


def forward_chain_step(x_prev: Tensor, t: int, rng: Rng, s: NoiseSchedule) -> Tensor:
    """One step of the noising chain, ``N(sqrt(1 - beta_t) x_prev, beta_t I)``."""
    s.check_step(t)
    g = Tensor._wrap(draw_normal(rng, x_prev.shape, x_prev.dtype))
    return ops.add(ops.scale(x_prev, np.sqrt(1.0 - s.beta[t])), ops.scale(g, np.sqrt(s.beta[t])))


def predict_x0(x_t: Tensor, t: int, eps_hat: Tensor, s: NoiseSchedule) -> Tensor:
    """Decode the clean-image estimate ``(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)``."""
    s.check_step(t)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"predict_x0: x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
    if s.alpha_bar[t] == 0:
        raise ValueError(f"predict_x0: alpha_bar[{t}] is zero")
    return ops.scale(ops.sub(x_t, ops.scale(eps_hat, np.sqrt(s.one_minus_alpha_bar[t]))),
                     1.0 / np.sqrt(s.alpha_bar[t]))


def posterior_coefficients(t: int, s: NoiseSchedule) -> tuple[float, float, float]:
    """Weights of ``x_t``, ``x0_t`` and ``z`` in the posterior mean step."""
    denom = s.one_minus_alpha_bar[t]
    c_xt = np.sqrt(s.alpha[t]) * s.one_minus_alpha_bar[t - 1] / denom
    c_x0 = np.sqrt(s.alpha_bar[t - 1]) * s.beta[t] / denom
    return float(c_xt), float(c_x0), float(s.sigma[t])


def posterior_step(x_t: Tensor, x0_t: Tensor, t: int, z: Tensor, s: NoiseSchedule) -> Tensor:
    s.check_step(t)
    if not x_t.shape == x0_t.shape == z.shape:
        raise ShapeError(f"posterior_step: shapes {x_t.shape}, {x0_t.shape}, {z.shape}")
    if t == 1 and np.any(z.data != 0):
        raise ValueError("posterior_step: z must be zero at t=1")
    c_xt, c_x0, sig = posterior_coefficients(t, s)
    return ops.add(ops.add(ops.scale(x_t, c_xt), ops.scale(x0_t, c_x0)), ops.scale(z, sig))


def reverse_step_eps(x_t: Tensor, t: int, eps_hat: Tensor, z: Tensor, s: NoiseSchedule) -> Tensor:
    """The single-formula reverse update in noise parameterisation, kept as a
    cross-check of :func:`predict_x0` followed by :func:`posterior_step`."""
    k = (1.0 - s.alpha[t]) / np.sqrt(s.one_minus_alpha_bar[t])
    return ops.add(ops.scale(ops.sub(x_t, ops.scale(eps_hat, k)), 1.0 / np.sqrt(s.alpha[t])),
                   ops.scale(z, s.sigma[t]))


def ddpm_loss(x0: Tensor, t, eps: Tensor, model: Denoiser, s: NoiseSchedule) -> Tensor:
    """Squared noise-prediction error, summed over all elements."""
    x_t = forward_marginal(x0, t, eps, s)
    return ops.sq_l2(ops.sub(eps, model(x_t, t)))


def step_noise(rng, t: int, shape, dtype) -> Tensor:
    if t > 1:
        return Tensor._wrap(draw_normal(rng, shape, dtype))
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ddpm_step(model: Denoiser, x_t: Tensor, t: int, z: Tensor, s: NoiseSchedule) -> tuple[Tensor, Tensor]:
    """Decode ``x0_t`` and take the posterior step. Returns ``(x_prev, x0_t)``."""
    x0_t = predict_x0(x_t, t, model(x_t, t), s)
    return posterior_step(x_t, x0_t, t, z, s), x0_t


def to_unit(x: Tensor) -> Tensor:
    """Map diffusion space [-1, 1] to image space [0, 1]."""
    return ops.affine(x, 0.5, 0.5)


def from_unit(x: Tensor) -> Tensor:
    return ops.affine(x, 2.0, -1.0)


def unconditional_sample(model: Denoiser, s: NoiseSchedule, rng: "Rng | Sequence[Rng]", shape,
                         dtype=np.float32) -> Tensor:
    """Ancestral sampling from ``x_T ~ N(0, I)``; returns the image clipped to [0, 1]."""
    shape = tuple(shape)
    x = Tensor._wrap(draw_normal(rng, shape, dtype))
    for t in range(s.T, 0, -1):
        z = step_noise(rng, t, shape, dtype)
        try:
            x, _ = ddpm_step(model, x, t, z, s)
        except NonFiniteError as e:
            raise SamplingError(t, str(e)) from e
    return Tensor._wrap(np.clip(to_unit(x).data, 0.0, 1.0))
