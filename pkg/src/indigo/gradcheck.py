"""Finite-difference checks for every differentiable path in the package.

Each check builds a scalar program, differentiates it on a tape and compares
against :func:`finite_difference_gradient` using the max-norm relative error.
``quantize`` is excluded: its backward rule is straight-through by design, so
it cannot agree with finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .degrade import DegradationOp, degradation_operator
from .denoiser import DenoiserConfig, init_denoiser
from .diffusion import build_linear_schedule, ddpm_loss, ddpm_step
from .engine import Tape, Tensor, finite_difference_gradient, gradient, ops, relative_error
from .guided import guidance_loss, measurement_loss
from .rng import Rng
from .winn import WinnConfig, coarse_loss, init_winn, winn_forward, winn_inverse

TOL = {np.float32: 1e-3, np.float64: 1e-6}
STEP = {np.float32: 1e-3, np.float64: 1e-6}


@dataclass(frozen=True)
class CheckResult:
    name: str
    dtype: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def _tape_gradient(program: Callable[..., Tensor], inputs: dict[str, Tensor], leaf: str) -> np.ndarray:
    watched = {k: (v.watch() if k == leaf else v) for k, v in inputs.items()}
    with Tape() as tape:
        out = program(**watched)
    return gradient(tape, out, [watched[leaf]])[watched[leaf]].data.reshape(-1)


def gradient_pair(program: Callable[..., Tensor], inputs: dict[str, Tensor], leaf: str,
                  step: float, coords=None) -> tuple[np.ndarray, np.ndarray]:
    """Flat tape gradient and central differences for ``inputs[leaf]`` (optionally at ``coords``)."""
    g = _tape_gradient(program, inputs, leaf)
    fd = finite_difference_gradient(program, inputs, leaf, step=step, coords=coords)
    if coords is not None:
        g = g[np.asarray(coords)]
    return g, fd.reshape(-1)


def check_program(program: Callable[..., Tensor], inputs: dict[str, Tensor], leaf: str,
                  step: float, coords=None) -> float:
    """Relative error between the tape gradient and central differences for ``inputs[leaf]``."""
    return relative_error(*gradient_pair(program, inputs, leaf, step, coords))


def _kink_aware(program, p: Tensor, coords, g: np.ndarray, fd: np.ndarray, step: float) -> np.ndarray:
    """Per coordinate, the closest of the central and both one-sided differences to ``g``.

    A leaky-ReLU kink inside ``(x - h, x + h)`` biases the central difference
    while one side of it stays exact, so a correct gradient still matches
    that side. A wrong gradient matches none of the three.
    """
    f0 = float(program(p).data)
    flat = p.data.reshape(-1)
    out = fd.copy()
    for n, i in enumerate(coords):
        sides = []
        for sign in (1.0, -1.0):
            v = flat.copy()
            v[i] += sign * step
            sides.append(sign * (float(program(Tensor(v.reshape(p.shape), dtype=p.dtype)).data) - f0) / step)
        cands = np.array([fd[n], *sides])
        out[n] = cands[np.argmin(np.abs(cands - g[n]))]
    return out


def _check_params(params: dict[str, Tensor], loss: Callable[[dict[str, Tensor]], Tensor], rng: Rng,
                  step: float, per_tensor: int = 3, kinks: bool = False) -> float:
    """Relative error over the whole parameter vector, sampled ``per_tensor`` coordinates at a time."""
    tape_parts, fd_parts = [], []
    for name, p in params.items():
        def program(theta, name=name):
            return loss({**params, name: theta})
        coords = _coords(rng, p.size, per_tensor)
        g, fd = gradient_pair(program, {"theta": p}, "theta", step, coords)
        if kinks:
            fd = _kink_aware(program, p, coords, g, fd, step)
        tape_parts.append(g)
        fd_parts.append(fd)
    return relative_error(np.concatenate(tape_parts), np.concatenate(fd_parts))


# ------------------------------------------------------------- primitives

def _away_from_zero(rng: Rng, shape, margin: float = 0.05) -> np.ndarray:
    """Normal draws pushed off the kink at 0 so finite differences stay on one side."""
    v = rng.normal(shape, np.float64)
    return np.where(v >= 0, v + margin, v - margin)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ops.reduce_sum(ops.mul(out, Tensor(w.reshape(out.shape), dtype=out.dtype)))


def _primitive_cases() -> dict[str, Callable[[Rng, type], tuple[Callable, dict]]]:
    def unary(fn, shape=(2, 3, 4, 4), kink=False):
        def build(rng, dt):
            x = _away_from_zero(rng, shape) if kink else rng.normal(shape, np.float64)
            probe = Tensor(fn(Tensor(x, dtype=dt)).data)
            w = rng.normal(probe.shape, np.float64)
            return (lambda x: _weighted(fn(x), w)), {"x": Tensor(x, dtype=dt)}
        return build

    def binary(fn, shape=(2, 3, 4)):
        def build(rng, dt):
            a, b = rng.normal(shape, np.float64), rng.normal(shape, np.float64)
            w = rng.normal(shape, np.float64)
            return (lambda a, b: _weighted(fn(a, b), w)), {"a": Tensor(a, dtype=dt), "b": Tensor(b, dtype=dt)}
        return build

    def conv(stride, padding, cin=2, cout=3, k=3, size=5):
        def build(rng, dt):
            x = rng.normal((1, cin, size, size), np.float64)
            wt = rng.normal((cout, cin, k, k), np.float64) / np.sqrt(cin * k * k)
            b = rng.normal((cout,), np.float64)
            out = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, padding=padding)
            w = rng.normal(out.shape, np.float64)
            fn = lambda x, wt, b: _weighted(ops.conv2d(x, wt, b, stride=stride, padding=padding), w)
            return fn, {"x": Tensor(x, dtype=dt), "wt": Tensor(wt, dtype=dt), "b": Tensor(b, dtype=dt)}
        return build

    def depthwise(rng, dt):
        x = rng.normal((1, 2, 5, 5), np.float64)
        dw = rng.normal((2, 1, 3, 3), np.float64) / 3
        b = rng.normal((2,), np.float64)
        w = rng.normal((1, 2, 5, 5), np.float64)
        fn = lambda x, dw, b: _weighted(ops.depthwise_conv2d(x, dw, b), w)
        return fn, {k: Tensor(v, dtype=dt) for k, v in dict(x=x, dw=dw, b=b).items()}

    def separable(rng, dt):
        x = rng.normal((1, 2, 4, 4), np.float64)
        dw = rng.normal((2, 1, 3, 3), np.float64) / 3
        pw = rng.normal((2, 2, 1, 1), np.float64) / 2
        b = rng.normal((2,), np.float64)
        w = rng.normal((1, 2, 4, 4), np.float64)
        fn = lambda x, dw, pw, b: _weighted(ops.separable_conv2d(x, dw, pw, b), w)
        return fn, {k: Tensor(v, dtype=dt) for k, v in dict(x=x, dw=dw, pw=pw, b=b).items()}

    def mm(rng, dt):
        a, b = rng.normal((3, 4), np.float64), rng.normal((4, 5), np.float64)
        w = rng.normal((3, 5), np.float64)
        return (lambda a, b: _weighted(ops.matmul(a, b), w)), {"a": Tensor(a, dtype=dt), "b": Tensor(b, dtype=dt)}

    def bias(rng, dt):
        x, b = rng.normal((2, 3, 4, 4), np.float64), rng.normal((3,), np.float64)
        w = rng.normal((2, 3, 4, 4), np.float64)
        return (lambda x, b: _weighted(ops.bias_add(x, b), w)), {"x": Tensor(x, dtype=dt), "b": Tensor(b, dtype=dt)}

    def chan(rng, dt):
        x, e = rng.normal((2, 3, 4, 4), np.float64), rng.normal((2, 3), np.float64)
        w = rng.normal((2, 3, 4, 4), np.float64)
        return (lambda x, e: _weighted(ops.channel_add(x, e), w)), {"x": Tensor(x, dtype=dt), "e": Tensor(e, dtype=dt)}

    def cat(rng, dt):
        a, b = rng.normal((2, 2, 4, 4), np.float64), rng.normal((2, 3, 4, 4), np.float64)
        w = rng.normal((2, 5, 4, 4), np.float64)
        return (lambda a, b: _weighted(ops.concat([a, b]), w)), {"a": Tensor(a, dtype=dt), "b": Tensor(b, dtype=dt)}

    def spl(rng, dt):
        x = rng.normal((2, 5, 4, 4), np.float64)
        w1, w2 = rng.normal((2, 2, 4, 4), np.float64), rng.normal((2, 3, 4, 4), np.float64)

        def fn(x):
            a, b = ops.split(x, [2, 3])
            return ops.add(_weighted(a, w1), _weighted(b, w2))
        return fn, {"x": Tensor(x, dtype=dt)}

    return {
        "add": binary(ops.add),
        "sub": binary(ops.sub),
        "mul": binary(ops.mul),
        "scale": unary(lambda x: ops.scale(x, -1.7)),
        "affine": unary(lambda x: ops.affine(x, 0.5, 0.5)),
        "relu": unary(ops.relu, kink=True),
        "leaky_relu": unary(ops.leaky_relu, kink=True),
        "silu": unary(ops.silu),
        "reduce_sum": unary(ops.reduce_sum),
        "sq_l2": unary(ops.sq_l2),
        "mean": unary(ops.mean),
        "reshape": unary(lambda x: ops.reshape(x, (6, 16))),
        "concat": cat,
        "split": spl,
        "polyphase_split": unary(lambda x: ops.polyphase_split(x, 2)),
        "polyphase_merge": unary(lambda x: ops.polyphase_merge(x, 2), shape=(2, 8, 3, 3)),
        "upsample_nearest": unary(lambda x: ops.upsample_nearest(x, 2)),
        "avg_pool": unary(lambda x: ops.avg_pool(x, 2)),
        "bias_add": bias,
        "channel_add": chan,
        "matmul": mm,
        "conv2d": conv(1, None),
        "conv2d_stride2": conv(2, 1, size=6),
        "conv2d_valid": conv(1, 0),
        "depthwise_conv2d": depthwise,
        "separable_conv2d": separable,
    }


def check_primitives(seed: int = 0, instances: int = 10) -> list[CheckResult]:
    """Every primitive on ``instances`` random draws per dtype.

    The float32 tape gradient is compared with central differences of the
    same instance rebuilt in float64 (step 1e-3): float32 differences at that
    step carry ~1e-4 relative rounding noise per output, which would swamp
    the 1e-3 budget on anything but trivial sizes.
    """
    results = []
    for dt in (np.float32, np.float64):
        for name, build in _primitive_cases().items():
            worst = 0.0
            for i in range(instances):
                key = (i, 0 if dt is np.float32 else 1)
                program, inputs = build(Rng(seed, key=key), dt)
                ref_program, ref_inputs = build(Rng(seed, key=key), np.float64)
                for leaf in inputs:
                    g = _tape_gradient(program, inputs, leaf)
                    fd = finite_difference_gradient(ref_program, ref_inputs, leaf, step=STEP[dt])
                    worst = max(worst, relative_error(g, fd.reshape(-1)))
            results.append(CheckResult(f"primitive:{name}", np.dtype(dt).name, worst, TOL[dt]))
    return results


# ------------------------------------------------------------ model losses

def _randomise(params: dict[str, Tensor], rng: Rng, scale: float = 0.3) -> dict[str, Tensor]:
    """Replace all-zero tensors (biases, output convs) so every gradient path is exercised."""
    out = {}
    for k, v in params.items():
        if not np.any(v.data):
            v = Tensor(rng.normal(v.shape, np.float64) * scale, dtype=v.dtype)
        out[k] = v
    return out


def _coords(rng: Rng, size: int, n: int) -> list[int]:
    return sorted(set(int(i) for i in rng.integers(0, size, n)))


def check_denoiser_loss(seed: int = 0, dtype=np.float32) -> CheckResult:
    """The noise-prediction loss against every parameter tensor, on sampled coordinates."""
    rng = Rng(seed, key=(101,))
    cfg = DenoiserConfig(image_shape=(1, 8, 8), base_channels=4, emb_dim=8, blocks=1, T=10)
    model = init_denoiser(cfg, rng, dtype)
    model = model.replace(_randomise(model.params, rng))
    s = build_linear_schedule(cfg.T)
    x0 = Tensor(rng.uniform((2, 1, 8, 8)) * 2 - 1, dtype=dtype)
    eps = Tensor(rng.normal((2, 1, 8, 8), np.float64), dtype=dtype)
    t = np.array([3, 9])
    worst = _check_params(model.params, lambda p: ddpm_loss(x0, t, eps, model.replace(p), s), rng, STEP[dtype])
    return CheckResult("denoiser:eps_loss/theta", np.dtype(dtype).name, worst, TOL[dtype])


def _tiny_winn(rng: Rng, dtype, levels: int = 2):
    cfg = WinnConfig(channels=1, levels=levels, pairs=1, blocks=1, width=4, kernel=3)
    return init_winn(cfg, rng, mode="random", dtype=dtype)


def check_winn_loss(seed: int = 0, dtype=np.float32) -> CheckResult:
    rng = Rng(seed, key=(102,))
    winn = _tiny_winn(rng, dtype)
    x = Tensor(rng.uniform((2, 1, 8, 8)), dtype=dtype)
    y = Tensor(rng.uniform((2, 1, 2, 2)), dtype=dtype)
    worst = _check_params(winn.params, lambda p: coarse_loss(winn.replace(p), x, y), rng, STEP[dtype], kinks=True)
    return CheckResult("winn:coarse_loss/theta", np.dtype(dtype).name, worst, TOL[dtype])


def check_winn_input(seed: int = 0, dtype=np.float32) -> CheckResult:
    """``|WINN_I(y, d(x)) - x|^2`` against ``x`` on an 8x8 input."""
    rng = Rng(seed, key=(103,))
    winn = _tiny_winn(rng, dtype)
    y = Tensor(rng.uniform((1, 2, 2)), dtype=dtype)

    def program(x):
        _, d = winn_forward(winn, x)
        return ops.sq_l2(ops.sub(winn_inverse(winn, y, d), x))

    x = Tensor(rng.uniform((1, 8, 8)), dtype=dtype)
    return CheckResult("winn:consistency/x", np.dtype(dtype).name,
                       check_program(program, {"x": x}, "x", STEP[dtype]), TOL[dtype])


class AffineDenoiser:
    """``eps(x, t) = a x + b``: a two-parameter stand-in for frozen-model checks."""

    def __init__(self, a: float, b: float, dtype=np.float32):
        self.a, self.b, self.dtype = a, b, np.dtype(dtype)

    def __call__(self, x_t: Tensor, t) -> Tensor:
        return ops.affine(x_t, self.a, self.b)


def _guidance_program(denoiser, winn, y, t, z, s):
    def program(x):
        _, x0 = ddpm_step(denoiser, x, t, z, s)
        return guidance_loss(x0, y, winn)[0]
    return program


def check_guidance(seed: int = 0, dtype=np.float32) -> list[CheckResult]:
    """The guidance gradient with respect to ``x_t``, through the denoiser and both WINN passes."""
    rng = Rng(seed, key=(104,))
    s = build_linear_schedule(10)
    winn = _tiny_winn(rng, dtype, levels=1)
    results = []
    y = Tensor(rng.uniform((1, 2, 2)), dtype=dtype)
    z = Tensor(rng.normal((1, 4, 4), np.float64), dtype=dtype)
    x = Tensor(rng.normal((1, 4, 4), np.float64), dtype=dtype)
    prog = _guidance_program(AffineDenoiser(0.3, -0.1, dtype), winn, y, 5, z, s)
    results.append(CheckResult("guidance:affine_denoiser/x_t", np.dtype(dtype).name,
                               check_program(prog, {"x": x}, "x", STEP[dtype]), TOL[dtype]))

    cfg = DenoiserConfig(image_shape=(1, 8, 8), base_channels=4, emb_dim=8, blocks=1, T=10)
    den = init_denoiser(cfg, rng, dtype)
    den = den.replace(_randomise(den.params, rng))
    y8 = Tensor(rng.uniform((1, 4, 4)), dtype=dtype)
    z8 = Tensor(rng.normal((1, 8, 8), np.float64), dtype=dtype)
    x8 = Tensor(rng.normal((1, 8, 8), np.float64), dtype=dtype)
    prog = _guidance_program(den, winn, y8, 7, z8, s)
    results.append(CheckResult("guidance:network_denoiser/x_t", np.dtype(dtype).name,
                               check_program(prog, {"x": x8}, "x", STEP[dtype]), TOL[dtype]))
    return results


def check_baseline(seed: int = 0, dtype=np.float32) -> CheckResult:
    rng = Rng(seed, key=(105,))
    s = build_linear_schedule(10)
    H = degradation_operator(DegradationOp("box_downsample", 2))
    den = AffineDenoiser(0.3, -0.1, dtype)
    y = Tensor(rng.uniform((1, 2, 2)), dtype=dtype)
    z = Tensor(rng.normal((1, 4, 4), np.float64), dtype=dtype)

    def program(x):
        _, x0 = ddpm_step(den, x, 5, z, s)
        return measurement_loss(x0, y, H)

    x = Tensor(rng.normal((1, 4, 4), np.float64), dtype=dtype)
    return CheckResult("baseline:measurement_loss/x_t", np.dtype(dtype).name,
                       check_program(program, {"x": x}, "x", STEP[dtype]), TOL[dtype])


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    """Every suite, in a fixed order."""
    results = check_primitives(seed)
    for dt in (np.float32, np.float64):
        results.append(check_denoiser_loss(seed, dt))
        results.append(check_winn_loss(seed, dt))
        results.append(check_winn_input(seed, dt))
        results.extend(check_guidance(seed, dt))
        results.append(check_baseline(seed, dt))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'check':40s} {'dtype':8s} {'rel.err':>10s} {'tol':>8s}  status"]
    for r in results:
        lines.append(f"{r.name:40s} {r.dtype:8s} {r.error:10.2e} {r.tol:8.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
