"""Degradation operators, the synthetic shapes dataset, training pairs and PSNR."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .engine import ShapeError, Tensor, ops
from .rng import Rng

KINDS = ("parity_downsample", "box_downsample", "gaussian_blur_downsample", "block_quantize_downsample")
PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class DegradationOp:
    """``y = H(x) + n`` with ``n ~ N(0, noise_sigma^2 I)`` added after resizing.

    ``radius`` is the Gaussian standard deviation in pixels; ``block`` and
    ``qstep`` configure the block-DCT quantizer applied to the downsampled
    image (the JPEG stand-in).
    """

    kind: str = "box_downsample"
    k: int = 2
    noise_sigma: float = 0.0
    radius: float = 1.0
    block: int = 4
    qstep: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if self.k not in (2, 4, 8):
            raise ValueError(f"downsampling factor must be 2, 4 or 8, got {self.k}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def levels(self) -> int:
        """WINN level count matching the downsampling factor."""
        return int(np.log2(self.k))

    def to_dict(self) -> dict:
        return asdict(self)


def _check_divisible(op: DegradationOp, shape) -> None:
    h, w = shape[-2:]
    if h % op.k or w % op.k:
        raise ShapeError(f"{op.kind}: extents {(h, w)} not divisible by k={op.k}")
    if op.kind == "block_quantize_downsample" and ((h // op.k) % op.block or (w // op.k) % op.block):
        raise ShapeError(f"{op.kind}: downsampled extents {(h // op.k, w // op.k)} not divisible by block={op.block}")


def gaussian_kernel(radius: float) -> np.ndarray:
    half = max(1, int(np.ceil(3 * radius)))
    r = np.arange(-half, half + 1)
    g = np.exp(-0.5 * (r / radius) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies."""
    u = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    d = np.cos((2 * x + 1) * u * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return d


def _block_dct_kernel(block: int, channels: int, inverse: bool = False) -> np.ndarray:
    d = dct_matrix(block)
    d2 = np.kron(d, d)  # [(u,v), (r,s)]
    if inverse:
        d2 = d2.T
    return np.kron(d2, np.eye(channels))[:, :, None, None]


def blur(x: Tensor, radius: float) -> Tensor:
    """Gaussian blur, renormalised at the borders so constants are preserved."""
    c = x.shape[-3]
    k = gaussian_kernel(radius)
    w = Tensor._wrap(np.broadcast_to(k, (c, 1) + k.shape).astype(x.dtype))
    ones = np.ones(x.shape, dtype=x.dtype)
    norm = ops.depthwise_conv2d(Tensor._wrap(ones), w).data
    return ops.mul(ops.depthwise_conv2d(x, w), Tensor._wrap((1.0 / norm).astype(x.dtype)))


def block_quantize(x: Tensor, block: int, qstep: float) -> Tensor:
    """Blockwise orthonormal DCT, deadzone quantization, inverse DCT."""
    c = x.shape[-3]
    fwd = Tensor._wrap(_block_dct_kernel(block, c).astype(x.dtype))
    inv = Tensor._wrap(_block_dct_kernel(block, c, inverse=True).astype(x.dtype))
    coef = ops.conv2d(ops.polyphase_split(x, block), fwd, padding=0)
    return ops.polyphase_merge(ops.conv2d(ops.quantize(coef, qstep), inv, padding=0), block)


def degradation_operator(op: DegradationOp) -> Callable[[Tensor], Tensor]:
    """The noiseless operator ``H`` as a differentiable tensor function."""

    def H(x: Tensor) -> Tensor:
        _check_divisible(op, x.shape)
        if op.kind == "parity_downsample":
            c = x.shape[-3]
            return ops.split(ops.polyphase_split(x, op.k), [c, (op.k ** 2 - 1) * c])[0]
        if op.kind == "box_downsample":
            return ops.avg_pool(x, op.k)
        if op.kind == "gaussian_blur_downsample":
            c = x.shape[-3]
            return ops.split(ops.polyphase_split(blur(x, op.radius), op.k), [c, (op.k ** 2 - 1) * c])[0]
        return block_quantize(ops.avg_pool(x, op.k), op.block, op.qstep)

    return H


def apply_degradation(op: DegradationOp, x: Tensor, rng: Rng | None = None) -> Tensor:
    """``H(x)`` plus fresh Gaussian noise; the result is not clipped."""
    y = degradation_operator(op)(x)
    if op.noise_sigma == 0:
        return y
    if rng is None:
        raise ValueError("apply_degradation: noisy operator needs an rng")
    n = rng.normal(y.shape, y.dtype) * np.asarray(op.noise_sigma, dtype=y.dtype)
    return Tensor._wrap(y.data + n)


def nearest_upsample(y: np.ndarray, k: int) -> np.ndarray:
    return np.asarray(y).repeat(k, axis=-2).repeat(k, axis=-1)


# ------------------------------------------------------------------ dataset

@dataclass(frozen=True)
class DatasetSpec:
    count: int = 512
    size: tuple[int, int, int] = (1, 16, 16)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"count": self.count, "size": list(self.size), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(count=d["count"], size=tuple(d["size"]), seed=d["seed"])


_SUPERSAMPLE = 4


def _linear_ramp(rng: Rng, u: np.ndarray, v: np.ndarray, channels: int) -> np.ndarray:
    theta = rng.uniform() * 2 * np.pi
    a = rng.uniform(channels)
    b = rng.uniform(channels)
    proj = np.cos(theta) * (u - 0.5) + np.sin(theta) * (v - 0.5)
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    return a[:, None, None] + (b - a)[:, None, None] * t[None]


def generate_image(spec: DatasetSpec, index: int) -> np.ndarray:
    """Piecewise-smooth image of 2-5 anti-aliased shapes on a ramp background.

    Shapes are rotated rectangles and ellipses filled with a flat tone or a
    linear ramp. Coverage is computed on a 4x supersampled grid. The result
    depends only on ``(spec.seed, index)``.
    """
    if not 0 <= index < spec.count:
        raise IndexError(f"index {index} outside dataset of {spec.count}")
    c, h, w = spec.size
    rng = Rng(spec.seed, key=(index,))
    ss = _SUPERSAMPLE
    v, u = np.meshgrid((np.arange(h * ss) + 0.5) / (h * ss), (np.arange(w * ss) + 0.5) / (w * ss), indexing="ij")
    img = _linear_ramp(rng, u, v, c)
    for _ in range(int(rng.integers(2, 6))):
        kind = "rect" if rng.uniform() < 0.5 else "ellipse"
        cx, cy = 0.1 + 0.8 * rng.uniform(2)
        ax, ay = 0.08 + 0.3 * rng.uniform(2)
        phi = rng.uniform() * np.pi
        du, dv = u - cx, v - cy
        pu = np.cos(phi) * du + np.sin(phi) * dv
        pv = -np.sin(phi) * du + np.cos(phi) * dv
        if kind == "rect":
            inside = (np.abs(pu) <= ax) & (np.abs(pv) <= ay)
        else:
            inside = (pu / ax) ** 2 + (pv / ay) ** 2 <= 1.0
        if rng.uniform() < 0.5:
            fill = np.broadcast_to(rng.uniform(c)[:, None, None], img.shape)
        else:
            fill = _linear_ramp(rng, u, v, c)
        img = np.where(inside[None], fill, img)
    img = img.reshape(c, h, ss, w, ss).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(spec: DatasetSpec, start: int = 0, stop: int | None = None) -> np.ndarray:
    stop = spec.count if stop is None else stop
    return np.stack([generate_image(spec, i) for i in range(start, stop)])


def make_pairs(spec: DatasetSpec, op: DegradationOp, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """All ``(x_i, y_i)`` for the dataset; noise is drawn per pair, in index order."""
    _check_divisible(op, spec.size)
    xs = generate_dataset(spec)
    ys = np.stack([apply_degradation(op, Tensor._wrap(x), rng).data for x in xs])
    return xs, ys


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB, capped at 99 dB for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(peak ** 2 / mse)))
