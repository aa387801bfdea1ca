"""Wavelet-inspired invertible network built from learned lifting steps.

One level splits the image into four polyphase components (lazy wavelet),
keeps the even/even component as the coarse branch and stacks the other
three as the detail branch, then applies ``M`` predict/update pairs::

    detail <- detail - P_m(coarse)
    coarse <- coarse + U_m(detail)

Each step only adds a function of the *other* branch, so the inverse just
undoes the steps in reverse order with flipped signs, whatever ``P`` and ``U``
compute. Further levels recurse on the coarse branch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .engine import ShapeError, Tape, Tensor, gradient, ops
from .optim import make_optimizer
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WinnConfig:
    channels: int = 1  # image channels C
    levels: int = 1  # L
    pairs: int = 2  # M predict/update pairs per level
    blocks: int = 1  # J residual blocks per PUNet
    width: int = 16  # PUNet feature channels
    kernel: int = 3  # depthwise kernel size

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("WINN needs at least one level")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    def to_dict(self) -> dict:
        return {"channels": self.channels, "levels": self.levels, "pairs": self.pairs,
                "blocks": self.blocks, "width": self.width, "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d: dict) -> "WinnConfig":
        return cls(**d)


# a larger lifting configuration, four pairs of two-block PUNets
LARGE_CONFIG = dict(pairs=4, blocks=2, width=32, kernel=5)


@dataclass(frozen=True)
class WinnModel:
    config: WinnConfig
    params: dict[str, Tensor] = field(repr=False)

    def replace(self, params: dict[str, Tensor]) -> "WinnModel":
        return replace(self, params=dict(params))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def coarse_shape(self, image_shape: Sequence[int]) -> tuple[int, ...]:
        *lead, c, h, w = image_shape
        f = 2 ** self.config.levels
        return (*lead, c, h // f, w // f)

    def detail_shapes(self, image_shape: Sequence[int]) -> list[tuple[int, ...]]:
        *lead, c, h, w = image_shape
        return [(*lead, 3 * c, h // 2 ** l, w // 2 ** l) for l in range(1, self.config.levels + 1)]


# ---------------------------------------------------------------- lazy split

def lazy_split(x: Tensor) -> tuple[Tensor, Tensor]:
    """Parity partition: coarse = (even, even); detail = (EO, OE, OO) stacked on channels."""
    c = x.shape[-3]
    s = ops.polyphase_split(x, 2)
    coarse, detail = ops.split(s, [c, 3 * c])
    return coarse, detail


def lazy_merge(coarse: Tensor, detail: Tensor) -> Tensor:
    if detail.shape[-3] != 3 * coarse.shape[-3] or detail.shape[:-3] != coarse.shape[:-3] \
            or detail.shape[-2:] != coarse.shape[-2:]:
        raise ShapeError(f"lazy_merge: coarse {coarse.shape} and detail {detail.shape} are inconsistent")
    return ops.polyphase_merge(ops.concat([coarse, detail]), 2)


# ------------------------------------------------------------------- PUNets

def _punet_names(prefix: str, blocks: int) -> list[str]:
    names = [f"{prefix}.in.w", f"{prefix}.in.b"]
    for j in range(blocks):
        names += [f"{prefix}.res{j}.{n}" for n in ("dw1", "pw1", "b1", "dw2", "pw2", "b2")]
    return names + [f"{prefix}.out.w", f"{prefix}.out.b"]


def punet_apply(p: dict[str, Tensor], prefix: str, x: Tensor, blocks: int) -> Tensor:
    """Input conv, ``blocks`` depthwise-separable residual blocks, output conv."""
    h = ops.leaky_relu(ops.conv2d(x, p[f"{prefix}.in.w"], p[f"{prefix}.in.b"]))
    for j in range(blocks):
        q = f"{prefix}.res{j}"
        r = ops.leaky_relu(ops.separable_conv2d(h, p[f"{q}.dw1"], p[f"{q}.pw1"], p[f"{q}.b1"]))
        r = ops.separable_conv2d(r, p[f"{q}.dw2"], p[f"{q}.pw2"], p[f"{q}.b2"])
        h = ops.add(h, r)
    return ops.conv2d(h, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])


def _punet_shapes(cin: int, cout: int, cfg: WinnConfig) -> list[tuple[int, ...]]:
    w, k = cfg.width, cfg.kernel
    shapes = [(w, cin, k, k), (w,)]
    for _ in range(cfg.blocks):
        shapes += [(w, 1, k, k), (w, w, 1, 1), (w,), (w, 1, k, k), (w, w, 1, 1), (w,)]
    return shapes + [(cout, w, k, k), (cout,)]


def parameter_layout(cfg: WinnConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.channels
    layout = {}
    for l in range(cfg.levels):
        for m in range(cfg.pairs):
            for prefix, cin, cout in ((f"L{l}.P{m}", c, 3 * c), (f"L{l}.U{m}", 3 * c, c)):
                layout.update(zip(_punet_names(prefix, cfg.blocks), _punet_shapes(cin, cout, cfg)))
    return layout


def init_winn(cfg: WinnConfig, rng: Rng | None = None, mode: str = "train", dtype=np.float32) -> WinnModel:
    """Build parameters.

    ``mode="train"``: He-initialised hidden layers, zero biases and zero
    output convs, so the untrained network is exactly the lazy wavelet.
    ``mode="random"``: every parameter ~ N(0, 0.25 / fan_in), which keeps the
    branches O(1) through several levels (used to probe invertibility).
    ``mode="zero"``: all parameters zero.
    """
    if mode not in ("train", "random", "zero"):
        raise ValueError(f"unknown init mode {mode!r}")
    params = {}
    for name, shape in parameter_layout(cfg).items():
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
        if mode == "zero" or (mode == "train" and (".out." in name or len(shape) == 1)):
            v = np.zeros(shape)
        elif mode == "random":
            v = rng.normal(shape, np.float64) * 0.5 / np.sqrt(fan_in)
        else:
            v = rng.normal(shape, np.float64) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(v, dtype=dtype)
    return WinnModel(cfg, params)


# ------------------------------------------------------- forward and inverse

def _check_divisible(x: Tensor, levels: int) -> None:
    f = 2 ** levels
    if x.ndim < 3 or x.shape[-2] % f or x.shape[-1] % f:
        raise ShapeError(f"WINN with {levels} level(s) needs H, W divisible by {f}; got {x.shape}")


def winn_forward(model: WinnModel, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Return ``(c, [d_1, ..., d_L])`` with ``d_l`` at resolution ``/2**l``."""
    cfg, p = model.config, model.params
    _check_divisible(x, cfg.levels)
    if x.shape[-3] != cfg.channels:
        raise ShapeError(f"WINN built for {cfg.channels} channel(s), input is {x.shape}")
    coarse = x
    details = []
    for l in range(cfg.levels):
        coarse, detail = lazy_split(coarse)
        for m in range(cfg.pairs):
            detail = ops.sub(detail, punet_apply(p, f"L{l}.P{m}", coarse, cfg.blocks))
            coarse = ops.add(coarse, punet_apply(p, f"L{l}.U{m}", detail, cfg.blocks))
        details.append(detail)
    return coarse, details


def winn_inverse(model: WinnModel, coarse: Tensor, details: Sequence[Tensor]) -> Tensor:
    """Rebuild the image from a coarse branch (``c`` or a measurement ``y``) and details."""
    cfg, p = model.config, model.params
    if len(details) != cfg.levels:
        raise ShapeError(f"winn_inverse: expected {cfg.levels} detail tensors, got {len(details)}")
    for l in reversed(range(cfg.levels)):
        detail = details[l]
        if detail.shape[:-3] != coarse.shape[:-3] or detail.shape[-3] != 3 * coarse.shape[-3] \
                or detail.shape[-2:] != coarse.shape[-2:]:
            raise ShapeError(f"winn_inverse: level {l + 1} detail {detail.shape} inconsistent with coarse {coarse.shape}")
        for m in reversed(range(cfg.pairs)):
            coarse = ops.sub(coarse, punet_apply(p, f"L{l}.U{m}", detail, cfg.blocks))
            detail = ops.add(detail, punet_apply(p, f"L{l}.P{m}", coarse, cfg.blocks))
        coarse = lazy_merge(coarse, detail)
    return coarse


def lazy_transform(x: Tensor, levels: int) -> tuple[Tensor, list[Tensor]]:
    """The multi-level lazy wavelet transform (a WINN with zero networks)."""
    coarse, details = x, []
    for _ in range(levels):
        coarse, d = lazy_split(coarse)
        details.append(d)
    return coarse, details


# ------------------------------------------------------------------ training

def coarse_loss(model: WinnModel, x: Tensor, y: Tensor) -> Tensor:
    """Mean over the batch of per-sample squared coarse error."""
    c, _ = winn_forward(model, x)
    return ops.scale(ops.sq_l2(ops.sub(c, y)), 1.0 / x.shape[0])


def train_winn(xs: np.ndarray, ys: np.ndarray, model: WinnModel, epochs: int, lr: float, rng: Rng,
               batch_size: int = 32, optimizer: str = "sgd") -> tuple[WinnModel, list[float]]:
    """Regress the coarse branch onto the measurements.

    ``xs`` is ``(N, C, H, W)``, ``ys`` is ``(N, C, H/2**L, W/2**L)``; the
    detail branch is left unconstrained. Returns the model and per-epoch mean
    loss (mean over samples of the squared coarse error).
    """
    xs = np.asarray(xs).astype(model.params[next(iter(model.params))].dtype)
    ys = np.asarray(ys).astype(xs.dtype)
    expected = model.coarse_shape(xs.shape)
    if ys.shape != expected:
        raise ShapeError(f"train_winn: measurements {ys.shape} do not match coarse output {expected}")
    opt = make_optimizer(optimizer, lr)
    names = list(model.params)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(xs))
        total = 0.0
        for start in range(0, len(xs), batch_size):
            idx = order[start:start + batch_size]
            leaves = {k: v.watch() for k, v in model.params.items()}
            with Tape() as tape:
                loss = coarse_loss(model.replace(leaves), Tensor._wrap(xs[idx]), Tensor._wrap(ys[idx]))
            grads = gradient(tape, loss, [leaves[k] for k in names])
            model = model.replace(opt.step(model.params, {k: grads[leaves[k]].data for k in names}))
            total += loss.item() * len(idx)
        trace.append(total / len(xs))
        log.info("winn epoch %d loss %.6f", epoch, trace[-1])
    return model, trace


def evaluate_coarse_mse(model: WinnModel, xs: np.ndarray, ys: np.ndarray) -> float:
    """Mean over samples of the squared coarse error, without training."""
    c, _ = winn_forward(model, Tensor._wrap(np.asarray(xs, dtype=model.params["L0.P0.in.w"].dtype)))
    return float(np.sum((c.data - ys) ** 2) / len(xs))
