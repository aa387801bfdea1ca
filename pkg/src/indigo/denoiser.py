"""A small convolutional noise predictor with sinusoidal time embedding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import NoiseSchedule, ddpm_loss
from .engine import NonFiniteError, ShapeError, Tape, Tensor, gradient, ops
from .optim import make_optimizer
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    image_shape: tuple[int, int, int] = (1, 16, 16)
    base_channels: int = 32
    emb_dim: int = 32
    blocks: int = 1  # residual blocks per resolution
    T: int = 200

    def to_dict(self) -> dict:
        return {"image_shape": list(self.image_shape), "base_channels": self.base_channels,
                "emb_dim": self.emb_dim, "blocks": self.blocks, "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(image_shape=tuple(d["image_shape"]), base_channels=d["base_channels"],
                   emb_dim=d["emb_dim"], blocks=d["blocks"], T=d["T"])


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass(frozen=True)
class DenoiserModel:
    """Encoder-decoder over two resolutions.

    Calling the model is ``eps_apply``: ``model(x_t, t)`` returns the predicted
    noise with the shape of ``x_t``.
    """

    config: DenoiserConfig
    params: dict[str, Tensor] = field(repr=False)

    def replace(self, params: dict[str, Tensor]) -> "DenoiserModel":
        return replace(self, params=dict(params))

    def __call__(self, x_t: Tensor, t) -> Tensor:
        return eps_apply(self, x_t, t)

    @property
    def dtype(self):
        return self.params["in.w"].dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def _res_names(prefix: str) -> list[str]:
    return [f"{prefix}.w1", f"{prefix}.b1", f"{prefix}.wt", f"{prefix}.bt", f"{prefix}.w2", f"{prefix}.b2"]


def block_prefixes(cfg: DenoiserConfig) -> list[str]:
    return ([f"enc{i}" for i in range(cfg.blocks)] + [f"mid{i}" for i in range(cfg.blocks)]
            + [f"dec{i}" for i in range(cfg.blocks)])


def init_denoiser(cfg: DenoiserConfig, rng: Rng, dtype=np.float32) -> DenoiserModel:
    c_img = cfg.image_shape[0]
    c, c2, e = cfg.base_channels, 2 * cfg.base_channels, cfg.emb_dim
    p: dict[str, np.ndarray] = {}

    def he(shape, gain=1.0):
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(shape, np.float64) * gain * np.sqrt(2.0 / fan_in)

    def res(prefix, ch):
        p[f"{prefix}.w1"] = he((ch, ch, 3, 3))
        p[f"{prefix}.b1"] = np.zeros(ch)
        p[f"{prefix}.wt"] = rng.normal((e, ch), np.float64) * np.sqrt(1.0 / e)
        p[f"{prefix}.bt"] = np.zeros(ch)
        p[f"{prefix}.w2"] = he((ch, ch, 3, 3), 0.1)
        p[f"{prefix}.b2"] = np.zeros(ch)

    p["temb.w"] = rng.normal((e, e), np.float64) * np.sqrt(1.0 / e)
    p["temb.b"] = np.zeros(e)
    p["in.w"] = he((c, c_img, 3, 3))
    p["in.b"] = np.zeros(c)
    for i in range(cfg.blocks):
        res(f"enc{i}", c)
    p["down.w"] = he((c2, c, 3, 3))
    p["down.b"] = np.zeros(c2)
    for i in range(cfg.blocks):
        res(f"mid{i}", c2)
    p["up.w"] = he((c, c2, 3, 3))
    p["up.b"] = np.zeros(c)
    p["skip.w"] = he((c, 2 * c, 1, 1))
    p["skip.b"] = np.zeros(c)
    for i in range(cfg.blocks):
        res(f"dec{i}", c)
    p["out.w"] = np.zeros((c_img, c, 3, 3))
    p["out.b"] = np.zeros(c_img)
    return DenoiserModel(cfg, {k: Tensor(v, dtype=dtype) for k, v in p.items()})


def _res_block(p, prefix: str, h: Tensor, temb: Tensor) -> Tensor:
    r = ops.conv2d(ops.silu(h), p[f"{prefix}.w1"], p[f"{prefix}.b1"])
    r = ops.channel_add(r, ops.bias_add(ops.matmul(temb, p[f"{prefix}.wt"]), p[f"{prefix}.bt"]))
    r = ops.conv2d(ops.silu(r), p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return ops.add(h, r)


def eps_apply(model: DenoiserModel, x_t: Tensor, t) -> Tensor:
    """Predicted noise for ``x_t`` of shape ``(C,H,W)`` or ``(N,C,H,W)``."""
    cfg, p = model.config, model.params
    squeeze = x_t.ndim == 3
    x = ops.reshape(x_t, (1,) + x_t.shape) if squeeze else x_t
    if x.ndim != 4 or x.shape[1:] != tuple(cfg.image_shape):
        raise ShapeError(f"eps_apply: input {x_t.shape} does not match image shape {cfg.image_shape}")
    n = x.shape[0]
    t_arr = np.full(n, int(t)) if np.ndim(t) == 0 else np.asarray(t)
    if t_arr.shape != (n,) or t_arr.min() < 1 or t_arr.max() > cfg.T:
        raise ValueError(f"eps_apply: step(s) {t} outside 1..{cfg.T} or not matching batch {n}")
    emb = Tensor._wrap(timestep_embedding(t_arr, cfg.emb_dim).astype(model.dtype))
    temb = ops.silu(ops.bias_add(ops.matmul(emb, p["temb.w"]), p["temb.b"]))

    h = ops.conv2d(x, p["in.w"], p["in.b"])
    for i in range(cfg.blocks):
        h = _res_block(p, f"enc{i}", h, temb)
    skip = h
    h = ops.conv2d(h, p["down.w"], p["down.b"], stride=2, padding=1)
    for i in range(cfg.blocks):
        h = _res_block(p, f"mid{i}", h, temb)
    h = ops.conv2d(ops.upsample_nearest(h, 2), p["up.w"], p["up.b"])
    h = ops.conv2d(ops.concat([h, skip], axis=1), p["skip.w"], p["skip.b"], padding=0)
    for i in range(cfg.blocks):
        h = _res_block(p, f"dec{i}", h, temb)
    out = ops.conv2d(ops.silu(h), p["out.w"], p["out.b"])
    return ops.reshape(out, x_t.shape) if squeeze else out


class TrainingError(NonFiniteError):
    def __init__(self, epoch: int, step: int, message: str):
        super().__init__(f"epoch {epoch}, step {step}: {message}")
        self.epoch = epoch
        self.step = step


def train_denoiser(dataset: np.ndarray, model: DenoiserModel, s: NoiseSchedule, epochs: int, lr: float,
                   rng: Rng, batch_size: int = 32, optimizer: str = "sgd") -> tuple[DenoiserModel, list[float]]:
    """Fit the noise predictor on images in [0, 1] of shape ``(N, C, H, W)``.

    Each minibatch draws one step per image uniformly from ``1..T`` and
    minimises the per-element mean of the squared noise error. Returns the
    updated model and the per-epoch mean loss.
    """
    data = np.asarray(dataset)
    if data.min() < 0 or data.max() > 1:
        raise ValueError("train_denoiser: dataset values must lie in [0, 1]")
    if s.T != model.config.T:
        raise ValueError(f"schedule T={s.T} does not match model T={model.config.T}")
    data = (2.0 * data - 1.0).astype(model.dtype)
    opt = make_optimizer(optimizer, lr)
    names = list(model.params)
    trace = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            x0 = Tensor._wrap(data[idx])
            t = rng.integers(1, s.T + 1, len(idx))
            eps = Tensor._wrap(rng.normal(x0.shape, model.dtype))
            leaves = {k: v.watch() for k, v in model.params.items()}
            m = model.replace(leaves)
            try:
                with Tape() as tape:
                    loss = ops.scale(ddpm_loss(x0, t, eps, m, s), 1.0 / x0.size)
            except NonFiniteError as e:
                raise TrainingError(epoch, step, str(e)) from e
            grads = gradient(tape, loss, [leaves[k] for k in names])
            model = model.replace(opt.step(model.params, {k: grads[leaves[k]].data for k in names}))
            losses.append(loss.item())
            step += 1
        trace.append(float(np.mean(losses)))
        log.info("denoiser epoch %d loss %.5f", epoch, trace[-1])
    return model, trace
