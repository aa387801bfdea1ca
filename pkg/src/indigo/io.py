"""Tensor files, checkpoints, PGM export and strict run configs."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .degrade import DatasetSpec, DegradationOp
from .denoiser import DenoiserConfig, DenoiserModel
from .engine import Tensor
from .winn import WinnConfig, WinnModel

MAGIC = b"TNSR"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_HEADER = struct.Struct("<4sBBBB")


class FormatError(ValueError):
    """A tensor file or manifest does not follow the on-disk format."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.offset = offset


class ConfigError(ValueError):
    pass


# -------------------------------------------------------------- tensor files

def encode_tensor(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise TypeError(f"cannot serialise dtype {arr.dtype}")
    head = _HEADER.pack(MAGIC, VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()


def decode_tensor(buf: bytes, path="<bytes>") -> Tensor:
    if len(buf) < _HEADER.size:
        raise FormatError(path, len(buf), f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, version, code, ndim, pad = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(path, 5, f"unknown dtype code {code}")
    if pad != 0:
        raise FormatError(path, 7, f"pad byte must be 0, got {pad}")
    dims_end = _HEADER.size + 8 * ndim
    if len(buf) < dims_end:
        raise FormatError(path, len(buf), f"truncated extents: expected {dims_end} bytes of header, got {len(buf)}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, _HEADER.size)
    dtype = _DTYPE_CODES[code]
    expected = dims_end + dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(buf) != expected:
        raise FormatError(path, min(len(buf), expected),
                          f"payload length mismatch: expected file length {expected} bytes, got {len(buf)}")
    arr = np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


def save_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> Tensor:
    return decode_tensor(Path(path).read_bytes(), path)


def save_pgm(path, img) -> None:
    """Binary P5 greyscale export of a ``(1, H, W)`` or ``(H, W)`` image in [0, 1]."""
    a = np.asarray(img.data if isinstance(img, Tensor) else img)
    if a.ndim == 3:
        a = a.mean(axis=0)
    a = np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + a.tobytes())


# --------------------------------------------------------------- checkpoints

def save_checkpoint(directory, kind: str, architecture: dict, params: dict[str, Tensor],
                    schedule: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in params.items():
        fname = f"{name}.tnsr"
        save_tensor(d / fname, p)
        entries.append({"name": name, "file": fname, "shape": list(p.shape), "dtype": str(p.dtype)})
    manifest = {"kind": kind, "architecture": architecture, "schedule": schedule, "tensors": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(directory) -> tuple[dict, dict[str, Tensor]]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    params = {}
    for e in manifest["tensors"]:
        t = load_tensor(d / e["file"])
        if list(t.shape) != list(e["shape"]):
            raise FormatError(d / e["file"], 0, f"shape {t.shape} disagrees with manifest {e['shape']}")
        params[e["name"]] = t
    return manifest, params


def save_denoiser(directory, model: DenoiserModel, schedule: dict | None = None) -> None:
    save_checkpoint(directory, "denoiser", model.config.to_dict(), model.params, schedule)


def load_denoiser(directory) -> tuple[DenoiserModel, dict | None]:
    manifest, params = load_checkpoint(directory)
    if manifest["kind"] != "denoiser":
        raise FormatError(Path(directory) / "manifest.json", 0, f"expected a denoiser, found {manifest['kind']!r}")
    return DenoiserModel(DenoiserConfig.from_dict(manifest["architecture"]), params), manifest["schedule"]


def save_winn(directory, model: WinnModel) -> None:
    save_checkpoint(directory, "winn", model.config.to_dict(), model.params)


def load_winn(directory) -> WinnModel:
    manifest, params = load_checkpoint(directory)
    if manifest["kind"] != "winn":
        raise FormatError(Path(directory) / "manifest.json", 0, f"expected a winn, found {manifest['kind']!r}")
    return WinnModel(WinnConfig.from_dict(manifest["architecture"]), params)


# ---------------------------------------------------------------- run config

@dataclass
class ScheduleSection:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class DenoiserSection:
    base_channels: int = 32
    emb_dim: int = 32
    blocks: int = 1
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 32
    optimizer: str = "adam"


@dataclass
class WinnSection:
    pairs: int = 2
    blocks: int = 1
    width: int = 16
    kernel: int = 3
    epochs: int = 50
    lr: float = 2e-3
    batch_size: int = 32
    optimizer: str = "adam"


@dataclass
class RunConfig:
    task: str = "toy-sr"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    degradation: DegradationOp = field(default_factory=DegradationOp)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    winn: WinnSection = field(default_factory=WinnSection)
    zeta: float = 0.5
    seed: int = 0
    output_dir: str = "out"
    data_dir: str | None = None
    denoiser_checkpoint: str | None = None
    winn_checkpoint: str | None = None
    num_samples: int = 16
    batch_size: int = 32
    trace_steps: list[int] = field(default_factory=list)
    compare: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        return d


_SECTIONS = {"dataset": DatasetSpec, "degradation": DegradationOp, "schedule": ScheduleSection,
             "denoiser": DenoiserSection, "winn": WinnSection}


def _strict(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")
    return data


def parse_config(data: dict) -> RunConfig:
    """Build a :class:`RunConfig`, rejecting unknown keys at every level."""
    _strict(RunConfig, data, "")
    kwargs = {}
    for k, v in data.items():
        if k in _SECTIONS:
            sec = _SECTIONS[k]
            _strict(sec, v, k)
            try:
                if sec is DatasetSpec:
                    base = DatasetSpec().to_dict()
                    base.update(v)
                    kwargs[k] = DatasetSpec.from_dict(base)
                else:
                    kwargs[k] = sec(**v)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{k}: {e}") from e
        else:
            kwargs[k] = v
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return parse_config(data)


def write_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
