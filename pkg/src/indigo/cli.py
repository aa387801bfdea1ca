"""Command-line entry point: ``indigo <subcommand> --config run.json [--seed S] [--out DIR]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .degrade import apply_degradation, generate_image, nearest_upsample, psnr
from .denoiser import DenoiserConfig, init_denoiser, train_denoiser
from .diffusion import build_linear_schedule, unconditional_sample
from .engine import NonFiniteError, Tensor
from .gradcheck import format_results, run_gradcheck
from .guided import GuidanceConfig, chain_rngs, consistency_residual, indigo_sample
from .rng import Rng
from .winn import WinnConfig, init_winn, train_winn

log = logging.getLogger("indigo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("gen-data", "train-denoiser", "train-winn", "sample", "solve", "eval", "gradcheck")


class NumericalFailure(RuntimeError):
    pass


def _out(cfg: io.RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _need(cfg: io.RunConfig, key: str) -> str:
    v = getattr(cfg, key)
    if not v:
        raise io.ConfigError(f"this command needs '{key}' in the config")
    return v


def _schedule(cfg: io.RunConfig):
    return build_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _load_stack(directory: Path) -> tuple[list[str], np.ndarray]:
    files = sorted(directory.glob("*.tnsr"))
    if not files:
        raise FileNotFoundError(f"no .tnsr files in {directory}")
    return [f.stem for f in files], np.stack([io.load_tensor(f).data for f in files])


def _save_stack(directory: Path, names, arrays, pgm: bool = True) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, a in zip(names, arrays):
        io.save_tensor(directory / f"{name}.tnsr", np.ascontiguousarray(a))
        if pgm:
            io.save_pgm(directory / f"{name}.pgm", np.clip(a, 0, 1))


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: io.RunConfig) -> None:
    """Images, measurements and the generating spec under ``output_dir``."""
    out = _out(cfg)
    spec = cfg.dataset
    rng = Rng(cfg.seed, key=(1,))
    names = [f"{i:05d}" for i in range(spec.count)]
    xs = [generate_image(spec, i) for i in range(spec.count)]
    ys = [apply_degradation(cfg.degradation, Tensor(x), rng).data for x in xs]
    _save_stack(out / "images", names, xs)
    _save_stack(out / "measurements", names, ys)
    meta = {"dataset": spec.to_dict(), "degradation": cfg.degradation.to_dict(), "seed": cfg.seed}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2))


def cmd_train_denoiser(cfg: io.RunConfig) -> None:
    data_dir = Path(_need(cfg, "data_dir"))
    _, xs = _load_stack(data_dir / "images")
    d = cfg.denoiser
    s = _schedule(cfg)
    model = init_denoiser(DenoiserConfig(image_shape=tuple(xs.shape[1:]), base_channels=d.base_channels,
                                         emb_dim=d.emb_dim, blocks=d.blocks, T=s.T), Rng(cfg.seed, key=(2,)))
    model, trace = train_denoiser(xs, model, s, d.epochs, d.lr, Rng(cfg.seed, key=(3,)), d.batch_size, d.optimizer)
    out = _out(cfg)
    io.save_denoiser(out / "denoiser", model, vars(cfg.schedule))
    (out / "denoiser_trace.json").write_text(json.dumps({"loss": trace}))


def cmd_train_winn(cfg: io.RunConfig) -> None:
    data_dir = Path(_need(cfg, "data_dir"))
    _, xs = _load_stack(data_dir / "images")
    _, ys = _load_stack(data_dir / "measurements")
    w = cfg.winn
    levels = cfg.degradation.levels
    wcfg = WinnConfig(channels=xs.shape[1], levels=levels, pairs=w.pairs, blocks=w.blocks,
                      width=w.width, kernel=w.kernel)
    model = init_winn(wcfg, Rng(cfg.seed, key=(4,)))
    model, trace = train_winn(xs, ys, model, w.epochs, w.lr, Rng(cfg.seed, key=(5,)), w.batch_size, w.optimizer)
    out = _out(cfg)
    io.save_winn(out / "winn", model)
    (out / "winn_trace.json").write_text(json.dumps({"loss": trace}))


def _denoiser_and_schedule(cfg: io.RunConfig):
    model, sched = io.load_denoiser(_need(cfg, "denoiser_checkpoint"))
    if sched is None:
        sched = vars(cfg.schedule)
    s = build_linear_schedule(sched["T"], sched["beta_start"], sched["beta_end"])
    return model, s


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(n, start + size)


def cmd_sample(cfg: io.RunConfig) -> None:
    """Unconditional samples; batch ``b`` uses per-image streams ``seed ^ index``."""
    model, s = _denoiser_and_schedule(cfg)
    shape = tuple(model.config.image_shape)
    rngs = chain_rngs(cfg.seed, (cfg.num_samples,) + shape)
    outs = []
    for a, b in _batches(cfg.num_samples, cfg.batch_size):
        outs.append(unconditional_sample(model, s, rngs[a:b], (b - a,) + shape).data)
    names = [f"{i:05d}" for i in range(cfg.num_samples)]
    _save_stack(_out(cfg) / "samples", names, np.concatenate(outs))


def cmd_solve(cfg: io.RunConfig) -> None:
    """INDigo over every measurement in ``data_dir``; writes reconstructions and metrics.json."""
    data_dir = Path(_need(cfg, "data_dir"))
    model, s = _denoiser_and_schedule(cfg)
    winn = io.load_winn(_need(cfg, "winn_checkpoint"))
    names, ys = _load_stack(data_dir / "measurements")
    truth = None
    if (data_dir / "images").is_dir():
        tnames, truth = _load_stack(data_dir / "images")
        if tnames != names:
            raise io.FormatError(data_dir / "images", 0, "image and measurement names differ")
    shape = tuple(model.config.image_shape)
    gcfg = GuidanceConfig(zeta=cfg.zeta, T=s.T, seed=cfg.seed, record_trace=bool(cfg.trace_steps),
                          trace_steps=tuple(cfg.trace_steps))
    rngs = chain_rngs(cfg.seed, (len(ys),) + shape)
    outs, traces = [], []
    for a, b in _batches(len(ys), cfg.batch_size):
        x, trace = indigo_sample(ys[a:b], model, winn, s, gcfg, shape, rng=rngs[a:b])
        outs.append(x.data)
        traces.append(trace)
    recon = np.concatenate(outs)
    out = _out(cfg)
    _save_stack(out / "recon", names, recon)
    cons = np.atleast_1d(consistency_residual(recon, ys, winn))
    per = []
    for i, name in enumerate(names):
        p = psnr(recon[i], truth[i]) if truth is not None else None
        per.append({"name": name, "psnr_db": p, "consistency": float(cons[i])})
    metrics = {
        "per_image": per,
        "mean_psnr_db": float(np.mean([r["psnr_db"] for r in per])) if truth is not None else None,
        "mean_consistency": float(np.mean(cons)),
    }
    if truth is not None:
        k = truth.shape[-1] // ys.shape[-1]
        metrics["mean_psnr_nearest_db"] = float(np.mean([psnr(nearest_upsample(y, k), x) for y, x in zip(ys, truth)]))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    if gcfg.record_trace:
        tdir = out / "trace"
        tdir.mkdir(exist_ok=True)
        for t in gcfg.snapshot_steps():
            for prefix, attr in (("x0t", "x0"), ("ct", "coarse"), ("xhat", "xhat")):
                arr = np.concatenate([getattr(tr, attr)[t] for tr in traces])
                io.save_tensor(tdir / f"{prefix}_{t}.tnsr", arr)


def cmd_eval(cfg: io.RunConfig) -> None:
    """PSNR between same-named tensors of two directories, written to ``eval.json``."""
    if len(cfg.compare) != 2:
        raise io.ConfigError("eval needs 'compare': [dir_a, dir_b]")
    a_dir, b_dir = (Path(p) for p in cfg.compare)
    a_names = {f.stem for f in a_dir.glob("*.tnsr")}
    b_names = {f.stem for f in b_dir.glob("*.tnsr")}
    common = sorted(a_names & b_names)
    if not common:
        raise FileNotFoundError(f"no tensors with matching names in {a_dir} and {b_dir}")
    per = []
    for name in common:
        a = io.load_tensor(a_dir / f"{name}.tnsr").data
        b = io.load_tensor(b_dir / f"{name}.tnsr").data
        per.append({"name": name, "psnr_db": psnr(a, b), "identical": bool(np.array_equal(a, b))})
    result = {"per_image": per, "mean_psnr_db": float(np.mean([r["psnr_db"] for r in per])),
              "all_identical": all(r["identical"] for r in per),
              "only_in_a": sorted(a_names - b_names), "only_in_b": sorted(b_names - a_names)}
    (_out(cfg) / "eval.json").write_text(json.dumps(result, indent=2))
    print(f"{len(per)} pairs, mean PSNR {result['mean_psnr_db']:.2f} dB, identical={result['all_identical']}")


def cmd_gradcheck(cfg: io.RunConfig) -> None:
    results = run_gradcheck(cfg.seed)
    print(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalFailure(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-denoiser": cmd_train_denoiser,
    "train-winn": cmd_train_winn,
    "sample": cmd_sample,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="indigo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config JSON (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = io.load_config(args.config) if args.config else io.RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, output_dir=args.out)
        if args.command != "gradcheck":
            io.write_config(_out(cfg) / "config.json", cfg)
        HANDLERS[args.command](cfg)
    except io.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, NonFiniteError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, io.FormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # invalid values that only surface when the config meets the data (shapes, kernel sizes, ...)
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())
