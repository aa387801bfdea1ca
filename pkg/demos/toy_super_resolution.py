"""End-to-end 2x super-resolution through the command-line interface.

    python demos/toy_super_resolution.py [workdir] [--quick]

Generates the synthetic shapes data, trains the denoiser and the WINN, then
runs INDigo on held-out measurements and prints the metrics. ``--quick``
shrinks everything so the pipeline finishes in about a minute (the numbers are
then meaningless); the full run takes several minutes on one core.
"""

import json
import sys
from pathlib import Path

from indigo.cli import run_command

args = [a for a in sys.argv[1:] if not a.startswith("--")]
quick = "--quick" in sys.argv
work = Path(args[0] if args else "indigo_demo")
work.mkdir(parents=True, exist_ok=True)

base = {
    "degradation": {"kind": "box_downsample", "k": 2, "noise_sigma": 0.0},
    "schedule": {"T": 50 if quick else 200},
    "denoiser": {"epochs": 2 if quick else 40, "base_channels": 8 if quick else 32},
    "winn": {"epochs": 2 if quick else 50},
    "zeta": 0.5,
    "seed": 7,
    "denoiser_checkpoint": str(work / "models" / "denoiser"),
    "winn_checkpoint": str(work / "models" / "winn"),
}


def config(name, **over):
    cfg = dict(base, **over)
    path = work / f"{name}.json"
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


train = config("train", dataset={"count": 64 if quick else 512, "size": [1, 16, 16], "seed": 0},
               data_dir=str(work / "train"))
test = config("test", dataset={"count": 8 if quick else 20, "size": [1, 16, 16], "seed": 99},
              data_dir=str(work / "test"), trace_steps=[25 if quick else 100])

steps = [
    ["gen-data", "--config", train, "--out", str(work / "train")],
    ["gen-data", "--config", test, "--out", str(work / "test")],
    ["train-denoiser", "--config", train, "--out", str(work / "models"), "-v"],
    ["train-winn", "--config", train, "--out", str(work / "models"), "-v"],
    ["solve", "--config", test, "--out", str(work / "solve")],
]
for argv in steps:
    print("indigo", " ".join(argv))
    code = run_command(argv)
    if code:
        sys.exit(code)

m = json.loads((work / "solve" / "metrics.json").read_text())
print(f"mean PSNR {m['mean_psnr_db']:.2f} dB (nearest upsampling {m['mean_psnr_nearest_db']:.2f} dB), "
      f"mean consistency residual {m['mean_consistency']:.4f}")
print(f"reconstructions in {work / 'solve' / 'recon'}, trace snapshots in {work / 'solve' / 'trace'}")
