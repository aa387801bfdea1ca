import json
import subprocess
import sys

import numpy as np
import pytest

from indigo import io
from indigo.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, run_command
from indigo.denoiser import DenoiserConfig, init_denoiser
from indigo.engine import Tensor
from indigo.rng import Rng
from indigo.winn import WinnConfig, init_winn


# -------------------------------------------------------------- tensor files

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(), (3,), (2, 1, 4, 5)])
def test_tensor_round_trip(tmp_path, rng, dtype, shape):
    a = rng.normal(shape, np.float64).astype(dtype)
    io.save_tensor(tmp_path / "a.tnsr", a)
    b = io.load_tensor(tmp_path / "a.tnsr")
    assert b.dtype == dtype and b.shape == shape and b.data.tobytes() == a.tobytes()


def test_header_layout():
    buf = io.encode_tensor(np.zeros((2, 3), np.float32))
    assert buf[:4] == b"TNSR" and buf[4] == 1 and buf[5] == 1 and buf[6] == 2 and buf[7] == 0
    assert int.from_bytes(buf[8:16], "little") == 2 and int.from_bytes(buf[16:24], "little") == 3
    assert len(buf) == 24 + 6 * 4


def test_truncated_payload_reports_lengths(tmp_path):
    buf = io.encode_tensor(np.zeros((4, 4), np.float64))
    (tmp_path / "t.tnsr").write_bytes(buf[:-3])
    with pytest.raises(io.FormatError) as err:
        io.load_tensor(tmp_path / "t.tnsr")
    msg = str(err.value)
    assert "t.tnsr" in msg and str(len(buf)) in msg and str(len(buf) - 3) in msg


@pytest.mark.parametrize("offset,value,where", [(0, ord("X"), 0), (4, 9, 4), (5, 7, 5), (7, 1, 7)])
def test_corrupt_header_fields(offset, value, where):
    buf = bytearray(io.encode_tensor(np.zeros(2, np.float32)))
    buf[offset] = value
    with pytest.raises(io.FormatError) as err:
        io.decode_tensor(bytes(buf))
    assert err.value.offset == where


def test_short_header_rejected():
    with pytest.raises(io.FormatError):
        io.decode_tensor(b"TNS")


def test_pgm_export(tmp_path):
    io.save_pgm(tmp_path / "a.pgm", np.array([[[0.0, 1.0], [0.5, 2.0]]]))
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n") and list(raw[-4:]) == [0, 255, 128, 255]


# ---------------------------------------------------------------- checkpoints

def test_denoiser_checkpoint_reloads_bitwise(tmp_path, rng):
    m = init_denoiser(DenoiserConfig((1, 8, 8), 4, 8, 1, 10), rng)
    m = m.replace({k: Tensor(v.data + rng.normal(v.shape)) for k, v in m.params.items()})
    io.save_denoiser(tmp_path / "d", m, {"T": 10, "beta_start": 1e-4, "beta_end": 0.02})
    back, sched = io.load_denoiser(tmp_path / "d")
    assert back.config == m.config and sched["T"] == 10
    x = Tensor(rng.normal((2, 1, 8, 8)))
    assert back(x, 4).data.tobytes() == m(x, 4).data.tobytes()
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["kind"] == "denoiser" and manifest["architecture"]["base_channels"] == 4


def test_winn_checkpoint_reloads_bitwise(tmp_path, rng):
    w = init_winn(WinnConfig(levels=2, width=4), rng, mode="random")
    io.save_winn(tmp_path / "w", w)
    back = io.load_winn(tmp_path / "w")
    assert back.config == w.config
    assert all(back.params[k].data.tobytes() == v.data.tobytes() for k, v in w.params.items())
    with pytest.raises(io.FormatError):
        io.load_denoiser(tmp_path / "w")


def test_manifest_shape_mismatch_detected(tmp_path, rng):
    w = init_winn(WinnConfig(width=4), rng)
    io.save_winn(tmp_path / "w", w)
    name = next(iter(w.params))
    io.save_tensor(tmp_path / "w" / f"{name}.tnsr", np.zeros(3, np.float32))
    with pytest.raises(io.FormatError):
        io.load_winn(tmp_path / "w")


# --------------------------------------------------------------------- config

def test_defaults_round_trip(tmp_path):
    cfg = io.RunConfig()
    io.write_config(tmp_path / "c.json", cfg)
    assert io.load_config(tmp_path / "c.json") == cfg
    assert (cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end) == (200, 1e-4, 0.02)


@pytest.mark.parametrize("data,key", [({"zeta": 0.5, "zetta": 1}, "zetta"),
                                      ({"winn": {"pairs": 2, "width2": 3}}, "winn.width2"),
                                      ({"schedule": {"beta": 1}}, "schedule.beta")])
def test_unknown_keys_named(data, key):
    with pytest.raises(io.ConfigError, match=f"unknown key {key}"):
        io.parse_config(data)


def test_invalid_values_are_config_errors():
    with pytest.raises(io.ConfigError):
        io.parse_config({"degradation": {"k": 3}})
    with pytest.raises(io.ConfigError):
        io.parse_config({"schedule": 5})


# ------------------------------------------------------------------------ cli

def _tiny_config(tmp_path, **over):
    cfg = {
        "dataset": {"count": 4, "size": [1, 8, 8], "seed": 0},
        "degradation": {"kind": "box_downsample", "k": 2},
        "schedule": {"T": 10},
        "denoiser": {"base_channels": 4, "emb_dim": 8, "epochs": 1, "batch_size": 2},
        "winn": {"width": 4, "epochs": 1, "batch_size": 2},
        "seed": 3,
        "num_samples": 4,
        "batch_size": 3,
        "data_dir": str(tmp_path / "data"),
        "denoiser_checkpoint": str(tmp_path / "models" / "denoiser"),
        "winn_checkpoint": str(tmp_path / "models" / "winn"),
    }
    cfg.update(over)
    path = tmp_path / f"run{len(list(tmp_path.glob('run*.json')))}.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    c = _tiny_config(tmp)
    assert run_command(["gen-data", "--config", c, "--out", str(tmp / "data")]) == EXIT_OK
    assert run_command(["train-denoiser", "--config", c, "--out", str(tmp / "models")]) == EXIT_OK
    assert run_command(["train-winn", "--config", c, "--out", str(tmp / "models")]) == EXIT_OK
    return tmp


def test_generated_data_layout(pipeline):
    d = pipeline / "data"
    assert sorted(p.name for p in (d / "images").glob("*.tnsr")) == [f"0000{i}.tnsr" for i in range(4)]
    assert io.load_tensor(d / "measurements" / "00000.tnsr").shape == (1, 4, 4)
    assert (d / "images" / "00000.pgm").exists()
    meta = json.loads((d / "dataset.json").read_text())
    assert meta["dataset"]["count"] == 4
    assert json.loads((d / "config.json").read_text())["seed"] == 3


def test_training_writes_traces(pipeline):
    assert len(json.loads((pipeline / "models" / "denoiser_trace.json").read_text())["loss"]) == 1
    assert len(json.loads((pipeline / "models" / "winn_trace.json").read_text())["loss"]) == 1


def test_zero_zeta_solve_equals_sample(pipeline):
    c = _tiny_config(pipeline, zeta=0.0)
    assert run_command(["sample", "--config", c, "--out", str(pipeline / "s")]) == EXIT_OK
    assert run_command(["solve", "--config", c, "--out", str(pipeline / "r")]) == EXIT_OK
    for i in range(4):
        a = io.load_tensor(pipeline / "s" / "samples" / f"0000{i}.tnsr").data
        b = io.load_tensor(pipeline / "r" / "recon" / f"0000{i}.tnsr").data
        assert a.tobytes() == b.tobytes()
    c2 = _tiny_config(pipeline, compare=[str(pipeline / "s" / "samples"), str(pipeline / "r" / "recon")])
    assert run_command(["eval", "--config", c2, "--out", str(pipeline / "e")]) == EXIT_OK
    assert json.loads((pipeline / "e" / "eval.json").read_text())["all_identical"]


def test_solve_is_reproducible_and_reports_metrics(pipeline):
    c = _tiny_config(pipeline, trace_steps=[5, 2])
    outs = []
    for name in ("a", "b"):
        assert run_command(["solve", "--config", c, "--out", str(pipeline / name)]) == EXIT_OK
        outs.append(json.loads((pipeline / name / "metrics.json").read_text()))
    assert outs[0] == outs[1]
    m = outs[0]
    assert len(m["per_image"]) == 4
    assert m["mean_psnr_db"] == pytest.approx(np.mean([r["psnr_db"] for r in m["per_image"]]))
    assert m["mean_consistency"] == pytest.approx(np.mean([r["consistency"] for r in m["per_image"]]))
    for t in (5, 2):
        assert io.load_tensor(pipeline / "a" / "trace" / f"x0t_{t}.tnsr").shape == (4, 1, 8, 8)
        assert io.load_tensor(pipeline / "a" / "trace" / f"ct_{t}.tnsr").shape == (4, 1, 4, 4)
        assert io.load_tensor(pipeline / "a" / "trace" / f"xhat_{t}.tnsr").shape == (4, 1, 8, 8)


def test_seed_override_changes_samples(pipeline):
    c = _tiny_config(pipeline)
    run_command(["sample", "--config", c, "--out", str(pipeline / "x1")])
    run_command(["sample", "--config", c, "--seed", "4", "--out", str(pipeline / "x2")])
    a = io.load_tensor(pipeline / "x1" / "samples" / "00000.tnsr").data
    b = io.load_tensor(pipeline / "x2" / "samples" / "00000.tnsr").data
    assert not np.array_equal(a, b)


def test_missing_inputs_are_io_errors(tmp_path):
    c = _tiny_config(tmp_path)
    assert run_command(["solve", "--config", c, "--out", str(tmp_path / "o")]) == EXIT_IO


def test_unknown_config_key_exits_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"zeta": 0.5, "bogus": 1}))
    r = subprocess.run([sys.executable, "-m", "indigo", "sample", "--config", str(bad)],
                       capture_output=True, text=True, cwd=tmp_path)
    assert r.returncode == EXIT_CONFIG
    assert "unknown key bogus" in r.stderr


def test_invalid_json_exits_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run_command(["sample", "--config", str(bad)]) == EXIT_CONFIG


@pytest.mark.slow
def test_gradcheck_command_exits_0(capsys):
    assert run_command(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "guidance:network_denoiser/x_t" in out
