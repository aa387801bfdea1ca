import numpy as np
import pytest

from indigo.degrade import DegradationOp, degradation_operator
from indigo.denoiser import DenoiserConfig, init_denoiser
from indigo.diffusion import SamplingError, build_linear_schedule, ddpm_step, to_unit, unconditional_sample
from indigo.engine import ShapeError, Tape, Tensor, gradient, ops
from indigo.gradcheck import AffineDenoiser, _guidance_program, _randomise, check_baseline, check_guidance, check_program
from indigo.guided import (GuidanceConfig, baseline_measurement_step, baseline_sample, chain_rngs, consistency_residual,
                           guidance_loss, indigo_sample, indigo_step)
from indigo.rng import Rng
from indigo.winn import WinnConfig, coarse_loss, init_winn, winn_forward, winn_inverse

S10 = build_linear_schedule(10)


def small_denoiser(rng, T=10, dtype=np.float32):
    cfg = DenoiserConfig(image_shape=(1, 8, 8), base_channels=4, emb_dim=8, blocks=1, T=T)
    den = init_denoiser(cfg, rng, dtype)
    return den.replace(_randomise(den.params, rng))


def small_winn(rng, mode="random", dtype=np.float32):
    return init_winn(WinnConfig(levels=1, pairs=1, width=4), rng, mode=mode, dtype=dtype)


def test_negative_zeta_rejected():
    with pytest.raises(ValueError):
        GuidanceConfig(zeta=-0.1)


def test_zero_zeta_step_is_the_unconditional_step(rng):
    den, winn = small_denoiser(rng), small_winn(rng)
    x = Tensor(rng.normal((2, 1, 8, 8)))
    y = Tensor(rng.uniform((2, 1, 4, 4)).astype(np.float32))
    for t in (10, 4, 1):
        a = indigo_step(x, t, y, den, winn, S10, GuidanceConfig(zeta=0.0, T=10), Rng(3))
        b = baseline_measurement_step(x, t, y, den, degradation_operator(DegradationOp()), S10,
                                      GuidanceConfig(zeta=0.0, T=10), Rng(3))
        z = Rng(3).normal(x.shape) if t > 1 else np.zeros(x.shape, np.float32)
        ref, _ = ddpm_step(den, x, t, Tensor(z), S10)
        assert a.data.tobytes() == ref.data.tobytes()
        assert b.data.tobytes() == ref.data.tobytes()


def test_zero_zeta_sample_equals_unconditional_sample(rng):
    den, winn = small_denoiser(rng), small_winn(rng)
    y = rng.uniform((3, 1, 4, 4)).astype(np.float32)
    x, _ = indigo_sample(y, den, winn, S10, GuidanceConfig(zeta=0.0, T=10, seed=8), (1, 8, 8))
    ref = unconditional_sample(den, S10, chain_rngs(8, (3, 1, 8, 8)), (3, 1, 8, 8))
    assert x.data.tobytes() == ref.data.tobytes()


def _fixed_point_case(rng, winn, dtype=np.float32):
    den = AffineDenoiser(0.3, -0.1, dtype)
    x = Tensor(rng.normal((1, 8, 8), np.float64), dtype=dtype)
    _, x0 = ddpm_step(den, x, 6, Tensor(np.zeros((1, 8, 8), dtype)), S10)
    c, _ = winn_forward(winn, to_unit(x0))
    leaf = x.watch()
    with Tape() as tape:
        _, x0 = ddpm_step(den, leaf, 6, Tensor(np.zeros((1, 8, 8), dtype)), S10)
        loss, _, _ = guidance_loss(x0, c, winn)
    return loss.item(), gradient(tape, loss, [leaf])[leaf].data


def test_fixed_point_is_exact_for_the_lazy_wavelet(rng):
    loss, g = _fixed_point_case(rng, small_winn(rng, "zero"))
    assert loss == 0.0 and not np.any(g)


def test_fixed_point_with_learned_lifting(rng):
    # the round trip is exact only up to rounding, so the gradient is at rounding level
    loss, g = _fixed_point_case(rng, small_winn(rng, "random", np.float64), np.float64)
    assert loss < 1e-25 and np.abs(g).max() < 1e-12
    loss, g = _fixed_point_case(rng, small_winn(rng, "random"))
    assert loss < 1e-10 and np.abs(g).max() < 1e-4


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_guidance_gradient_matches_finite_differences(dtype):
    for r in check_guidance(seed=2, dtype=dtype):
        assert r.passed, r


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_baseline_gradient_matches_finite_differences(dtype):
    r = check_baseline(seed=2, dtype=dtype)
    assert r.passed, r


def test_gradients_along_a_fifty_step_run():
    """Every 10th step of a T=50 guided chain, float32, rel. err < 1e-2."""
    rng = Rng(6)
    s = build_linear_schedule(50)
    den, winn = small_denoiser(rng, T=50), small_winn(rng)
    y = Tensor(rng.uniform((1, 4, 4)).astype(np.float32))
    cfg = GuidanceConfig(zeta=0.5, T=50)
    chain = Rng(1)
    x = Tensor(chain.normal((1, 8, 8)))
    checked = []
    for t in range(50, 0, -1):
        if t % 10 == 0:
            z = Tensor(Rng(t).normal((1, 8, 8)))
            err = check_program(_guidance_program(den, winn, y, t, z, s), {"x": x}, "x", 1e-3)
            checked.append((t, err))
        x = indigo_step(x, t, y, den, winn, s, cfg, chain)
    assert len(checked) == 5
    assert all(e < 1e-2 for _, e in checked), checked


def test_trace_shapes(rng):
    den, winn = small_denoiser(rng), small_winn(rng)
    y = rng.uniform((2, 1, 4, 4)).astype(np.float32)
    _, trace = indigo_sample(y, den, winn, S10, GuidanceConfig(T=10, record_trace=True), (1, 8, 8))
    assert list(trace.x0) == [5]
    assert trace.x0[5].shape == (2, 1, 8, 8)
    assert trace.coarse[5].shape == (2, 1, 4, 4)
    assert trace.xhat[5].shape == (2, 1, 8, 8)
    _, none = indigo_sample(y, den, winn, S10, GuidanceConfig(T=10), (1, 8, 8))
    assert none is None


def test_measurement_shape_checked(rng):
    den, winn = small_denoiser(rng), small_winn(rng)
    with pytest.raises(ShapeError):
        indigo_sample(np.zeros((1, 2, 2), np.float32), den, winn, S10, GuidanceConfig(T=10), (1, 8, 8))


def test_divergence_reports_the_step(rng):
    winn = small_winn(rng)
    blow = AffineDenoiser(1e30, 0.0)
    with pytest.raises(SamplingError) as err:
        indigo_sample(np.zeros((1, 4, 4), np.float32), blow, winn, S10, GuidanceConfig(zeta=1e30, T=10), (1, 8, 8))
    assert 1 <= err.value.step <= 10


# ------------------------------------------------------------- consistency

def test_consistency_of_an_inverse_reconstruction(rng):
    winn = small_winn(rng)
    y = Tensor(rng.uniform((1, 4, 4)).astype(np.float32))
    d = [Tensor(rng.normal((3, 4, 4)))]
    x = winn_inverse(winn, y, d)
    assert consistency_residual(x, y, winn) < 1e-4


def test_consistency_is_positive_in_general_position(rng):
    winn = small_winn(rng)
    assert consistency_residual(rng.uniform((1, 8, 8)).astype(np.float32),
                                rng.uniform((1, 4, 4)).astype(np.float32), winn) > 0


def test_consistency_equals_training_error(rng):
    winn = small_winn(rng, dtype=np.float64)
    x = Tensor(rng.uniform((1, 1, 8, 8)))
    y = Tensor(rng.uniform((1, 1, 4, 4)))
    r = consistency_residual(x, y, winn)
    assert r[0] ** 2 == pytest.approx(coarse_loss(winn, x, y).item(), rel=1e-12)


def test_baseline_needs_closed_form_operator(rng):
    den = small_denoiser(rng)
    y = rng.uniform((1, 4, 4)).astype(np.float32)
    with pytest.raises(ValueError):
        baseline_sample(y, den, None, S10, GuidanceConfig(T=10), (1, 8, 8))
    with pytest.raises(ValueError):
        baseline_measurement_step(Tensor(np.zeros((1, 8, 8), np.float32)), 3, Tensor(y), den, None, S10,
                                  GuidanceConfig(T=10), Rng(0))


def test_guidance_pulls_toward_the_measurement(rng):
    """With a lazy-wavelet WINN the loss only sees the even/even samples; a guided step moves them toward y."""
    winn = small_winn(rng, "zero")
    den = AffineDenoiser(0.0, 0.0)
    x = Tensor(np.zeros((1, 8, 8), np.float32))
    y = Tensor(np.ones((1, 4, 4), np.float32))
    a = indigo_step(x, 1, y, den, winn, S10, GuidanceConfig(zeta=0.1, T=10), Rng(0))
    b = indigo_step(x, 1, y, den, winn, S10, GuidanceConfig(zeta=0.0, T=10), Rng(0))
    assert np.all(a.data[:, ::2, ::2] > b.data[:, ::2, ::2])
    assert np.array_equal(a.data[:, 1::2, :], b.data[:, 1::2, :])
