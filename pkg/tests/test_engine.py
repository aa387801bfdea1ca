import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from indigo.engine import (NonFiniteError, ShapeError, Tape, Tensor, evaluate, finite_difference_gradient,
                           gradient, ops, relative_error)
from indigo.gradcheck import check_primitives
from indigo.rng import Rng


def test_evaluate_examples():
    v, tape = evaluate(lambda x: ops.add(x, x), {"x": Tensor([1.0, 2.0])})
    np.testing.assert_array_equal(v.data, [2.0, 4.0])
    assert isinstance(tape, Tape)
    v, _ = evaluate(ops.relu, [Tensor([-1.0, 3.0])])
    np.testing.assert_array_equal(v.data, [0.0, 3.0])


def test_identity_kernel_conv_returns_input(rng):
    x = Tensor(rng.normal((2, 3, 5, 7)))
    w = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y = ops.conv2d(x, Tensor(w))
    np.testing.assert_array_equal(y.data, x.data)


def test_gradient_of_square():
    x = Tensor(np.array(3.0)).watch()
    with Tape() as tape:
        loss = ops.mul(x, x)
    assert gradient(tape, loss, [x])[x].item() == 6.0


def test_gradient_zero_at_quadratic_minimum(rng):
    y = Tensor(rng.normal((4, 4)))
    x = Tensor(y.data.copy()).watch()
    with Tape() as tape:
        loss = ops.sq_l2(ops.sub(x, y))
    assert not np.any(gradient(tape, loss, [x])[x].data)


def test_non_scalar_seed_rejected():
    x = Tensor([1.0, 2.0]).watch()
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(ShapeError):
        gradient(tape, y, [x])


def test_untouched_leaf_maps_to_zeros():
    x = Tensor([1.0, 2.0]).watch()
    unused = Tensor(np.ones((2, 3))).watch()
    with Tape() as tape:
        loss = ops.sq_l2(x)
    g = gradient(tape, loss, [x, unused])
    assert g[unused].shape == (2, 3) and not np.any(g[unused].data)


def test_shape_error_names_primitive_and_extents():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ops.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError, match="conv2d"):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        ops.scale(Tensor([1.0]), np.inf)


def test_two_layer_conv_mse_matches_finite_differences():
    rng = Rng(7)
    x = Tensor(rng.normal((2, 2, 6, 6)))
    target = Tensor(rng.normal((2, 1, 6, 6)))
    w1 = Tensor(rng.normal((4, 2, 3, 3)) / 4)
    w2 = Tensor(rng.normal((1, 4, 3, 3)) / 6)

    def net(w1, w2):
        h = ops.silu(ops.conv2d(x, w1))
        return ops.mean(ops.mul(*(2 * [ops.sub(ops.conv2d(h, w2), target)])))

    for leaf in ("w1", "w2"):
        v, tape = evaluate(net, {"w1": w1.watch() if leaf == "w1" else w1, "w2": w2.watch() if leaf == "w2" else w2})
        g = gradient(tape, v)
        tape_g = next(iter(g.values())).data
        fd = finite_difference_gradient(net, {"w1": w1, "w2": w2}, leaf, step=1e-3)
        assert relative_error(tape_g, fd) < 1e-3


def test_fd_examples():
    fd = finite_difference_gradient(lambda x: ops.mul(x, x), [Tensor(np.array(3.0))], 0, step=1e-4)
    assert abs(float(fd) - 6.0) < 1e-6
    const = finite_difference_gradient(lambda x: ops.reduce_sum(Tensor(np.ones(3))), [Tensor(np.ones(4))], 0)
    assert not np.any(const)


def test_fd_subset_of_coordinates(rng):
    x = Tensor(rng.normal((3, 4)))
    full = finite_difference_gradient(ops.sq_l2, [x], 0, step=1e-6)
    part = finite_difference_gradient(ops.sq_l2, [x], 0, step=1e-6, coords=[0, 5, 11])
    np.testing.assert_allclose(part, full.reshape(-1)[[0, 5, 11]])


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_every_primitive_matches_finite_differences(dtype):
    results = [r for r in check_primitives(seed=3) if r.dtype == dtype]
    bad = [(r.name, r.error) for r in results if not r.passed]
    assert not bad, bad


def test_gradients_accumulate_at_fan_out(rng):
    x0 = rng.normal((3, 3))
    x = Tensor(x0).watch()
    with Tape() as tape:
        loss = ops.add(ops.sq_l2(x), ops.reduce_sum(ops.scale(x, 3.0)))
    g = gradient(tape, loss, [x])[x].data
    np.testing.assert_array_equal(g, (2.0 * x0 + 3.0).astype(np.float32))


def test_evaluate_is_deterministic(rng):
    x = Tensor(rng.normal((2, 3, 8, 8)))
    w = Tensor(rng.normal((4, 3, 3, 3)))
    a, _ = evaluate(lambda x, w: ops.silu(ops.conv2d(x, w, stride=2)), [x, w])
    b, _ = evaluate(lambda x, w: ops.silu(ops.conv2d(x, w, stride=2)), [x, w])
    assert a.data.tobytes() == b.data.tobytes()


@settings(max_examples=30, deadline=None)
@given(k=st.sampled_from([2, 4]), c=st.integers(1, 3), h=st.integers(1, 3), w=st.integers(1, 3),
       seed=st.integers(0, 2**32 - 1))
def test_polyphase_merge_inverts_split(k, c, h, w, seed):
    x = Tensor(Rng(seed).normal((2, c, h * k, w * k)))
    y = ops.polyphase_merge(ops.polyphase_split(x, k), k)
    assert y.data.tobytes() == x.data.tobytes()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), stride=st.sampled_from([1, 2]))
def test_conv2d_is_linear_in_input(seed, stride):
    r = Rng(seed)
    a, b = r.normal((1, 2, 6, 6), np.float64), r.normal((1, 2, 6, 6), np.float64)
    w = Tensor(r.normal((3, 2, 3, 3), np.float64))
    lhs = ops.conv2d(Tensor(a + 2 * b), w, stride=stride).data
    rhs = ops.conv2d(Tensor(a), w, stride=stride).data + 2 * ops.conv2d(Tensor(b), w, stride=stride).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
