"""Tests for the tensor autodiff core, MLP blocks, Adam, and checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prosg import numerics as N
from prosg.errors import ContractError, InputError, NumericError, ShapeError
from prosg.numerics import tensor as T
from prosg.numerics.nn import Layer, MlpParams, forward, init_mlp, init_residual_mlp


@pytest.fixture(autouse=True)
def float64_mode():
    with T.using_dtype(np.float64):
        yield


def rand_mlp(rng, dims):
    return init_mlp(rng, dims)


class TestForward:
    def test_identity_layer_passes_input_through(self):
        w = T.parameter(np.eye(3))
        b = T.parameter(np.zeros(3))
        params = MlpParams([Layer(w, b, activation="none")])
        x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
        out = forward(params, T.constant(x))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_layer_broadcasts_bias(self):
        w = T.parameter(np.zeros((4, 2)))
        b = T.parameter(np.array([0.3, -1.2]))
        params = MlpParams([Layer(w, b, activation="none")])
        x = T.constant(np.random.default_rng(0).standard_normal((5, 4)))
        out = forward(params, x)
        np.testing.assert_allclose(out.data, np.tile([0.3, -1.2], (5, 1)))

    def test_two_layer_shape_contract(self):
        rng = np.random.default_rng(7)
        params = rand_mlp(rng, [3, 16, 4])
        out = forward(params, T.constant(rng.standard_normal((8, 3))))
        assert out.shape == (8, 4)

    def test_dimension_mismatch_names_both_shapes(self):
        rng = np.random.default_rng(7)
        params = rand_mlp(rng, [3, 8, 2])
        with pytest.raises(ShapeError, match=r"\(5, 4\).*\(3,\)"):
            forward(params, T.constant(rng.standard_normal((5, 4))))

    def test_residual_layer_requires_square_weights(self):
        w = T.parameter(np.zeros((4, 2)))
        b = T.parameter(np.zeros(2))
        with pytest.raises(ShapeError):
            MlpParams([Layer(w, b, residual=True)])


class TestBackward:
    def test_linear_sum_grad_is_input_broadcast(self):
        # loss = sum(x @ W); d/dW = column of per-feature input sums
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 4))
        w = T.parameter(rng.standard_normal((4, 3)))
        loss = T.matmul(T.constant(x), w).sum()
        T.backward(loss)
        expected = np.tile(x.sum(axis=0)[:, None], (1, 3))
        np.testing.assert_allclose(w.grad, expected, rtol=1e-12)

    def test_squared_norm_grad(self):
        # loss = ||W x||^2 -> dL/dW = 2 y x^T
        rng = np.random.default_rng(4)
        x = rng.standard_normal(5)
        w = T.parameter(rng.standard_normal((5, 3)))
        y = T.matmul(T.constant(x), w)
        loss = (y * y).sum()
        T.backward(loss)
        np.testing.assert_allclose(w.grad, 2.0 * np.outer(x, y.data), rtol=1e-10)

    def test_three_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        params = rand_mlp(rng, [3, 8, 8, 1])
        x = T.constant(rng.standard_normal((4, 3)))

        def loss_fn(p):
            out = forward(params, x)
            return (out * out).mean()

        err = N.finite_difference_check(loss_fn, params.parameters(), eps=1e-4)
        assert err < 1e-4

    def test_unreachable_params_get_zero_grad(self):
        a = T.parameter(np.ones(3))
        b = T.parameter(np.ones(3))
        loss = (a * a).sum()
        T.backward(loss, params=[a, b])
        np.testing.assert_array_equal(b.grad, np.zeros(3))
        np.testing.assert_allclose(a.grad, 2 * np.ones(3))

    def test_non_scalar_loss_rejected(self):
        a = T.parameter(np.ones(3))
        with pytest.raises(ContractError):
            T.backward(a * a)

    def test_residual_blocks_differentiate(self):
        rng = np.random.default_rng(9)
        params = init_residual_mlp(rng, 4, 6, blocks=2, out_dim=2)
        x = T.constant(rng.standard_normal((3, 4)))
        err = N.finite_difference_check(
            lambda p: N.softplus(forward(params, x)).sum(), params.parameters(), eps=1e-4
        )
        assert err < 1e-4


class TestFiniteDifferenceCheck:
    def test_square_at_three(self):
        w = T.parameter(np.array(3.0))
        err = N.finite_difference_check(lambda p: p["w"] * p["w"], {"w": w}, eps=1e-5)
        assert err < 1e-6
        np.testing.assert_allclose(w.grad, 6.0, rtol=1e-12)

    def test_constant_function_error_is_zero(self):
        w = T.parameter(np.array([1.0, 2.0]))
        err = N.finite_difference_check(lambda p: (p["w"] * 0.0).sum(), {"w": w}, eps=1e-5)
        assert err == 0.0

    def test_non_finite_output_raises(self):
        w = T.parameter(np.array(0.0))
        with np.errstate(divide="ignore"), pytest.raises(NumericError):
            N.finite_difference_check(lambda p: T.log(p["w"]), {"w": w}, eps=1e-5)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = T.parameter(np.array([1.0, -2.0]))
        opt = N.Adam({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_moments_decay_toward_zero_after_real_step(self):
        p = T.parameter(np.array([1.0]))
        opt = N.Adam({"p": p}, lr=0.1)
        p.grad = np.array([0.5])
        opt.step()
        m0, v0 = abs(opt.m["p"][0]), abs(opt.v["p"][0])
        for _ in range(5):
            p.grad = np.zeros(1)
            opt.step()
        assert abs(opt.m["p"][0]) < m0
        assert abs(opt.v["p"][0]) < v0

    def test_first_step_is_sign_scaled(self):
        # bias-corrected moments equal g and g^2, so the update is about -lr*sign(g)
        g = np.array([0.3, -0.7, 2.0])
        p = T.parameter(np.zeros(3))
        opt = N.Adam({"p": p}, lr=0.01)
        p.grad = g.copy()
        opt.step()
        np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=1e-6)
        assert opt.step_count == 1

    def test_steps_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            p = T.parameter(rng.standard_normal(4))
            opt = N.Adam({"p": p}, lr=0.05)
            for _ in range(2):
                p.grad = rng.standard_normal(4)
                opt.step()
            return p.data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_gradient_rejects_step_with_name(self):
        p = T.parameter(np.array([1.0]))
        q = T.parameter(np.array([2.0]))
        opt = N.Adam({"good": p, "bad": q}, lr=0.1)
        p.grad = np.array([1.0])
        q.grad = np.array([np.nan])
        with pytest.raises(NumericError, match="bad"):
            opt.step()
        # whole step rejected: no parameter moved
        np.testing.assert_array_equal(p.data, [1.0])
        np.testing.assert_array_equal(q.data, [2.0])


def _random_composed_loss(seed):
    """Random graph over the supported smooth op set, reduced to a scalar."""
    rng = np.random.default_rng(seed)
    a = T.parameter(rng.standard_normal((3, 4)))
    b = T.parameter(rng.standard_normal((4, 2)))
    c = T.parameter(rng.standard_normal(2))

    def loss_fn(_):
        h = T.matmul(a, b) + c
        h = T.concat([T.sin(h), T.cos(h), N.square(h)], axis=1)
        h = N.sigmoid(h) * N.softplus(h[:, :3])[:, :1]
        z = N.exp(-h).mean() + N.log(N.softplus(h).sum() + 1.0)
        return z + (c * c).sum()

    return loss_fn, {"a": a, "b": b, "c": c}


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_composed_graphs_match_finite_differences(seed):
    # floor: a random graph can put a gradient component at a zero crossing,
    # where pure relative error diverges no matter how exact the gradient is
    with T.using_dtype(np.float64):
        loss_fn, params = _random_composed_loss(seed)
        err = N.finite_difference_check(loss_fn, params, eps=1e-4, floor=1e-3)
        assert err < 1e-4


def test_backward_linearity():
    rng = np.random.default_rng(21)
    w = T.parameter(rng.standard_normal((4, 4)))
    x = T.constant(rng.standard_normal((2, 4)))

    def grad_of(fn):
        w.grad = None
        T.backward(fn())
        return w.grad.copy()

    f = lambda: T.sin(T.matmul(x, w)).sum()
    g = lambda: N.square(T.matmul(x, w)).mean()
    a_coef, b_coef = 2.5, -0.75
    combined = grad_of(lambda: a_coef * f() + b_coef * g())
    expected = a_coef * grad_of(f) + b_coef * grad_of(g)
    np.testing.assert_allclose(combined, expected, atol=1e-10)


def test_forward_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        params = rand_mlp(rng, [5, 16, 3])
        x = T.constant(rng.standard_normal((7, 5)))
        return forward(params, x).data.tobytes()

    assert run() == run()


def test_relu_gradient_away_from_kink():
    w = T.parameter(np.array([1.5, -2.0, 0.5]))
    loss = N.relu(w).sum()
    T.backward(loss)
    np.testing.assert_array_equal(w.grad, [1.0, 0.0, 1.0])


def test_gather_accumulates_duplicate_indices():
    w = T.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = N.gather(w, np.array([0, 0, 1]))
    T.backward(out.sum())
    np.testing.assert_array_equal(w.grad, [[2.0, 2.0], [1.0, 1.0]])


def test_conv2d_matches_finite_differences():
    rng = np.random.default_rng(13)
    net = N.nn.init_conv(rng, [2, 3, 4])
    x = T.constant(rng.standard_normal((2, 2, 8, 8)))

    def loss_fn(_):
        out = N.nn.conv_forward(net, x)
        return N.square(out).mean()

    err = N.finite_difference_check(loss_fn, net.parameters(), eps=1e-4)
    assert err < 1e-4


def test_broadcast_ops_unbroadcast_gradients():
    a = T.parameter(np.ones((3, 1)))
    b = T.parameter(np.ones(4))
    loss = (a * b).sum()
    T.backward(loss)
    np.testing.assert_array_equal(a.grad, 4 * np.ones((3, 1)))
    np.testing.assert_array_equal(b.grad, 3 * np.ones(4))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "weights.prosg"
        rng = np.random.default_rng(2)
        tensors = {
            "layer/w": rng.standard_normal((3, 4)).astype(np.float32),
            "layer/b": rng.standard_normal(4),
        }
        meta = {"note": "fixture", "count": 2}
        N.checkpoint.save(path, "testmod", tensors, meta)
        module, loaded, got_meta = N.checkpoint.load(path)
        assert module == "testmod"
        assert got_meta == meta
        for name, arr in tensors.items():
            assert loaded[name].dtype == arr.dtype
            np.testing.assert_array_equal(loaded[name], arr)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.prosg"
        path.write_bytes(b"NOTPROSG" + b"\x00" * 16)
        with pytest.raises(InputError, match="magic"):
            N.checkpoint.load(path)

    def test_accepts_tensor_objects(self, tmp_path):
        path = tmp_path / "t.prosg"
        N.checkpoint.save(path, "m", {"p": T.parameter(np.arange(3.0))})
        _, loaded, _ = N.checkpoint.load(path)
        np.testing.assert_array_equal(loaded["p"], np.arange(3.0))
