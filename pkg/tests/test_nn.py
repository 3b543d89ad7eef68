"""Tests for the from-scratch layers, loss, optimizer, and gradient checker."""

from __future__ import annotations

import math

import numpy as np
import pytest

from safetymap.modelio import load_tensors, save_tensors
from safetymap.nn import (
    adam_init,
    adam_step,
    bce_loss,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout,
    glorot_uniform,
    grad_check,
    maxpool2d_backward,
    maxpool2d_forward,
    relu,
    relu_grad,
    sigmoid,
    tanh,
)


def naive_conv2d(x, kernels, bias, stride=1, padding=0):
    """Direct-loop convolution oracle, independent of the im2col path."""
    k, c, kh, kw = kernels.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (xp.shape[1] - kh) // stride + 1
    w_out = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((k, h_out, w_out))
    for f in range(k):
        for i in range(h_out):
            for j in range(w_out):
                acc = bias[f]
                for ch in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += kernels[f, ch, a, b] * xp[ch, i * stride + a, j * stride + b]
                out[f, i, j] = acc
    return out


class TestDense:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        y = dense_forward(x, np.eye(3), np.zeros(3))
        assert np.array_equal(y, x)

    def test_hand_arithmetic(self):
        x = np.array([1.0, 2.0])
        w = np.array([[1.0, 1.0], [0.0, 1.0]])
        b = np.array([0.0, 1.0])
        assert dense_forward(x, w, b).tolist() == [3.0, 3.0]

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=5)
        coeff = rng.normal(size=4)  # reduce output to a scalar

        def loss_and_grads(params):
            y = dense_forward(params["x"], params["w"], params["b"])
            loss = float(coeff @ y)
            gx, gw, gb = dense_backward(params["x"], params["w"], coeff)
            return loss, {"x": gx, "w": gw, "b": gb}

        params = {"x": x0, "w": rng.normal(size=(4, 5)), "b": rng.normal(size=4)}
        assert grad_check(loss_and_grads, params) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="dense"):
            dense_forward(np.zeros(3), np.zeros((4, 2)), np.zeros(4))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 3, 3))
        k = np.ones((1, 1, 1, 1))
        out = conv2d_forward(x, k, np.zeros(1))
        assert np.allclose(out, x)

    def test_all_ones_sums(self):
        x = np.ones((1, 3, 3))
        k = np.ones((1, 1, 3, 3))
        out = conv2d_forward(x, k, np.zeros(1))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 9.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_naive_oracle(self, stride, padding):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 7, 7))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = conv2d_forward(x, k, b, stride=stride, padding=padding)
        want = naive_conv2d(x, k, b, stride=stride, padding=padding)
        assert np.allclose(got, want, atol=1e-12)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        coeff = rng.normal(size=(3, 6, 6))

        def loss_and_grads(params):
            y = conv2d_forward(params["x"], params["k"], params["b"], stride=1, padding=0)
            loss = float(np.sum(coeff * y))
            gx, gk, gb = conv2d_backward(params["x"], params["k"], coeff, stride=1, padding=0)
            return loss, {"x": gx, "k": gk, "b": gb}

        params = {
            "x": rng.normal(size=(2, 8, 8)),
            "k": rng.normal(size=(3, 2, 3, 3)),
            "b": rng.normal(size=3),
        }
        assert grad_check(loss_and_grads, params) < 1e-6

    def test_strided_padded_gradients(self):
        rng = np.random.default_rng(4)
        coeff = rng.normal(size=(2, 4, 4))

        def loss_and_grads(params):
            y = conv2d_forward(params["x"], params["k"], params["b"], stride=2, padding=1)
            loss = float(np.sum(coeff * y))
            gx, gk, gb = conv2d_backward(params["x"], params["k"], coeff, stride=2, padding=1)
            return loss, {"x": gx, "k": gk, "b": gb}

        params = {
            "x": rng.normal(size=(1, 7, 7)),
            "k": rng.normal(size=(2, 1, 3, 3)),
            "b": rng.normal(size=2),
        }
        assert grad_check(loss_and_grads, params) < 1e-6

    def test_non_integral_extent_rejected(self):
        with pytest.raises(ValueError, match="non-integral"):
            conv2d_forward(np.zeros((1, 6, 6)), np.zeros((1, 1, 3, 3)), np.zeros(1), stride=2)


class TestMaxpool:
    def test_constant_input(self):
        out, _ = maxpool2d_forward(np.full((2, 4, 4), 3.5))
        assert np.array_equal(out, np.full((2, 2, 2), 3.5))

    def test_single_window(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out, _ = maxpool2d_forward(x)
        assert out[0, 0, 0] == 4.0

    def test_tie_routes_to_first_in_scan_order(self):
        x = np.array([[[7.0, 7.0], [7.0, 7.0]]])
        _, idx = maxpool2d_forward(x)
        grad = maxpool2d_backward(idx, np.ones((1, 1, 1)))
        assert grad[0, 0, 0] == 1.0
        assert grad.sum() == 1.0

    def test_gradient_at_non_tied_points(self):
        rng = np.random.default_rng(5)
        coeff = rng.normal(size=(2, 3, 3))

        def loss_and_grads(params):
            y, idx = maxpool2d_forward(params["x"])
            loss = float(np.sum(coeff * y))
            return loss, {"x": maxpool2d_backward(idx, coeff)}

        # continuous random input: window margins far exceed the fd step
        params = {"x": rng.normal(size=(2, 6, 6))}
        assert grad_check(loss_and_grads, params) < 1e-6

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError, match="even"):
            maxpool2d_forward(np.zeros((1, 3, 4)))


class TestActivations:
    def test_relu_formula(self):
        assert relu(np.array([-3.0]))[0] == 0.0
        assert relu(np.array([3.0]))[0] == 3.0
        assert relu_grad(np.array([-1.0, 2.0])).tolist() == [0.0, 1.0]

    def test_zero_points(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5
        assert tanh(np.array([0.0]))[0] == 0.0

    def test_sigmoid_extremes_stable(self):
        with np.errstate(over="raise"):
            lo = sigmoid(np.array([-40.0]))[0]
            hi = sigmoid(np.array([40.0]))[0]
        assert 1e-18 <= lo < 1e-15
        assert 1.0 - 1e-15 < hi <= 1.0

    def test_sigmoid_symmetry(self):
        rng = np.random.default_rng(6)
        x = rng.normal(scale=10.0, size=1000)
        total = sigmoid(x) + sigmoid(-x)
        assert np.max(np.abs(total - 1.0)) < 1e-15


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.arange(10.0)
        rng = np.random.default_rng(0)
        assert np.array_equal(dropout(x, 0.0, rng, training=True), x)
        assert np.array_equal(dropout(x, 0.0, training=False), x)

    def test_inference_identity(self):
        x = np.arange(10.0)
        assert dropout(x, 0.2, training=False) is x

    def test_training_statistics(self):
        rng = np.random.default_rng(7)
        x = np.ones(1_000_000)
        y = dropout(x, 0.2, rng, training=True)
        survivors = np.count_nonzero(y) / x.size
        assert abs(survivors - 0.8) < 0.002
        assert abs(y.mean() - 1.0) < 0.005

    def test_invalid_rate(self):
        with pytest.raises(ValueError, match="rate"):
            dropout(np.zeros(3), 1.0, np.random.default_rng(0), training=True)


class TestBce:
    def test_analytic_points(self):
        loss, _ = bce_loss(np.array([0.5]), np.array([1.0]))
        assert loss == pytest.approx(math.log(2.0), rel=1e-12)
        loss, _ = bce_loss(np.array([0.9]), np.array([0.0]))
        assert loss == pytest.approx(-math.log(0.1), rel=1e-12)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(8)

        def loss_and_grads(params):
            loss, grad = bce_loss(params["p"], labels)
            return loss, {"p": grad}

        labels = (rng.random(12) < 0.5).astype(np.float64)
        params = {"p": rng.uniform(0.05, 0.95, size=12)}
        assert grad_check(loss_and_grads, params) < 1e-6

    def test_extreme_probs_bounded(self):
        loss, grad = bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert np.isfinite(loss)
        assert np.all(np.isfinite(grad))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            bce_loss(np.zeros(3), np.zeros(4))


class TestAdam:
    def test_zero_gradient_no_move(self):
        params = {"w": np.array([1.0, -2.0])}
        state = adam_init(params, lr=0.1)
        adam_step(params, {"w": np.zeros(2)}, state)
        assert params["w"].tolist() == [1.0, -2.0]
        assert state.t == 1

    def test_first_step_magnitude(self):
        # with bias correction, the first update is lr * g/(|g| + ~eps)
        params = {"w": np.array([5.0])}
        state = adam_init(params, lr=0.01)
        adam_step(params, {"w": np.array([3.0])}, state)
        assert params["w"][0] == pytest.approx(5.0 - 0.01, abs=1e-6)

    def test_deterministic(self):
        def run():
            params = {"w": np.arange(4.0)}
            state = adam_init(params, lr=0.05)
            for step in range(5):
                adam_step(params, {"w": np.sin(params["w"] + step)}, state)
            return params["w"]

        assert np.array_equal(run(), run())

    def test_loss_decreases_on_separable_problem(self):
        rng = np.random.default_rng(9)
        x = np.vstack([rng.normal(-2.0, 0.5, size=(40, 2)), rng.normal(2.0, 0.5, size=(40, 2))])
        y = np.array([0.0] * 40 + [1.0] * 40)
        params = {"w": np.zeros(2), "b": np.zeros(1)}
        state = adam_init(params, lr=1e-2)
        losses = []
        for _ in range(100):
            p = sigmoid(x @ params["w"] + params["b"][0])
            loss, _ = bce_loss(p, y)
            losses.append(loss)
            grad_logit = (p - y) / y.size
            grads = {"w": x.T @ grad_logit, "b": np.array([grad_logit.sum()])}
            adam_step(params, grads, state)
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.2 * losses[0]

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        state = adam_init(params)
        with pytest.raises(ValueError, match="shape"):
            adam_step(params, {"w": np.zeros(4)}, state)


class TestGradCheck:
    def test_quadratic(self):
        def loss_and_grads(params):
            x = params["x"][0]
            return x * x, {"x": np.array([2.0 * x])}

        assert grad_check(loss_and_grads, {"x": np.array([3.0])}) < 1e-9

    def test_dense_sigmoid_bce_composite(self):
        rng = np.random.default_rng(10)
        labels = (rng.random(4) < 0.5).astype(np.float64)
        x = rng.normal(size=5)

        def loss_and_grads(params):
            z = dense_forward(x, params["w"], params["b"])
            p = sigmoid(z)
            loss, grad_p = bce_loss(p, labels)
            grad_z = grad_p * p * (1.0 - p)
            _, gw, gb = dense_backward(x, params["w"], grad_z)
            return loss, {"w": gw, "b": gb}

        params = {
            "w": glorot_uniform(rng, (4, 5), 5, 4),
            "b": rng.normal(size=4) * 0.1,
        }
        assert grad_check(loss_and_grads, params) < 1e-4

    def test_flags_wrong_gradient(self):
        def loss_and_grads(params):
            x = params["x"][0]
            return x * x, {"x": np.array([4.0 * x])}  # off by 2x

        err = grad_check(loss_and_grads, {"x": np.array([3.0])})
        assert err == pytest.approx(1.0 / 3.0, abs=1e-6)


class TestModelContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        tensors = {
            "layer0.w": rng.normal(size=(4, 3)),
            "layer0.b": rng.normal(size=4),
            "head.w": rng.normal(size=(1, 4)),
        }
        path = tmp_path / "model.bin"
        save_tensors(str(path), tensors, meta={"seed": 7, "mode": "shared"})
        loaded, meta = load_tensors(str(path))
        assert list(loaded) == list(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])
        assert meta == {"seed": 7, "mode": "shared"}

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"not a model\n1234")
        with pytest.raises(ValueError):
            load_tensors(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.bin"
        save_tensors(str(path), {"w": np.zeros(10)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_tensors(str(path))
