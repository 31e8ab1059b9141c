"""
Tests for the tensor core: convolution, merge layer, Adam and the
finite-difference checker itself.
"""

import numpy as np
import pytest

from utils.errors import ConfigurationError, NumericError
from utils.gradcore import (
    Activation,
    AdamState,
    ConvLayer,
    MergeMode,
    Tensor3,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    finite_diff_check,
    merge_backward,
    merge_forward,
)


def naive_conv(values, kernel, bias):
    """Quadruple loop reference for a 'same' stride-1 correlation."""
    kh, kw, cin, cout = kernel.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(values, ((ph, ph), (pw, pw), (0, 0)))
    height, width = values.shape[:2]
    out = np.zeros((height, width, cout))
    for y in range(height):
        for x in range(width):
            for o in range(cout):
                out[y, x, o] = np.sum(padded[y:y + kh, x:x + kw, :] * kernel[:, :, :, o]) + bias[o]
    return out


# =============================================================================
# Convolution
# =============================================================================

class TestConv2d:

    @pytest.mark.parametrize("kh, kw", [(3, 3), (5, 3), (1, 1)])
    def test_forward_matches_naive_loop(self, rng, kh, kw):
        values = rng.standard_normal((6, 5, 2))
        kernel = rng.standard_normal((kh, kw, 2, 3))
        bias = rng.standard_normal(3)
        layer = ConvLayer(kernel, bias, Activation.LINEAR)

        out = conv2d_forward(Tensor3(values), layer)

        np.testing.assert_allclose(out.values, naive_conv(values, kernel, bias), atol=1e-12)

    def test_relu_clamps_negative_responses(self, rng):
        layer = ConvLayer(rng.standard_normal((3, 3, 1, 2)), np.zeros(2), Activation.RELU)
        out = conv2d_forward(Tensor3(rng.standard_normal((5, 5))), layer)
        assert out.values.min() >= 0.0
        assert out.shape == (5, 5, 2)

    def test_channel_mismatch_is_a_configuration_error(self, rng):
        layer = ConvLayer(rng.standard_normal((3, 3, 2, 1)), np.zeros(1))
        with pytest.raises(ConfigurationError):
            conv2d_forward(Tensor3(rng.standard_normal((4, 4, 3))), layer)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            ConvLayer(np.zeros((2, 3, 1, 1)), np.zeros(1))

    def test_non_finite_input_rejected(self, rng):
        values = rng.standard_normal((4, 4))
        values[1, 2] = np.nan
        layer = ConvLayer(rng.standard_normal((3, 3, 1, 1)), np.zeros(1))
        with pytest.raises(NumericError):
            conv2d_forward(Tensor3(values), layer)

    @pytest.mark.parametrize("activation", [Activation.LINEAR, Activation.RELU])
    def test_backward_matches_finite_differences(self, rng, activation):
        weights = rng.standard_normal((6, 5, 3))

        def loss_fn(p):
            layer = ConvLayer(p["kernel"], p["bias"], activation)
            inp = Tensor3(p["input"])
            out = conv2d_forward(inp, layer)
            grad_input, grad_kernel, grad_bias = conv2d_backward(inp, layer, Tensor3(weights))
            loss = float(np.sum(out.values * weights))
            return loss, {"kernel": grad_kernel, "bias": grad_bias, "input": grad_input.values}

        params = {
            "kernel": rng.standard_normal((3, 5, 2, 3)),
            "bias": rng.standard_normal(3),
            "input": rng.standard_normal((6, 5, 2)),
        }
        assert finite_diff_check(loss_fn, params, eps=1e-5, min_magnitude=1e-6) < 1e-4

    def test_backward_rejects_wrong_upstream_shape(self, rng):
        layer = ConvLayer(rng.standard_normal((3, 3, 1, 2)), np.zeros(2))
        inp = Tensor3(rng.standard_normal((4, 4)))
        with pytest.raises(ConfigurationError):
            conv2d_backward(inp, layer, Tensor3(np.zeros((4, 4, 3))))


# =============================================================================
# Merge layer
# =============================================================================

class TestMerge:

    def test_add_is_twice_mean(self, rng):
        a = Tensor3(rng.standard_normal((4, 4, 3)))
        b = Tensor3(rng.standard_normal((4, 4, 3)))
        added = merge_forward(a, b, MergeMode.ADD).values
        averaged = merge_forward(a, b, MergeMode.MEAN).values
        np.testing.assert_array_equal(added, 2.0 * averaged)

    def test_concat_stacks_channels(self, rng):
        a = Tensor3(rng.standard_normal((3, 3, 2)))
        b = Tensor3(rng.standard_normal((3, 3, 2)))
        merged = merge_forward(a, b, MergeMode.CONCAT)
        assert merged.shape == (3, 3, 4)
        np.testing.assert_array_equal(merged.values[:, :, 2:], b.values)

    def test_max_ties_route_to_first_operand(self):
        a = Tensor3(np.ones((2, 2, 1)))
        upstream = Tensor3(np.full((2, 2, 1), 3.0))
        ga, gb = merge_backward(a, Tensor3(np.ones((2, 2, 1))), MergeMode.MAX, upstream)
        np.testing.assert_array_equal(ga.values, upstream.values)
        np.testing.assert_array_equal(gb.values, 0.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            merge_forward(Tensor3(np.zeros((2, 2, 1))), Tensor3(np.zeros((3, 2, 1))), MergeMode.ADD)

    @pytest.mark.parametrize("mode", list(MergeMode))
    def test_backward_matches_finite_differences(self, rng, mode):
        channels = 2
        out_channels = 2 * channels if mode is MergeMode.CONCAT else channels
        weights = rng.standard_normal((3, 4, out_channels))

        def loss_fn(p):
            a, b = Tensor3(p["a"]), Tensor3(p["b"])
            merged = merge_forward(a, b, mode)
            ga, gb = merge_backward(a, b, mode, Tensor3(weights))
            return float(np.sum(merged.values * weights)), {"a": ga.values, "b": gb.values}

        params = {"a": rng.standard_normal((3, 4, channels)), "b": rng.standard_normal((3, 4, channels))}
        assert finite_diff_check(loss_fn, params, eps=1e-5, min_magnitude=1e-6) < 1e-4


# =============================================================================
# Adam
# =============================================================================

class TestAdam:

    def test_first_step_matches_closed_form(self, rng):
        params = {"w": rng.standard_normal(5)}
        grads = {"w": rng.standard_normal(5)}
        state = AdamState.zeros_like(params)

        new_params, new_state = adam_step(params, grads, state, lr=0.01)

        m_hat = 0.1 * grads["w"] / 0.1
        v_hat = 0.001 * grads["w"] ** 2 / 0.001
        expected = params["w"] - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(new_params["w"], expected, rtol=1e-10)
        assert new_state.step == 1
        assert state.step == 0

    def test_inputs_are_not_mutated(self, rng):
        params = {"w": rng.standard_normal(4)}
        before = params["w"].copy()
        adam_step(params, {"w": np.ones(4)}, AdamState.zeros_like(params), lr=0.1)
        np.testing.assert_array_equal(params["w"], before)

    def test_zero_learning_rate_leaves_params_unchanged(self, rng):
        params = {"w": rng.standard_normal(4).astype(np.float32)}
        new_params, _ = adam_step(params, {"w": np.ones(4)}, AdamState.zeros_like(params), lr=0.0)
        np.testing.assert_array_equal(new_params["w"], params["w"])
        assert new_params["w"].dtype == np.float32

    def test_non_finite_gradient_aborts(self):
        params = {"w": np.zeros(3)}
        with pytest.raises(NumericError):
            adam_step(params, {"w": np.array([0.0, np.inf, 1.0])}, AdamState.zeros_like(params), lr=0.1)

    def test_key_mismatch_rejected(self):
        params = {"w": np.zeros(3)}
        with pytest.raises(ConfigurationError):
            adam_step(params, {"v": np.zeros(3)}, AdamState.zeros_like(params), lr=0.1)

    def test_minimises_a_quadratic(self):
        params = {"w": np.zeros(3)}
        state = AdamState.zeros_like(params)
        for _ in range(1000):
            grads = {"w": 2.0 * (params["w"] - 3.0)}
            params, state = adam_step(params, grads, state, lr=0.1)
        np.testing.assert_allclose(params["w"], 3.0, atol=0.1)


# =============================================================================
# Gradient checker
# =============================================================================

class TestFiniteDiffCheck:

    def test_accepts_exact_gradient(self, rng):
        params = {"p": rng.standard_normal(6)}
        err = finite_diff_check(lambda p: (float(np.sum(p["p"] ** 2)), {"p": 2.0 * p["p"]}), params)
        assert err < 1e-6

    def test_flags_wrong_gradient(self, rng):
        params = {"p": rng.standard_normal(6)}
        err = finite_diff_check(lambda p: (float(np.sum(p["p"] ** 2)), {"p": 3.0 * p["p"]}), params)
        assert err > 0.1

    def test_excluded_coordinates_are_skipped(self):
        params = {"p": np.array([1.0, 2.0])}

        def loss_fn(p):
            grad = 2.0 * p["p"]
            grad[1] = 100.0
            return float(np.sum(p["p"] ** 2)), {"p": grad}

        assert finite_diff_check(loss_fn, params, exclude=lambda name, idx: idx == (1,)) < 1e-6
