import numpy as np
import pytest

from apps.tensorcore.checkpoint import load_checkpoint, parameter_digest, read_checkpoint, save_checkpoint
from apps.tensorcore.gradcheck import numerical_gradient, relative_error
from apps.tensorcore.layers import (
    avgpool_global,
    avgpool_global_backward,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
)
from apps.tensorcore.models import LayerParams, as_tensor
from apps.tensorcore.services import sgd_step
from core.utils.errors import (
    CheckpointError,
    ConfigurationError,
    NonFiniteError,
    ShapeError,
    StateError,
    TrainingError,
)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def conv_layer(rng):
    layer = LayerParams.conv("test.conv", 2, 4, rng)
    layer.bias[...] = rng.normal(size=4)
    return layer


def direct_conv(x, weights, bias, stride, pad):
    c_out, c_in, k, _ = weights.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (x.shape[1] + 2 * pad - k) // stride + 1
    w_out = (x.shape[2] + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                total = bias[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            total += weights[o, c, di, dj] * padded[c, i * stride + di, j * stride + dj]
                out[o, i, j] = total
    return out


class TestTensor:
    def test_as_tensor_is_float64_copy(self):
        source = [[1, 2], [3, 4]]
        tensor = as_tensor(source)
        assert tensor.dtype == np.float64
        assert tensor.size == 4

    def test_as_tensor_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            as_tensor([1.0, np.nan])

    def test_as_tensor_rejects_empty(self):
        with pytest.raises(ConfigurationError):
            as_tensor([])

    def test_layer_params_gradient_buffers_match(self, conv_layer):
        for _, array, grad in conv_layer.arrays():
            assert grad.shape == array.shape

    def test_layer_params_reject_non_finite_weights(self):
        with pytest.raises(NonFiniteError) as excinfo:
            LayerParams("test.fc", np.array([[1.0, np.nan]]), np.zeros(1))
        assert "test.fc.weights" in str(excinfo.value)

    def test_bias_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            LayerParams("bad", np.zeros((3, 2)), np.zeros(2))

    def test_clone_is_independent(self, conv_layer):
        copy = conv_layer.clone()
        copy.weights += 1.0
        assert not np.allclose(copy.weights, conv_layer.weights)


class TestConv2d:
    def test_zero_input_zero_bias(self, rng):
        layer = LayerParams.conv("c", 1, 2, rng)
        out = conv2d_forward(np.zeros((1, 3, 3)), layer, stride=1, pad=1)
        assert np.all(out == 0.0)

    def test_identity_kernel(self, rng):
        layer = LayerParams("identity", np.ones((1, 1, 1, 1)), np.zeros(1))
        x = rng.normal(size=(1, 5, 5))
        np.testing.assert_array_equal(conv2d_forward(x, layer), x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_direct_loop(self, rng, conv_layer, stride, pad):
        x = rng.normal(size=(2, 8, 8))
        expected = direct_conv(x, conv_layer.weights, conv_layer.bias, stride, pad)
        np.testing.assert_allclose(conv2d_forward(x, conv_layer, stride, pad), expected, atol=1e-12)

    def test_batch_matches_single(self, rng, conv_layer):
        batch = rng.normal(size=(3, 2, 6, 6))
        out = conv2d_forward(batch, conv_layer, 2, 1)
        for n in range(3):
            np.testing.assert_allclose(out[n], conv2d_forward(batch[n], conv_layer, 2, 1), atol=1e-12)

    def test_zero_grad_out(self, rng, conv_layer):
        x = rng.normal(size=(2, 6, 6))
        out = conv2d_forward(x, conv_layer, 1, 1)
        grad_input = conv2d_backward(np.zeros_like(out), x, conv_layer, 1, 1)
        assert np.all(grad_input == 0.0)
        assert np.all(conv_layer.grad_weights == 0.0)

    def test_backward_linearity(self, rng, conv_layer):
        x = rng.normal(size=(2, 6, 6))
        g = rng.normal(size=conv2d_forward(x, conv_layer, 2, 1).shape)
        single = conv2d_backward(g, x, conv_layer, 2, 1)
        np.testing.assert_allclose(conv2d_backward(3.0 * g, x, conv_layer, 2, 1), 3.0 * single, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
    def test_finite_differences(self, rng, conv_layer, stride, pad):
        x = rng.normal(size=(2, 5, 5))
        projection = rng.normal(size=conv2d_forward(x, conv_layer, stride, pad).shape)

        def loss(_):
            return float(np.sum(conv2d_forward(x, conv_layer, stride, pad) * projection))

        grad_input = conv2d_backward(projection, x, conv_layer, stride, pad)
        assert relative_error(grad_input, numerical_gradient(loss, x)) < 1e-6
        assert relative_error(conv_layer.grad_weights, numerical_gradient(loss, conv_layer.weights)) < 1e-6
        assert relative_error(conv_layer.grad_bias, numerical_gradient(loss, conv_layer.bias)) < 1e-6

    def test_backward_requires_saved_input(self, conv_layer):
        with pytest.raises(StateError):
            conv2d_backward(np.zeros((4, 3, 3)), None, conv_layer)

    def test_channel_mismatch(self, rng, conv_layer):
        with pytest.raises(ConfigurationError):
            conv2d_forward(rng.normal(size=(3, 5, 5)), conv_layer)

    def test_kernel_larger_than_input(self, conv_layer):
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((2, 2, 2)), conv_layer, pad=0)


class TestPooling:
    def test_constant_field(self):
        np.testing.assert_array_equal(maxpool2d(np.full((2, 4, 4), 3.0), 2), np.full((2, 2, 2), 3.0))

    def test_forced_max(self):
        np.testing.assert_array_equal(maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2), [[[4.0]]])

    def test_matches_window_scan(self, rng):
        x = rng.normal(size=(3, 6, 6))
        out = maxpool2d(x, 2)
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    assert out[c, i, j] == x[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()

    def test_backward_routes_to_argmax(self):
        x = np.array([[[1.0, 5.0], [3.0, 4.0]]])
        grad = maxpool2d_backward(np.array([[[2.0]]]), x, 2)
        np.testing.assert_array_equal(grad, [[[0.0, 2.0], [0.0, 0.0]]])

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            maxpool2d(np.zeros((1, 2, 2)), 3)

    def test_avgpool_constant(self):
        np.testing.assert_array_equal(avgpool_global(np.ones((3, 4, 4))), [1.0, 1.0, 1.0])

    def test_avgpool_ramp(self):
        assert avgpool_global(np.array([[[0.0, 1.0], [2.0, 3.0]]]))[0] == 1.5

    def test_avgpool_finite_differences(self, rng):
        x = rng.normal(size=(3, 4, 4))
        projection = rng.normal(size=3)
        analytic = avgpool_global_backward(projection, x.shape)
        numeric = numerical_gradient(lambda _: float(avgpool_global(x) @ projection), x)
        assert relative_error(analytic, numeric) < 1e-6

    @pytest.mark.parametrize("value", [np.nan, np.inf])
    def test_non_finite_input(self, value):
        x = np.ones((1, 4, 4))
        x[0, 1, 2] = value
        with pytest.raises(NonFiniteError):
            maxpool2d(x, 2)
        with pytest.raises(NonFiniteError):
            avgpool_global(x)


class TestDenseAndRelu:
    def test_identity_weight(self, rng):
        layer = LayerParams("fc", np.eye(4), np.zeros(4))
        x = rng.normal(size=4)
        np.testing.assert_array_equal(fc_forward(x, layer), x)

    def test_zero_weight_gives_bias(self):
        layer = LayerParams("fc", np.zeros((2, 3)), np.array([1.5, -2.0]))
        np.testing.assert_array_equal(fc_forward(np.ones(3), layer), [1.5, -2.0])

    def test_fc_finite_differences(self, rng):
        layer = LayerParams.linear("fc", 5, 3, rng)
        x = rng.normal(size=5)
        projection = rng.normal(size=3)

        def loss(_):
            return float(fc_forward(x, layer) @ projection)

        grad_input = fc_backward(projection, x, layer)
        assert relative_error(grad_input, numerical_gradient(loss, x)) < 1e-6
        assert relative_error(layer.grad_weights, numerical_gradient(loss, layer.weights)) < 1e-6

    def test_relu_definition(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_relu_dead_region(self):
        x = -np.ones(5)
        assert np.all(relu(x) == 0.0)
        assert np.all(relu_backward(np.ones(5), x) == 0.0)

    def test_relu_finite_differences(self, rng):
        x = rng.normal(size=10)
        x[np.abs(x) < 1e-3] = 0.5
        projection = rng.normal(size=10)
        numeric = numerical_gradient(lambda _: float(relu(x) @ projection), x)
        assert relative_error(relu_backward(projection, x), numeric) < 1e-6

    def test_relu_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            relu(np.array([1.0, np.inf]))
        with pytest.raises(NonFiniteError):
            relu(np.array([np.nan, -1.0]))


class TestSgdStep:
    def test_zero_learning_rate(self, conv_layer):
        before = conv_layer.weights.copy()
        conv_layer.grad_weights[...] = 1.0
        sgd_step([conv_layer], 0.0)
        np.testing.assert_array_equal(conv_layer.weights, before)

    def test_scalar_update(self):
        layer = LayerParams("p", np.array([[1.0]]), np.zeros(1))
        layer.grad_weights[...] = 2.0
        sgd_step([layer], 0.1)
        assert layer.weights[0, 0] == pytest.approx(0.8)
        assert layer.grad_weights[0, 0] == 0.0

    def test_quadratic_decreases(self, rng):
        layer = LayerParams("p", rng.normal(size=(3, 3)), np.zeros(3))
        loss_before = float(np.sum(layer.weights**2))
        layer.grad_weights[...] = 2.0 * layer.weights
        sgd_step([layer], 0.01)
        assert float(np.sum(layer.weights**2)) < loss_before

    def test_non_finite_gradient_names_layer(self, rng):
        good = LayerParams.linear("good", 2, 2, rng)
        bad = LayerParams.linear("bad", 2, 2, rng)
        good.grad_weights[...] = 1.0
        bad.grad_bias[0] = np.inf
        before = good.weights.copy()
        with pytest.raises(TrainingError) as excinfo:
            sgd_step([good, bad], 0.1)
        assert excinfo.value.layer == "bad"
        np.testing.assert_array_equal(good.weights, before)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path, rng, conv_layer):
        dense = LayerParams.linear("test.fc", 4, 2, rng)
        path = save_checkpoint(tmp_path / "ckpt.json", [conv_layer, dense], meta={"step": 3})

        fresh = [LayerParams.conv("test.conv", 2, 4, rng, zero=True), LayerParams.linear("test.fc", 4, 2, rng, zero=True)]
        meta = load_checkpoint(fresh, path)
        assert meta == {"step": 3}
        assert fresh[0].weights.tobytes() == conv_layer.weights.tobytes()
        assert fresh[1].weights.tobytes() == dense.weights.tobytes()
        assert parameter_digest(fresh) == parameter_digest([conv_layer, dense])

    def test_read_checkpoint_returns_named_arrays(self, tmp_path, conv_layer):
        path = save_checkpoint(tmp_path / "ckpt.json", [conv_layer])
        arrays, _ = read_checkpoint(path)
        assert set(arrays) == {"test.conv.weights", "test.conv.bias"}

    def test_shape_mismatch(self, tmp_path, rng, conv_layer):
        path = save_checkpoint(tmp_path / "ckpt.json", [conv_layer])
        other = LayerParams.conv("test.conv", 2, 8, rng)
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint([other], path)
        assert "test.conv.weights" in excinfo.value.data["mismatched"]

    def test_truncated_blob(self, tmp_path, conv_layer):
        path = save_checkpoint(tmp_path / "ckpt.json", [conv_layer])
        blob = path.with_suffix(".bin")
        blob.write_bytes(blob.read_bytes()[:-16])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_offset_past_end_of_blob(self, tmp_path, conv_layer):
        import json

        path = save_checkpoint(tmp_path / "ckpt.json", [conv_layer])
        manifest = json.loads(path.read_text())
        manifest["layers"][-1]["offset"] = manifest["nbytes"] - 8
        path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError) as excinfo:
            read_checkpoint(path)
        assert "overruns" in str(excinfo.value)
