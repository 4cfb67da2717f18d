"""
Layer operations with explicit backward passes.

Every op accepts a single sample ([C, H, W] or [D]) or a batch with a
leading N axis and returns the same rank it was given. Backward functions
take the saved forward input, accumulate parameter gradients into the
layer's buffers (+=) and return the gradient with respect to the input.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from apps.tensorcore.models import LayerParams, Tensor
from core.utils.errors import ConfigurationError, ShapeError, StateError
from core.utils.validators import validate_finite


def _as_batch(array, rank, name):
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == rank:
        return array[None], True
    if array.ndim == rank + 1:
        return array, False
    raise ShapeError(f"{name} must have rank {rank} or {rank + 1}, got shape {array.shape}")


def output_extent(size, kernel, stride, pad):
    """floor((size + 2*pad - kernel) / stride) + 1"""
    return (size + 2 * pad - kernel) // stride + 1


def _conv_geometry(x, params, stride, pad):
    weights = params.weights
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ConfigurationError(f"{params.name}: conv kernel must be [out, in, k, k], got {weights.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"{params.name}: invalid stride {stride} / pad {pad}")
    c_out, c_in, k, _ = weights.shape
    if x.shape[1] != c_in:
        raise ConfigurationError(
            f"{params.name}: input has {x.shape[1]} channels, kernel expects {c_in}"
        )
    height, width = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    if height < k or width < k:
        raise ShapeError(
            f"{params.name}: spatial extent {x.shape[2]}x{x.shape[3]} with pad {pad} "
            f"is smaller than kernel {k}"
        )
    return c_out, c_in, k, output_extent(x.shape[2], k, stride, pad), output_extent(x.shape[3], k, stride, pad)


def _im2col(x, k, stride, pad):
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, h_out, w_out = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k * k)


def conv2d_forward(input: Tensor, params: LayerParams, stride: int = 1, pad: int = 0) -> Tensor:
    x, single = _as_batch(input, 3, "conv2d input")
    c_out, _, k, h_out, w_out = _conv_geometry(x, params, stride, pad)

    cols = _im2col(x, k, stride, pad)
    out = cols @ params.weights.reshape(c_out, -1).T + params.bias
    out = np.ascontiguousarray(out.reshape(x.shape[0], h_out, w_out, c_out).transpose(0, 3, 1, 2))

    validate_finite(out, f"{params.name} output")
    return out[0] if single else out


def conv2d_backward(grad_out: Tensor, saved_input: Tensor, params: LayerParams, stride: int = 1, pad: int = 0) -> Tensor:
    if saved_input is None:
        raise StateError(f"{params.name}: conv2d_backward needs the saved forward input")
    x, single = _as_batch(saved_input, 3, "conv2d saved input")
    g, _ = _as_batch(grad_out, 3, "conv2d grad_out")
    c_out, c_in, k, h_out, w_out = _conv_geometry(x, params, stride, pad)
    if g.shape != (x.shape[0], c_out, h_out, w_out):
        raise ShapeError(
            f"{params.name}: grad_out shape {g.shape} does not match forward output "
            f"{(x.shape[0], c_out, h_out, w_out)}"
        )

    cols = _im2col(x, k, stride, pad)
    g_rows = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
    params.grad_weights += (g_rows.T @ cols).reshape(params.weights.shape)
    params.grad_bias += g_rows.sum(axis=0)

    d_cols = (g_rows @ params.weights.reshape(c_out, -1)).reshape(x.shape[0], h_out, w_out, c_in, k, k)
    d_padded = np.zeros((x.shape[0], c_in, x.shape[2] + 2 * pad, x.shape[3] + 2 * pad))
    row_stop, col_stop = stride * (h_out - 1) + 1, stride * (w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            d_padded[:, :, i : i + row_stop : stride, j : j + col_stop : stride] += d_cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    grad_input = d_padded[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]]

    validate_finite(grad_input, f"{params.name} grad_input")
    grad_input = np.ascontiguousarray(grad_input)
    return grad_input[0] if single else grad_input


def _pool_windows(x, window, stride):
    if window < 1 or stride < 1:
        raise ConfigurationError(f"maxpool2d: invalid window {window} / stride {stride}")
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"maxpool2d: window {window} exceeds spatial extent {x.shape[2:]}")
    return sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]


def maxpool2d(input: Tensor, window: int, stride: int = None) -> Tensor:
    x, single = _as_batch(input, 3, "maxpool2d input")
    windows = _pool_windows(x, window, stride or window)
    out = np.ascontiguousarray(windows.max(axis=(-2, -1)))
    validate_finite(out, "maxpool2d output")
    return out[0] if single else out


def maxpool2d_backward(grad_out: Tensor, saved_input: Tensor, window: int, stride: int = None) -> Tensor:
    """Route each output gradient to the first argmax of its window."""
    if saved_input is None:
        raise StateError("maxpool2d_backward needs the saved forward input")
    stride = stride or window
    x, single = _as_batch(saved_input, 3, "maxpool2d saved input")
    g, _ = _as_batch(grad_out, 3, "maxpool2d grad_out")
    windows = _pool_windows(x, window, stride)
    if g.shape != windows.shape[:4]:
        raise ShapeError(f"maxpool2d: grad_out shape {g.shape} != output shape {windows.shape[:4]}")

    argmax = windows.reshape(*windows.shape[:4], window * window).argmax(axis=-1)
    h_out, w_out = argmax.shape[2:]
    row_stop, col_stop = stride * (h_out - 1) + 1, stride * (w_out - 1) + 1
    grad_input = np.zeros_like(x)
    for di in range(window):
        for dj in range(window):
            routed = np.where(argmax == di * window + dj, g, 0.0)
            grad_input[:, :, di : di + row_stop : stride, dj : dj + col_stop : stride] += routed
    return grad_input[0] if single else grad_input


def avgpool_global(input: Tensor) -> Tensor:
    x, single = _as_batch(input, 3, "avgpool input")
    out = x.mean(axis=(2, 3))
    validate_finite(out, "avgpool output")
    return out[0] if single else out


def avgpool_global_backward(grad_out: Tensor, input_shape) -> Tensor:
    input_shape = tuple(input_shape)
    if len(input_shape) not in (3, 4):
        raise ShapeError(f"avgpool: input shape must have rank 3 or 4, got {input_shape}")
    height, width = input_shape[-2:]
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != input_shape[:-2]:
        raise ShapeError(f"avgpool: grad_out shape {g.shape} != {input_shape[:-2]}")
    return np.broadcast_to(g[..., None, None] / (height * width), input_shape).copy()


def fc_forward(input: Tensor, params: LayerParams) -> Tensor:
    x, single = _as_batch(input, 1, "fc input")
    if params.weights.ndim != 2 or x.shape[1] != params.weights.shape[1]:
        raise ConfigurationError(
            f"{params.name}: input width {x.shape[1]} does not match weight shape {params.weights.shape}"
        )
    out = x @ params.weights.T + params.bias
    validate_finite(out, f"{params.name} output")
    return out[0] if single else out


def fc_backward(grad_out: Tensor, saved_input: Tensor, params: LayerParams) -> Tensor:
    if saved_input is None:
        raise StateError(f"{params.name}: fc_backward needs the saved forward input")
    x, single = _as_batch(saved_input, 1, "fc saved input")
    g, _ = _as_batch(grad_out, 1, "fc grad_out")
    if g.shape != (x.shape[0], params.out_units):
        raise ShapeError(f"{params.name}: grad_out shape {g.shape} does not match forward output")

    params.grad_weights += g.T @ x
    params.grad_bias += g.sum(axis=0)
    grad_input = g @ params.weights

    validate_finite(grad_input, f"{params.name} grad_input")
    return grad_input[0] if single else grad_input


def relu(input: Tensor) -> Tensor:
    return validate_finite(np.maximum(np.asarray(input, dtype=np.float64), 0.0), "relu output")


def relu_backward(grad_out: Tensor, saved_input: Tensor) -> Tensor:
    if saved_input is None:
        raise StateError("relu_backward needs the saved forward input")
    return np.where(np.asarray(saved_input) > 0.0, grad_out, 0.0)
