"""Dense tensors and trainable layer parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from core.utils.errors import ConfigurationError
from core.utils.validators import validate_finite

# Row-major float64 ndarray; shape and flat data come from numpy.
Tensor = npt.NDArray[np.float64]


def as_tensor(values, name="tensor") -> Tensor:
    """Copy ``values`` into a finite float64 tensor."""
    tensor = np.array(values, dtype=np.float64)
    if tensor.ndim == 0 or 0 in tensor.shape:
        raise ConfigurationError(f"{name} must have positive dimensions, got shape {tensor.shape}")
    return validate_finite(tensor, name)


@dataclass
class LayerParams:
    """Weights, bias and their additive gradient buffers for one layer."""

    name: str
    weights: Tensor
    bias: Tensor
    grad_weights: Tensor = field(default=None, repr=False)
    grad_bias: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = as_tensor(self.weights, f"{self.name}.weights")
        self.bias = as_tensor(self.bias, f"{self.name}.bias")
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)
        if self.bias.ndim != 1 or self.bias.shape[0] != self.weights.shape[0]:
            raise ConfigurationError(
                f"{self.name}: bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} output units"
            )
        if self.grad_weights.shape != self.weights.shape or self.grad_bias.shape != self.bias.shape:
            raise ConfigurationError(f"{self.name}: gradient buffers must match parameter shapes")

    @classmethod
    def conv(cls, name, in_channels, out_channels, rng, kernel=3, zero=False) -> LayerParams:
        """Kaiming fan-in initialised conv kernel [out, in, k, k] with zero bias."""
        shape = (out_channels, in_channels, kernel, kernel)
        if zero:
            weights = np.zeros(shape)
        else:
            fan_in = in_channels * kernel * kernel
            weights = rng.normal(0.0, 1.0, size=shape) * np.sqrt(2.0 / fan_in)
        return cls(name=name, weights=weights, bias=np.zeros(out_channels))

    @classmethod
    def linear(cls, name, in_features, out_features, rng, zero=False) -> LayerParams:
        """Kaiming fan-in initialised dense layer [out, in] with zero bias."""
        if zero:
            weights = np.zeros((out_features, in_features))
        else:
            weights = rng.normal(0.0, 1.0, size=(out_features, in_features)) * np.sqrt(
                2.0 / in_features
            )
        return cls(name=name, weights=weights, bias=np.zeros(out_features))

    @property
    def out_units(self) -> int:
        return int(self.weights.shape[0])

    @property
    def in_units(self) -> int:
        return int(self.weights.shape[1])

    def zero_grad(self):
        self.grad_weights.fill(0.0)
        self.grad_bias.fill(0.0)

    def clone(self, name=None) -> LayerParams:
        """Deep copy, gradients included."""
        return LayerParams(
            name=name or self.name,
            weights=self.weights.copy(),
            bias=self.bias.copy(),
            grad_weights=self.grad_weights.copy(),
            grad_bias=self.grad_bias.copy(),
        )

    def arrays(self):
        """Yield (qualified name, parameter, gradient) pairs."""
        yield f"{self.name}.weights", self.weights, self.grad_weights
        yield f"{self.name}.bias", self.bias, self.grad_bias
