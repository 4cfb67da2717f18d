"""Parameter updates."""

import logging
from typing import Iterable

import numpy as np

from apps.tensorcore.models import LayerParams
from core.utils.errors import TrainingError, ValidationError

logger = logging.getLogger("fsod.training")


def zero_grads(params: Iterable[LayerParams]) -> None:
    for layer in params:
        layer.zero_grad()


def sgd_step(params: Iterable[LayerParams], lr: float) -> None:
    """
    Plain SGD: p <- p - lr * grad(p) for every parameter, then zero grads.

    All gradients are checked before any parameter moves, so a non-finite
    gradient leaves the whole stack untouched.
    """
    params = list(params)
    if not np.isfinite(lr) or lr < 0:
        raise ValidationError(f"learning rate must be finite and >= 0, got {lr}")

    for layer in params:
        for qualified, _, grad in layer.arrays():
            if not np.all(np.isfinite(grad)):
                logger.error(f"Non-finite gradient in {qualified}")
                raise TrainingError(
                    f"non-finite gradient in layer {layer.name} ({qualified})",
                    layer=layer.name,
                )

    if lr > 0:
        for layer in params:
            layer.weights -= lr * layer.grad_weights
            layer.bias -= lr * layer.grad_bias
    zero_grads(params)
