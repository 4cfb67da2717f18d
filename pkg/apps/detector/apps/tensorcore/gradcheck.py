"""Central finite-difference helpers for verifying analytic gradients."""

import numpy as np

DEFAULT_EPS = 1e-5


def numerical_gradient(func, x, eps=DEFAULT_EPS):
    """
    Central differences of a scalar function.

    grad[i] = (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)

    ``x`` is perturbed in place and restored, so ``func`` may close over it
    (e.g. a layer's weight array).
    """
    grad = np.zeros(x.shape)
    for i in range(x.size):
        original = x.flat[i]
        x.flat[i] = original + eps
        f_plus = float(func(x))
        x.flat[i] = original - eps
        f_minus = float(func(x))
        x.flat[i] = original
        grad.flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def numerical_gradient_at(func, x, indices, eps=DEFAULT_EPS):
    """Central differences at selected flat ``indices`` only."""
    values = []
    for i in indices:
        original = x.flat[i]
        x.flat[i] = original + eps
        f_plus = float(func(x))
        x.flat[i] = original - eps
        f_minus = float(func(x))
        x.flat[i] = original
        values.append((f_plus - f_minus) / (2.0 * eps))
    return np.array(values)


def relative_error(analytic, numeric, floor=1e-8):
    """max|a - n| / max(max|a|, max|n|, floor)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)
