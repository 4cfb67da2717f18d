import numpy as np

from core.utils.errors import NonFiniteError, ValidationError


def validate_finite(value, name="tensor"):
    """Raise NonFiniteError if the array holds NaN or Inf."""
    if not np.all(np.isfinite(value)):
        bad = int(np.size(value) - np.count_nonzero(np.isfinite(value)))
        raise NonFiniteError(
            f"{name} contains {bad} non-finite value(s)",
            data={"name": name, "count": bad},
        )
    return value


def validate_positive(value, name):
    """Validate that a scalar setting is strictly positive"""
    if not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value}")
    return value


def validate_fraction(value, name, upper=1.0):
    """Validate that a scalar lies in [0, upper]"""
    if not 0.0 <= value <= upper:
        raise ValidationError(f"{name} must be in [0, {upper}], got {value}")
    return value


def validate_box(box, name="box"):
    """Validate an (x, y, w, h) box with positive extents"""
    if len(box) != 4:
        raise ValidationError(f"{name} must have 4 components, got {len(box)}")
    if not all(np.isfinite(box)):
        raise ValidationError(f"{name} has non-finite components: {tuple(box)}")
    if box[2] <= 0 or box[3] <= 0:
        raise ValidationError(f"{name} must have positive width and height: {tuple(box)}")
    return box
