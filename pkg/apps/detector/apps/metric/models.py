from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from django.conf import settings

from core.utils.validators import validate_positive


class MetricKind(StrEnum):
    PEARSON = "pearson"
    COSINE = "cosine"


@dataclass(frozen=True)
class MetricConfig:
    """Temperature, degenerate-vector guard and distance choice."""

    alpha: float = field(default_factory=lambda: settings.FSOD_DEFAULTS["ALPHA"])
    epsilon: float = field(default_factory=lambda: settings.FSOD_DEFAULTS["EPSILON"])
    metric_kind: MetricKind = MetricKind.PEARSON

    def __post_init__(self):
        validate_positive(self.alpha, "alpha")
        validate_positive(self.epsilon, "epsilon")
        object.__setattr__(self, "metric_kind", MetricKind(self.metric_kind))


@dataclass
class SimilarityRow:
    """Per-RoI similarities to every episode prototype and derived confidences."""

    sims: np.ndarray
    confidences: np.ndarray
    predicted_class: int
    metric_kind: MetricKind
    degenerate: bool = field(default=False)

    def foreground_confidence(self, background_index=0) -> float:
        return float(1.0 - self.confidences[background_index])

    def to_dict(self):
        return {
            "sims": [float(x) for x in self.sims],
            "confidences": [float(x) for x in self.confidences],
            "predicted_class": int(self.predicted_class),
            "metric_kind": str(self.metric_kind),
            "degenerate": self.degenerate,
        }
