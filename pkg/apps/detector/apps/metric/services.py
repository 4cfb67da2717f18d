"""
Distances, temperature softmax, classification loss and their gradients.

Similarities lie in [-1, 1] (1 = closest). The Pearson similarity centers
both vectors on their own mean before a cosine-style normalisation, which
makes it invariant to v -> a*v + b for a > 0.

Gradient of the Pearson similarity r = <vc, sc> / (|vc| |sc|), with
vc = v - mean(v) and sc = s - mean(s):

    dr/dv = sc / (|vc| |sc|) - r * vc / |vc|^2

Both terms are already zero-mean, so the centering projection adds nothing
and the gradient sums to zero (shift invariance differentiates through).
The dr/ds form is the same with the roles exchanged. A closed form with a
(1/d - 1) prefactor and 3/2 and 1/2 norm exponents circulates for this
derivative; it does not agree with finite differences and is not used.

The softmax/cross-entropy gradient carries the temperature:
dL/dsims = alpha * (P - onehot).
"""

import numpy as np
from django.conf import settings

from apps.metric.models import MetricConfig, MetricKind, SimilarityRow
from core.utils.errors import DegenerateVectorError, ShapeError, ValidationError

EPSILON = settings.FSOD_DEFAULTS["EPSILON"]
CONFIDENCE_FLOOR = 1e-15


def _check_pair(v, s):
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if v.ndim != 1 or v.shape != s.shape:
        raise ShapeError(f"distance arguments must be 1-D of equal length, got {v.shape} and {s.shape}")
    if v.shape[0] < 2:
        raise ShapeError(f"distance needs at least 2 dimensions, got {v.shape[0]}")
    return v, s


def _normed(x, epsilon, argument, centered):
    x = x - x.mean() if centered else x
    norm = float(np.linalg.norm(x))
    if norm <= epsilon:
        kind = "constant" if centered else "zero"
        raise DegenerateVectorError(
            f"{argument} is a (near) {kind} vector; similarity is undefined",
            argument=argument,
        )
    return x, norm


def cosine_distance(v, s, epsilon=EPSILON) -> float:
    v, s = _check_pair(v, s)
    v, nv = _normed(v, epsilon, "v", centered=False)
    s, ns = _normed(s, epsilon, "s", centered=False)
    return float(np.clip(v @ s / (nv * ns), -1.0, 1.0))


def pearson_distance(v, s, epsilon=EPSILON) -> float:
    v, s = _check_pair(v, s)
    vc, nv = _normed(v, epsilon, "v", centered=True)
    sc, ns = _normed(s, epsilon, "s", centered=True)
    return float(np.clip(vc @ sc / (nv * ns), -1.0, 1.0))


def _grad_first(v, s, epsilon, centered):
    v, s = _check_pair(v, s)
    a, na = _normed(v, epsilon, "v", centered)
    b, nb = _normed(s, epsilon, "s", centered)
    r = a @ b / (na * nb)
    return b / (na * nb) - r * a / na**2


def pearson_grad_query(v, s, epsilon=EPSILON) -> np.ndarray:
    """dPR(v, s)/dv"""
    return _grad_first(v, s, epsilon, centered=True)


def pearson_grad_prototype(v, s, epsilon=EPSILON) -> np.ndarray:
    """dPR(v, s)/ds"""
    try:
        return _grad_first(s, v, epsilon, centered=True)
    except DegenerateVectorError as e:
        # arguments were swapped above; report the caller's name
        argument = "s" if e.argument == "v" else "v"
        raise DegenerateVectorError(e.message.replace(e.argument, argument, 1), argument=argument)


def cosine_grad_query(v, s, epsilon=EPSILON) -> np.ndarray:
    return _grad_first(v, s, epsilon, centered=False)


def cosine_grad_prototype(v, s, epsilon=EPSILON) -> np.ndarray:
    return _grad_first(s, v, epsilon, centered=False)


def distance(v, s, metric_kind=MetricKind.PEARSON, epsilon=EPSILON) -> float:
    if MetricKind(metric_kind) is MetricKind.PEARSON:
        return pearson_distance(v, s, epsilon)
    return cosine_distance(v, s, epsilon)


def temperature_softmax(sims, alpha=10.0) -> np.ndarray:
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 1 or sims.shape[0] < 2:
        raise ShapeError(f"softmax needs a vector of at least 2 similarities, got shape {sims.shape}")
    if not alpha > 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    scaled = alpha * sims
    scaled = scaled - scaled.max()
    weights = np.exp(scaled)
    return weights / weights.sum()


def classification_loss(confidences, true_class) -> float:
    confidences = np.asarray(confidences, dtype=np.float64)
    if not 0 <= true_class < confidences.shape[0]:
        raise ValidationError(f"true_class {true_class} out of range for {confidences.shape[0]} classes")
    return float(-np.log(max(confidences[true_class], CONFIDENCE_FLOOR)))


def loss_grad_sims(confidences, true_class, alpha=10.0) -> np.ndarray:
    """dL_cls/dsims for cross-entropy over a temperature softmax."""
    confidences = np.asarray(confidences, dtype=np.float64)
    if not 0 <= true_class < confidences.shape[0]:
        raise ValidationError(f"true_class {true_class} out of range for {confidences.shape[0]} classes")
    onehot = np.zeros_like(confidences)
    onehot[true_class] = 1.0
    return alpha * (confidences - onehot)


def argmax_lowest(values) -> int:
    """argmax with ties broken toward the lowest index."""
    return int(np.argmax(values))


def similarity_row(v, prototypes, config=None, background_index=0, training=False) -> SimilarityRow:
    """
    Classify one RoI embedding against the episode prototypes.

    At inference a constant RoI embedding is reported as background instead
    of raising; in training the DegenerateVectorError propagates.
    """
    config = config or MetricConfig()
    n_classes = len(prototypes)
    try:
        sims = np.array(
            [distance(v, s, config.metric_kind, config.epsilon) for s in prototypes]
        )
    except DegenerateVectorError as e:
        if training or e.argument != "v":
            raise
        confidences = np.zeros(n_classes)
        confidences[background_index] = 1.0
        return SimilarityRow(
            sims=np.zeros(n_classes),
            confidences=confidences,
            predicted_class=background_index,
            metric_kind=config.metric_kind,
            degenerate=True,
        )

    confidences = temperature_softmax(sims, config.alpha)
    return SimilarityRow(
        sims=sims,
        confidences=confidences,
        predicted_class=argmax_lowest(confidences),
        metric_kind=config.metric_kind,
    )


def _normed_rows(x, epsilon, argument, centered):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"{argument} must be [rows, D>=2], got {x.shape}")
    x = x - x.mean(axis=1, keepdims=True) if centered else x
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms <= epsilon)
    if bad.size:
        raise DegenerateVectorError(
            f"{argument} row(s) {bad.tolist()} are degenerate; similarity is undefined",
            argument=argument,
            data={"rows": bad.tolist()},
        )
    return x, norms


def similarity_matrix(queries, prototypes, metric_kind=MetricKind.PEARSON, epsilon=EPSILON):
    """sims[r, n] between every query row and every prototype row."""
    centered = MetricKind(metric_kind) is MetricKind.PEARSON
    a, na = _normed_rows(queries, epsilon, "v", centered)
    b, nb = _normed_rows(prototypes, epsilon, "s", centered)
    return np.clip(a @ b.T / np.outer(na, nb), -1.0, 1.0)


def similarity_matrix_backward(queries, prototypes, grad_sims, metric_kind=MetricKind.PEARSON, epsilon=EPSILON):
    """Chain dL/dsims[r, n] into (dL/dqueries, dL/dprototypes)."""
    centered = MetricKind(metric_kind) is MetricKind.PEARSON
    a, na = _normed_rows(queries, epsilon, "v", centered)
    b, nb = _normed_rows(prototypes, epsilon, "s", centered)
    grad_sims = np.asarray(grad_sims, dtype=np.float64)
    if grad_sims.shape != (a.shape[0], b.shape[0]):
        raise ShapeError(f"grad_sims shape {grad_sims.shape} != {(a.shape[0], b.shape[0])}")

    scale = np.outer(na, nb)
    r = a @ b.T / scale
    weighted = grad_sims / scale
    grad_queries = weighted @ b - (grad_sims * r).sum(axis=1)[:, None] * a / na[:, None] ** 2
    grad_prototypes = weighted.T @ a - (grad_sims * r).sum(axis=0)[:, None] * b / nb[:, None] ** 2
    return grad_queries, grad_prototypes
