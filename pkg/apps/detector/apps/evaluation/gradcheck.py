"""
Finite-difference verification of every analytic gradient.

Metric suites check the full classification chain (distance -> temperature
softmax -> cross-entropy) against central differences for the query vector
and one prototype per draw, at each requested dimension. Layer suites check
each tensorcore backward on small random shapes; the inner-loop and box-head
suites check composed backward passes at sampled coordinates.

Analytic gradients are looked up on the metric module at call time so a
replaced implementation is what gets verified.
"""

import logging

import numpy as np

from apps.episodic.services import BoxHeadService, smooth_l1_grad, smooth_l1_rows
from apps.evaluation.models import GradcheckReport, SuiteResult
from apps.meta.models import MRModule
from apps.meta.services import MRService
from apps.metric import services as metric_services
from apps.tensorcore import layers
from apps.tensorcore.gradcheck import numerical_gradient, numerical_gradient_at, relative_error
from apps.tensorcore.models import LayerParams

logger = logging.getLogger("fsod.evaluation")

TOLERANCE = 1e-4
ALPHA = 10.0
N_CLASSES = 3
COMPOSED_TRIALS = 20
SAMPLED_COORDINATES = 12

GRADIENTS = {
    "pearson": ("pearson_grad_query", "pearson_grad_prototype"),
    "cosine": ("cosine_grad_query", "cosine_grad_prototype"),
}


def _chain_loss(kind, v, prototypes, true_class):
    sims = [metric_services.distance(v, s, kind) for s in prototypes]
    confidences = metric_services.temperature_softmax(sims, ALPHA)
    return metric_services.classification_loss(confidences, true_class)


def check_metric_chain(kind, dims, trials, rng) -> float:
    query_name, prototype_name = GRADIENTS[kind]
    worst = 0.0
    for dim in dims:
        for trial in range(trials):
            v = rng.normal(size=dim)
            prototypes = rng.normal(size=(N_CLASSES, dim))
            true_class = int(rng.integers(N_CLASSES))
            checked = trial % N_CLASSES

            sims = [metric_services.distance(v, s, kind) for s in prototypes]
            confidences = metric_services.temperature_softmax(sims, ALPHA)
            grad_sims = metric_services.loss_grad_sims(confidences, true_class, ALPHA)
            grad_query = getattr(metric_services, query_name)
            grad_prototype = getattr(metric_services, prototype_name)

            analytic_v = sum(grad_sims[n] * grad_query(v, prototypes[n]) for n in range(N_CLASSES))
            analytic_s = grad_sims[checked] * grad_prototype(v, prototypes[checked])
            numeric_v = numerical_gradient(lambda x: _chain_loss(kind, x, prototypes, true_class), v)
            numeric_s = numerical_gradient(
                lambda _: _chain_loss(kind, v, prototypes, true_class), prototypes[checked]
            )
            worst = max(worst, relative_error(analytic_v, numeric_v), relative_error(analytic_s, numeric_s))
    return worst


def _projected(forward, shape, rng):
    projection = rng.normal(size=shape)
    return projection, lambda: float(np.sum(forward() * projection))


def check_conv2d(trials, rng) -> float:
    worst = 0.0
    for _ in range(trials):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=(2, 2, 5, 5))
        layer = LayerParams.conv("check.conv", 2, 3, rng)
        layer.bias[...] = rng.normal(size=3)
        out_shape = layers.conv2d_forward(x, layer, stride, pad).shape
        projection, loss = _projected(lambda: layers.conv2d_forward(x, layer, stride, pad), out_shape, rng)

        grad_x = layers.conv2d_backward(projection, x, layer, stride, pad)
        worst = max(
            worst,
            relative_error(grad_x, numerical_gradient(lambda _: loss(), x)),
            relative_error(layer.grad_weights, numerical_gradient(lambda _: loss(), layer.weights)),
            relative_error(layer.grad_bias, numerical_gradient(lambda _: loss(), layer.bias)),
        )
    return worst


def check_maxpool2d(trials, rng) -> float:
    worst = 0.0
    for _ in range(trials):
        # distinct values 0.01 apart: no ties within a finite-difference step
        x = rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.01
        projection, loss = _projected(lambda: layers.maxpool2d(x, 2), (2, 3, 2, 2), rng)
        analytic = layers.maxpool2d_backward(projection, x, 2)
        worst = max(worst, relative_error(analytic, numerical_gradient(lambda _: loss(), x)))
    return worst


def check_avgpool(trials, rng) -> float:
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(2, 3, 4, 5))
        projection, loss = _projected(lambda: layers.avgpool_global(x), (2, 3), rng)
        analytic = layers.avgpool_global_backward(projection, x.shape)
        worst = max(worst, relative_error(analytic, numerical_gradient(lambda _: loss(), x)))
    return worst


def check_fc(trials, rng) -> float:
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(3, 5))
        layer = LayerParams.linear("check.fc", 5, 4, rng)
        layer.bias[...] = rng.normal(size=4)
        projection, loss = _projected(lambda: layers.fc_forward(x, layer), (3, 4), rng)
        grad_x = layers.fc_backward(projection, x, layer)
        worst = max(
            worst,
            relative_error(grad_x, numerical_gradient(lambda _: loss(), x)),
            relative_error(layer.grad_weights, numerical_gradient(lambda _: loss(), layer.weights)),
            relative_error(layer.grad_bias, numerical_gradient(lambda _: loss(), layer.bias)),
        )
    return worst


def check_relu(trials, rng) -> float:
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(4, 6))
        x[np.abs(x) < 1e-3] = 0.5
        projection, loss = _projected(lambda: layers.relu(x), x.shape, rng)
        analytic = layers.relu_backward(projection, x)
        worst = max(worst, relative_error(analytic, numerical_gradient(lambda _: loss(), x)))
    return worst


def check_inner_loop(trials, rng) -> float:
    """Inner cross-entropy gradient w.r.t. conv1/conv2/fc_head at sampled coordinates."""
    worst = 0.0
    for _ in range(trials):
        mr = MRModule.initialise(2, N_CLASSES, rng)
        batch = rng.normal(size=(N_CLASSES * 2, 2, 4, 4))
        rows = np.repeat(np.arange(N_CLASSES), 2)
        label_perm = tuple(int(i) for i in rng.permutation(N_CLASSES))

        MRService.inner_loss_and_grads(mr, batch, rows, label_perm)
        for layer in mr.layers():
            indices = rng.choice(layer.weights.size, size=min(SAMPLED_COORDINATES, layer.weights.size), replace=False)
            numeric = numerical_gradient_at(
                lambda _: MRService.inner_loss_and_grads(mr, batch, rows, label_perm, with_grads=False),
                layer.weights,
                indices,
            )
            worst = max(worst, relative_error(layer.grad_weights.flat[indices], numeric))
    return worst


def check_box_head(trials, rng) -> float:
    """Box head gradient through smooth-L1 at sampled coordinates."""
    worst = 0.0
    for _ in range(trials):
        maps = rng.normal(size=(3, 4, 4, 4))
        box_conv = LayerParams.conv("check.box_conv", 4, 4, rng)
        box_fc = LayerParams.linear("check.box_fc", 4, 4, rng)
        targets = rng.normal(size=(3, 4)) * 2.0

        def loss(_):
            deltas, _ = BoxHeadService.forward(maps, box_conv, box_fc)
            return float(smooth_l1_rows(deltas - targets).sum())

        deltas, trace = BoxHeadService.forward(maps, box_conv, box_fc)
        grad_maps = BoxHeadService.backward(smooth_l1_grad(deltas - targets), trace, box_conv, box_fc)
        for array, analytic in ((box_conv.weights, box_conv.grad_weights), (box_fc.weights, box_fc.grad_weights), (maps, grad_maps)):
            indices = rng.choice(array.size, size=min(SAMPLED_COORDINATES, array.size), replace=False)
            numeric = numerical_gradient_at(loss, array, indices)
            worst = max(worst, relative_error(analytic.flat[indices], numeric))
    return worst


def run_gradcheck(seed=0, dims=(8, 32, 128), trials=400, tolerance=TOLERANCE) -> GradcheckReport:
    """Run every suite; ``trials`` draws per dimension for metric suites, per suite otherwise."""
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in dims]
    composed = min(trials, COMPOSED_TRIALS)
    suites = [
        ("metric.pearson_chain", trials * len(dims), lambda: check_metric_chain("pearson", dims, trials, rng)),
        ("metric.cosine_chain", trials * len(dims), lambda: check_metric_chain("cosine", dims, trials, rng)),
        ("tensorcore.conv2d", trials, lambda: check_conv2d(trials, rng)),
        ("tensorcore.maxpool2d", trials, lambda: check_maxpool2d(trials, rng)),
        ("tensorcore.avgpool_global", trials, lambda: check_avgpool(trials, rng)),
        ("tensorcore.fc", trials, lambda: check_fc(trials, rng)),
        ("tensorcore.relu", trials, lambda: check_relu(trials, rng)),
        ("meta.inner_loop", composed, lambda: check_inner_loop(composed, rng)),
        ("episodic.box_head", composed, lambda: check_box_head(composed, rng)),
    ]

    report = GradcheckReport(seed=seed, dims=dims, trials=trials, tolerance=tolerance)
    for name, count, check in suites:
        error = check() if count else 0.0
        result = SuiteResult(name=name, trials=count, max_rel_error=error, tolerance=tolerance)
        report.suites.append(result)
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"gradcheck {name}: {count} trials, max rel. error {error:.3e}")
    if report.empty:
        logger.warning("gradcheck ran no trials")
    return report
