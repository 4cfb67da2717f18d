import math

import numpy as np
import pytest

from apps.metric import services as metric_services
from apps.metric.models import MetricConfig, MetricKind
from apps.metric.services import (
    argmax_lowest,
    classification_loss,
    cosine_distance,
    cosine_grad_prototype,
    cosine_grad_query,
    loss_grad_sims,
    pearson_distance,
    pearson_grad_prototype,
    pearson_grad_query,
    similarity_matrix,
    similarity_matrix_backward,
    similarity_row,
    temperature_softmax,
)
from apps.tensorcore.gradcheck import numerical_gradient, relative_error
from core.utils.errors import DegenerateVectorError, ShapeError, ValidationError


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def pearson_oracle(v, s):
    """Two-pass covariance over standard deviations."""
    n = len(v)
    mean_v = sum(v) / n
    mean_s = sum(s) / n
    cov = sum((a - mean_v) * (b - mean_s) for a, b in zip(v, s)) / n
    sd_v = math.sqrt(sum((a - mean_v) ** 2 for a in v) / n)
    sd_s = math.sqrt(sum((b - mean_s) ** 2 for b in s) / n)
    return cov / (sd_v * sd_s)


class TestDistances:
    def test_cosine_self_similarity(self):
        assert cosine_distance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_cosine_orthogonal(self):
        assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_cosine_value(self):
        assert cosine_distance([1, 2, 3], [1, 2, 4]) == pytest.approx(0.991485, abs=1e-6)

    def test_pearson_self_correlation(self):
        assert pearson_distance([1.0, 5.0, 2.0], [1.0, 5.0, 2.0]) == pytest.approx(1.0)

    def test_pearson_value(self):
        assert pearson_distance([1, 2, 3], [1, 2, 4]) == pytest.approx(0.981981, abs=1e-6)

    def test_shift_separates_the_metrics(self):
        shifted = [2, 3, 4]
        assert pearson_distance(shifted, [1, 2, 4]) == pytest.approx(0.981981, abs=1e-6)
        assert cosine_distance(shifted, [1, 2, 4]) == pytest.approx(0.9725, abs=1e-3)
        assert cosine_distance(shifted, [1, 2, 4]) != pytest.approx(cosine_distance([1, 2, 3], [1, 2, 4]))

    def test_pearson_affine_invariance(self, rng):
        for _ in range(1000):
            v, s = rng.normal(size=(2, 16))
            a, b = rng.uniform(0.1, 10.0), rng.normal() * 5.0
            assert abs(pearson_distance(a * v + b, s) - pearson_distance(v, s)) < 1e-9

    def test_pearson_matches_oracle(self, rng):
        for _ in range(10_000):
            v, s = rng.normal(size=(2, 8))
            assert abs(pearson_distance(v, s) - pearson_oracle(v, s)) < 1e-12

    def test_similarities_bounded(self, rng):
        for _ in range(200):
            v, s = rng.normal(size=(2, 4))
            assert -1.0 <= pearson_distance(v, s) <= 1.0
            assert -1.0 <= cosine_distance(v, s) <= 1.0

    def test_constant_vector_names_argument(self):
        with pytest.raises(DegenerateVectorError) as excinfo:
            pearson_distance([1.0, 2.0, 3.0], [4.0, 4.0, 4.0])
        assert excinfo.value.argument == "s"

    def test_zero_vector_is_degenerate_for_cosine(self):
        with pytest.raises(DegenerateVectorError) as excinfo:
            cosine_distance([0.0, 0.0], [1.0, 2.0])
        assert excinfo.value.argument == "v"

    def test_one_dimension_rejected(self):
        with pytest.raises(ShapeError):
            pearson_distance([1.0], [2.0])


class TestSoftmaxAndLoss:
    def test_uniform(self):
        np.testing.assert_allclose(temperature_softmax([0.3, 0.3, 0.3], 10.0), [1 / 3] * 3)

    def test_temperature_value(self):
        np.testing.assert_allclose(
            temperature_softmax([1.0, 0.5, 0.0], 10.0), [0.993262, 0.006693, 0.000045], atol=1e-6
        )

    def test_shift_invariance(self, rng):
        sims = rng.uniform(-1, 1, size=5)
        np.testing.assert_allclose(temperature_softmax(sims, 10.0), temperature_softmax(sims + 0.7, 10.0))

    def test_sums_to_one(self, rng):
        for _ in range(50):
            assert abs(temperature_softmax(rng.uniform(-1, 1, size=4), 10.0).sum() - 1.0) < 1e-9

    def test_rejects_single_class(self):
        with pytest.raises(ShapeError):
            temperature_softmax([1.0], 10.0)

    def test_rejects_non_positive_alpha(self):
        with pytest.raises(ValidationError):
            temperature_softmax([1.0, 0.0], 0.0)

    def test_perfect_prediction(self):
        assert classification_loss([1.0, 0.0, 0.0], 0) == 0.0

    def test_uniform_loss(self):
        assert classification_loss([1 / 3] * 3, 1) == pytest.approx(1.098612, abs=1e-6)

    def test_loss_of_peaked_softmax(self):
        confidences = temperature_softmax([1.0, 0.5, 0.0], 10.0)
        assert classification_loss(confidences, 0) == pytest.approx(0.006761, abs=1e-6)

    def test_loss_is_finite_at_zero_confidence(self):
        assert np.isfinite(classification_loss([1.0, 0.0], 1))

    def test_loss_gradient_at_minimum(self):
        np.testing.assert_array_equal(loss_grad_sims([0.0, 1.0, 0.0], 1), np.zeros(3))

    def test_loss_gradient_sums_to_zero(self, rng):
        confidences = temperature_softmax(rng.uniform(-1, 1, size=4), 10.0)
        assert abs(loss_grad_sims(confidences, 2).sum()) < 1e-12

    def test_argmax_ties_go_low(self):
        assert argmax_lowest([0.2, 0.4, 0.4]) == 1


class TestGradients:
    def test_query_gradient_matches_finite_differences(self, rng):
        v, s = rng.normal(size=(2, 32))
        numeric = numerical_gradient(lambda x: pearson_distance(x, s), v.copy())
        assert relative_error(pearson_grad_query(v, s), numeric) < 1e-6

    def test_prototype_gradient_matches_finite_differences(self, rng):
        v, s = rng.normal(size=(2, 32))
        numeric = numerical_gradient(lambda x: pearson_distance(v, x), s.copy())
        assert relative_error(pearson_grad_prototype(v, s), numeric) < 1e-6

    def test_cosine_gradients_match_finite_differences(self, rng):
        v, s = rng.normal(size=(2, 16))
        assert relative_error(cosine_grad_query(v, s), numerical_gradient(lambda x: cosine_distance(x, s), v.copy())) < 1e-6
        assert relative_error(cosine_grad_prototype(v, s), numerical_gradient(lambda x: cosine_distance(v, x), s.copy())) < 1e-6

    def test_prototype_gradient_is_swapped_query_gradient(self, rng):
        v, s = rng.normal(size=(2, 12))
        np.testing.assert_allclose(pearson_grad_prototype(v, s), pearson_grad_query(s, v), atol=1e-12)

    def test_stationary_at_maximum(self, rng):
        s = rng.normal(size=10)
        v = 2.5 * s + 1.0
        for _ in range(20):
            direction = rng.normal(size=10)
            assert pearson_grad_query(v, s) @ direction <= 1e-9
            assert pearson_grad_prototype(v, s) @ direction <= 1e-9

    def test_gradient_shift_invariant(self, rng):
        v, s = rng.normal(size=(2, 12))
        np.testing.assert_allclose(pearson_grad_query(v, s), pearson_grad_query(v + 3.0, s), atol=1e-9)

    def test_full_chain(self, rng):
        v = rng.normal(size=16)
        prototypes = rng.normal(size=(3, 16))

        def loss(x):
            sims = [pearson_distance(x, p) for p in prototypes]
            return classification_loss(temperature_softmax(sims, 10.0), 2)

        sims = [pearson_distance(v, p) for p in prototypes]
        grad_sims = loss_grad_sims(temperature_softmax(sims, 10.0), 2, 10.0)
        analytic = sum(g * pearson_grad_query(v, p) for g, p in zip(grad_sims, prototypes))
        assert relative_error(analytic, numerical_gradient(loss, v.copy())) < 1e-6

    def test_degenerate_prototype_gradient_names_prototype(self):
        with pytest.raises(DegenerateVectorError) as excinfo:
            pearson_grad_prototype([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
        assert excinfo.value.argument == "s"


class TestSimilarityRows:
    def test_row_confidences(self, rng):
        prototypes = rng.normal(size=(3, 8))
        row = similarity_row(rng.normal(size=8), prototypes)
        assert abs(row.confidences.sum() - 1.0) < 1e-9
        assert row.predicted_class == int(np.argmax(row.confidences))
        assert row.metric_kind is MetricKind.PEARSON

    def test_degenerate_roi_falls_back_to_background(self, rng):
        row = similarity_row(np.full(8, 2.0), rng.normal(size=(3, 8)))
        assert row.degenerate
        assert row.predicted_class == 0
        assert row.foreground_confidence() == 0.0

    def test_degenerate_roi_raises_in_training(self, rng):
        with pytest.raises(DegenerateVectorError):
            similarity_row(np.full(8, 2.0), rng.normal(size=(3, 8)), training=True)

    def test_cosine_config(self, rng):
        prototypes = rng.normal(size=(2, 8))
        v = rng.normal(size=8)
        row = similarity_row(v, prototypes, MetricConfig(metric_kind="cosine"))
        assert row.sims[1] == pytest.approx(cosine_distance(v, prototypes[1]))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            MetricConfig(alpha=0.0)

    def test_config_defaults_follow_settings(self, settings):
        assert MetricConfig().alpha == 10.0
        settings.FSOD_DEFAULTS = {**settings.FSOD_DEFAULTS, "ALPHA": 5.0, "EPSILON": 1e-9}
        config = MetricConfig()
        assert (config.alpha, config.epsilon) == (5.0, 1e-9)

    @pytest.mark.parametrize("kind", ["pearson", "cosine"])
    def test_matrix_matches_pairwise(self, rng, kind):
        queries, prototypes = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
        sims = similarity_matrix(queries, prototypes, kind)
        for r in range(5):
            for n in range(3):
                assert sims[r, n] == pytest.approx(metric_services.distance(queries[r], prototypes[n], kind), abs=1e-12)

    @pytest.mark.parametrize("kind", ["pearson", "cosine"])
    def test_matrix_backward_matches_pairwise_gradients(self, rng, kind):
        queries, prototypes = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
        grad_sims = rng.normal(size=(4, 3))
        grad_q, grad_p = similarity_matrix_backward(queries, prototypes, grad_sims, kind)
        query_grad = pearson_grad_query if kind == "pearson" else cosine_grad_query
        proto_grad = pearson_grad_prototype if kind == "pearson" else cosine_grad_prototype
        for r in range(4):
            expected = sum(grad_sims[r, n] * query_grad(queries[r], prototypes[n]) for n in range(3))
            np.testing.assert_allclose(grad_q[r], expected, atol=1e-12)
        for n in range(3):
            expected = sum(grad_sims[r, n] * proto_grad(queries[r], prototypes[n]) for r in range(4))
            np.testing.assert_allclose(grad_p[n], expected, atol=1e-12)
