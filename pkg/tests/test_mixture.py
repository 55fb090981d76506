"""Mixture likelihood, priors, unconstrained transforms, analytic gradients."""

import math

import numpy as np
import pytest
from scipy import integrate

from dptwin.mixture import (
    MixtureLayout,
    build_stratified,
    constrain,
    default_component_count,
    grad_log_joint,
    grad_log_likelihood,
    grad_log_prior,
    log_likelihood,
    log_prior,
    log_prior_unconstrained,
    sample_records,
    unconstrain,
)
from dptwin.schema import FeatureSpec, Schema, StructuralRule


def make_layout(kinds, n_components, cards=None):
    features = []
    cards = cards or {}
    for i, kind in enumerate(kinds):
        name = f"f{i}"
        if kind == "continuous":
            features.append(FeatureSpec(name, "continuous", bounds=(0.0, 1.0)))
        elif kind == "binary":
            features.append(FeatureSpec(name, "binary", categories=("a", "b")))
        else:
            c = cards.get(i, 3)
            features.append(
                FeatureSpec(name, "categorical", categories=tuple(f"c{j}" for j in range(c)))
            )
    return MixtureLayout.from_schema(Schema(features=tuple(features)), n_components)


MIXED_KINDS = ["continuous", "binary", "categorical", "continuous"]


def random_point(layout, seed=0, scale=0.7):
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, scale, size=layout.dim)


def random_rows(layout, n, seed=1):
    rng = np.random.default_rng(seed)
    cols = []
    for block in layout.blocks:
        if block.kind == "continuous":
            cols.append(rng.random(n))
        elif block.kind == "binary":
            cols.append(rng.integers(0, 2, n).astype(float))
        else:
            cols.append(rng.integers(0, block.cardinality, n).astype(float))
    return np.column_stack(cols)


class TestLogLikelihoodExamples:
    def test_single_component_single_binary(self):
        layout = make_layout(["binary"], 1)
        u = np.zeros(layout.dim)  # logit 0 -> p = 0.5
        params = constrain(layout, u)
        assert log_likelihood(params, np.array([1.0])) == pytest.approx(math.log(0.5))

    def test_mixture_of_identical_components_collapses(self):
        layout = make_layout(["binary", "continuous"], 2)
        single = make_layout(["binary", "continuous"], 1)
        u1 = random_point(single, seed=3)
        # duplicate the single component twice with equal weights
        u2 = np.zeros(layout.dim)
        u2[0] = 0.0  # equal weight scores
        for j in range(2):
            block = layout.block_params(u2, j)
            block[:] = single.block_params(u1, j)[0]
        row = np.array([1.0, 0.3])
        assert log_likelihood(constrain(layout, u2), row) == pytest.approx(
            log_likelihood(constrain(single, u1), row)
        )

    def test_two_component_binary_direct_sum(self):
        layout = make_layout(["binary"], 2)
        u = np.zeros(layout.dim)
        u[0] = math.log(0.7 / 0.3)  # weights (0.3, 0.7)
        u[1] = math.log(0.2 / 0.8)  # p1 = 0.2
        u[2] = math.log(0.8 / 0.2)  # p2 = 0.8
        val = log_likelihood(constrain(layout, u), np.array([1.0]))
        assert val == pytest.approx(math.log(0.3 * 0.2 + 0.7 * 0.8))

    def test_edge_values_never_diverge(self):
        layout = make_layout(["continuous"], 2)
        u = random_point(layout, seed=5)
        params = constrain(layout, u)
        for x in (0.0, 1.0):
            assert math.isfinite(log_likelihood(params, np.array([x])))

    def test_label_symmetry(self):
        layout = make_layout(MIXED_KINDS, 3)
        params = constrain(layout, random_point(layout, seed=7))
        rows = random_rows(layout, 20, seed=8)
        base = log_likelihood(params, rows)
        permuted = params.permuted([2, 0, 1])
        np.testing.assert_allclose(log_likelihood(permuted, rows), base, atol=1e-10)

    def test_density_integrates_to_one_1d(self):
        layout = make_layout(["continuous"], 3)
        params = constrain(layout, random_point(layout, seed=11, scale=0.5))

        def density(x):
            return math.exp(log_likelihood(params, np.array([x])))

        total, _ = integrate.quad(density, 1e-6, 1 - 1e-6, limit=200)
        assert total == pytest.approx(1.0, abs=1e-3)


class TestLogPrior:
    def test_gamma_prior_at_one(self):
        layout = make_layout(["continuous"], 1)
        u = np.zeros(layout.dim)  # alpha = beta = 1
        # two Gamma(1,1) terms, each -1; K=1 simplex contributes lgamma(1) = 0
        assert log_prior(constrain(layout, u)) == pytest.approx(-2.0)

    def test_uniform_prior_flat_in_p(self):
        layout = make_layout(["binary"], 1)
        vals = [
            log_prior(constrain(layout, np.array([t]))) for t in (-2.0, 0.0, 3.0)
        ]
        assert vals[0] == vals[1] == vals[2]

    def test_single_component_weights_contribute_zero(self):
        layout = make_layout(["binary"], 1)
        assert log_prior(constrain(layout, np.zeros(1))) == pytest.approx(0.0)


class TestUnconstrainedTransform:
    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_round_trip(self, k):
        layout = make_layout(MIXED_KINDS, k, cards={2: 4})
        u = random_point(layout, seed=13)
        params = constrain(layout, u)
        u2 = unconstrain(params)
        # round trip is exact up to the softmax pinning convention
        params2 = constrain(layout, u2)
        np.testing.assert_allclose(params2.weights, params.weights, atol=1e-9)
        for fp1, fp2 in zip(params.feature_params, params2.feature_params):
            for key in fp1:
                np.testing.assert_allclose(fp2[key], fp1[key], atol=1e-9)
        np.testing.assert_allclose(u2, u, atol=1e-9)

    def test_constrained_image_is_valid(self):
        layout = make_layout(MIXED_KINDS, 4)
        for seed in range(5):
            params = constrain(layout, random_point(layout, seed=seed, scale=2.0))
            assert params.weights.sum() == pytest.approx(1.0, abs=1e-9)
            for block, fp in zip(layout.blocks, params.feature_params):
                if block.kind == "continuous":
                    assert (fp["alpha"] > 0).all() and (fp["beta"] > 0).all()
                elif block.kind == "binary":
                    assert ((fp["p"] > 0) & (fp["p"] < 1)).all()
                else:
                    np.testing.assert_allclose(fp["q"].sum(axis=1), 1.0, atol=1e-9)


class TestGradients:
    def finite_difference(self, fn, u, h=1e-5):
        grad = np.zeros_like(u)
        for i in range(u.size):
            up, down = u.copy(), u.copy()
            up[i] += h
            down[i] -= h
            grad[i] = (fn(up) - fn(down)) / (2 * h)
        return grad

    def test_likelihood_gradient_matches_central_differences(self):
        layout = make_layout(MIXED_KINDS, 3, cards={2: 3})
        rows = random_rows(layout, 4, seed=21)
        u = random_point(layout, seed=22)
        _, grads = grad_log_likelihood(layout, u, rows)
        for i in range(rows.shape[0]):
            numeric = self.finite_difference(
                lambda v: log_likelihood(constrain(layout, v), rows[i]), u
            )
            scale = np.maximum(np.abs(numeric), 1.0)
            np.testing.assert_allclose(grads[i] / scale, numeric / scale, atol=1e-4)

    def test_prior_gradient_matches_central_differences(self):
        layout = make_layout(MIXED_KINDS, 3)
        u = random_point(layout, seed=23)
        numeric = self.finite_difference(
            lambda v: log_prior_unconstrained(layout, v), u
        )
        analytic = grad_log_prior(layout, u)
        scale = np.maximum(np.abs(numeric), 1.0)
        np.testing.assert_allclose(analytic / scale, numeric / scale, atol=1e-4)

    def test_duplicated_row_gets_identical_gradients(self):
        layout = make_layout(["binary", "continuous"], 2)
        u = random_point(layout, seed=25)
        row = np.array([1.0, 0.42])
        _, grads = grad_log_likelihood(layout, u, np.stack([row, row]))
        np.testing.assert_array_equal(grads[0], grads[1])

    def test_prior_gradient_independent_of_batch(self):
        layout = make_layout(["binary"], 2)
        u = random_point(layout, seed=26)
        _, prior_a = grad_log_joint(layout, u, random_rows(layout, 3, seed=1))
        _, prior_b = grad_log_joint(layout, u, random_rows(layout, 17, seed=2))
        np.testing.assert_array_equal(prior_a, prior_b)

    def test_total_gradient_is_sum_plus_prior(self):
        layout = make_layout(MIXED_KINDS, 2)
        u = random_point(layout, seed=27)
        rows = random_rows(layout, 6, seed=28)
        per_row, prior = grad_log_joint(layout, u, rows)

        def joint(v):
            params = constrain(layout, v)
            return float(
                np.sum(log_likelihood(params, rows))
            ) + log_prior_unconstrained(layout, v)

        numeric = self.finite_difference(joint, u)
        total = per_row.sum(axis=0) + prior
        scale = np.maximum(np.abs(numeric), 1.0)
        np.testing.assert_allclose(total / scale, numeric / scale, atol=1e-4)


class TestBuildStratified:
    def cohort(self):
        return Schema(
            features=(
                FeatureSpec("age", "continuous", bounds=(0.0, 100.0)),
                FeatureSpec("gender", "binary", categories=("f", "m")),
                FeatureSpec("dead", "binary", categories=("alive", "dead")),
                FeatureSpec("ard", "binary", categories=("no", "yes")),
                FeatureSpec("start", "continuous", bounds=(1990.0, 2013.0)),
                FeatureSpec("dur", "continuous", bounds=(0.0, 23.0)),
            ),
            stratify_by=("gender", "dead"),
            structural_rules=(
                StructuralRule(
                    when=(("dead", "alive"),),
                    force=(("ard", "no"),),
                    derive=(("dur", ("start", -1.0, 2013.0)),),
                ),
            ),
        )

    def test_gender_only_gives_two_mixtures(self):
        schema = Schema(
            features=(
                FeatureSpec("age", "continuous", bounds=(0.0, 100.0)),
                FeatureSpec("gender", "binary", categories=("f", "m")),
            ),
            stratify_by=("gender",),
        )
        skeleton = build_stratified(schema, 4)
        assert len(skeleton.keys) == 2
        assert all(l.n_components == 4 for l in skeleton.layouts.values())

    def test_unstratified_single_mixture(self):
        schema = Schema(features=(FeatureSpec("x", "continuous", bounds=(0, 1)),))
        skeleton = build_stratified(schema, 3)
        assert skeleton.keys == ((),)
        assert skeleton.layouts[()].n_features == 1

    def test_alive_strata_drop_duration_and_outcome(self):
        skeleton = build_stratified(self.cohort(), 2)
        alive = skeleton.feature_names[("f", "alive")]
        dead = skeleton.feature_names[("f", "dead")]
        assert "dur" not in alive and "ard" not in alive and "start" in alive
        assert "dur" in dead and "ard" in dead

    def test_default_component_counts(self):
        assert default_component_count(5) == 10
        assert default_component_count(19) == 10
        assert default_component_count(20) == 20
        assert default_component_count(96) == 20


class TestSampleRecords:
    def test_point_mass_bernoulli_frequency(self):
        layout = make_layout(["binary"], 1)
        p = 0.7
        u = np.array([math.log(p / (1 - p))])
        rng = np.random.default_rng(0)
        draws = sample_records(layout, np.tile(u, (20000, 1)), rng)
        assert draws[:, 0].mean() == pytest.approx(p, abs=3 * math.sqrt(0.21 / 20000))

    def test_one_hot_weights_use_single_component(self):
        layout = make_layout(["binary"], 2)
        u = np.zeros(layout.dim)
        u[0] = 40.0  # weight collapses onto component 2
        u[1] = math.log(1e-9)  # p1 ~ 0: would emit zeros
        u[2] = 40.0  # p2 ~ 1: emits ones
        rng = np.random.default_rng(1)
        draws = sample_records(layout, np.tile(u, (500, 1)), rng)
        assert draws[:, 0].min() == 1.0

    def test_deterministic_given_rng_state(self):
        layout = make_layout(MIXED_KINDS, 3)
        u = np.tile(random_point(layout, seed=31), (50, 1))
        a = sample_records(layout, u, np.random.default_rng(9))
        b = sample_records(layout, u, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)
