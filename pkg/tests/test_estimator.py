import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffest.errors import DegenerateNormalizer, NonFiniteResult, ZeroDenominator
from diffest.estfun import DIAGNOSTIC_CATALOG, EstimatingFunctionSpec, builtin_estfun
from diffest.estimator import (
    CONVERGED,
    DEGENERATE_W,
    MULTIPLE_ROOTS,
    NO_ROOT,
    RootSolverConfig,
    Sample,
    compute_What,
    eval_dG,
    eval_G,
    eval_G_grid,
    estimate,
    fisher_consistency_check,
    limit_functionals,
    mixing_W,
    normalized_stat,
    solve,
)
from diffest.model_core import builtin_model
from diffest.path_sim import PathGrid, SimConfig, simulate_path, subsample


@pytest.fixture
def ou():
    return builtin_model("ou_sqrt_theta")


@pytest.fixture
def ergodic():
    return builtin_model("ergodic_sec4")


@pytest.fixture
def qv(ou):
    return builtin_estfun("qv", ou)


@pytest.fixture(scope="module")
def ergodic_path():
    return simulate_path(builtin_model("ergodic_sec4"), 1.0, SimConfig(fine_steps=20_000, seed=99))


@pytest.fixture(scope="module")
def ou_path():
    return simulate_path(builtin_model("ou_sqrt_theta"), 1.0, SimConfig(fine_steps=20_000, seed=98))


def two_root_spec():
    """G_n(theta) = (theta - 0.5)(theta - 1.5) for a one-increment sample."""
    return EstimatingFunctionSpec(
        "two_roots", lambda t, y, x, th: (th - 0.5) * (th - 1.5) + 0.0 * y
    )


class TestSample:
    def test_default_delta(self):
        sample = Sample(np.zeros(101))
        assert sample.n == 100 and sample.delta * sample.n == 1.0

    def test_non_finite(self):
        with pytest.raises(NonFiniteResult):
            Sample([0.0, math.nan])


class TestEvalG:
    def test_empty_sum(self, qv):
        assert eval_G(qv, Sample([0.3]), 1.0) == 0.0

    @pytest.mark.parametrize("theta", [0.01, 0.05, 1.0, 1.99])
    def test_qv_hand_computation(self, qv, theta):
        sample = Sample([0.0, 0.1, -0.1], delta=0.5)
        assert eval_G(qv, sample, theta) == pytest.approx(0.05 - theta, abs=1e-15)

    def test_sec4_single_increment(self, ergodic):
        spec = builtin_estfun("sec4_g", ergodic)
        assert eval_G(spec, Sample([1.0, 1.0], delta=0.5), 1.0) == pytest.approx(0.75)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_term_reports_index(self):
        spec = EstimatingFunctionSpec("log", lambda t, y, x, th: np.log(y))
        with pytest.raises(NonFiniteResult) as info:
            eval_G(spec, Sample([1.0, 1.0, -1.0, 1.0]), 1.0)
        assert info.value.index == 1

    def test_grid_matches_scalar(self, ergodic, ergodic_path):
        spec = builtin_estfun("sec4_h", ergodic)
        sample = Sample.from_path(subsample(ergodic_path, 1000))
        thetas = np.linspace(0.1, 1.9, 7)
        grid = eval_G_grid(spec, sample, thetas)
        assert np.allclose(grid, [eval_G(spec, sample, t) for t in thetas], rtol=1e-12)


class TestEvalDG:
    def test_qv_is_minus_total_time(self, qv):
        sample = Sample(np.random.default_rng(0).standard_normal(51))
        assert eval_dG(qv, sample, 0.7) == pytest.approx(-1.0, rel=1e-12)

    def test_theta_free(self):
        spec = EstimatingFunctionSpec("free", lambda t, y, x, th: (y - x) ** 2 + 0.0 * th)
        assert eval_dG(spec, Sample([0.0, 1.0, 3.0]), 1.0) == pytest.approx(0.0, abs=1e-6)

    def test_analytic_matches_numeric(self, ergodic, ergodic_path):
        spec = builtin_estfun("sec4_g", ergodic)
        numeric = EstimatingFunctionSpec("numeric", spec.g)
        sample = Sample.from_path(subsample(ergodic_path, 1000))
        for theta in (0.3, 1.0, 1.7):
            assert eval_dG(numeric, sample, theta) == pytest.approx(eval_dG(spec, sample, theta), rel=1e-6)


class TestSolve:
    def test_qv_root(self, qv):
        result = solve(qv, Sample([0.0, 0.1, -0.1], delta=0.5))
        assert result.status == CONVERGED
        assert result.theta_hat == pytest.approx(0.05, abs=1e-10)
        assert result.n_roots_found == 1

    def test_no_root(self, qv):
        # squared increments sum to 3
        result = solve(qv, Sample([0.0, 1.0, 1.0 + math.sqrt(2.0)]))
        assert result.status == NO_ROOT
        assert result.theta_hat is None and result.n_roots_found == 0

    def test_tie_goes_left(self):
        result = solve(two_root_spec(), Sample([0.0, 0.0]), RootSolverConfig(reference=1.0))
        assert result.status == MULTIPLE_ROOTS
        assert result.n_roots_found == 2
        assert result.theta_hat == pytest.approx(0.5, abs=1e-10)

    def test_nearest_policy(self):
        result = solve(two_root_spec(), Sample([0.0, 0.0]), RootSolverConfig(reference=1.4))
        assert result.theta_hat == pytest.approx(1.5, abs=1e-10)

    def test_leftmost_policy(self):
        result = solve(two_root_spec(), Sample([0.0, 0.0]), RootSolverConfig(reference=1.4, policy="leftmost"))
        assert result.theta_hat == pytest.approx(0.5, abs=1e-10)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RootSolverConfig(search_lo=1.0, search_hi=0.5)
        with pytest.raises(ValueError):
            RootSolverConfig(scan_points=8)

    def test_result_json_nulls(self, qv):
        doc = json.loads(json.dumps(solve(qv, Sample([0.0, 2.0])).to_dict()))
        assert doc == {"theta_hat": None, "w_hat": None, "status": "no_root",
                       "n_roots_found": 0, "g_at_root": None, "iterations": 0}

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-0.3, 0.3), min_size=2, max_size=60))
    def test_qv_closed_form(self, increments):
        values = np.concatenate([[0.0], np.cumsum(increments)])
        sample = Sample(values)
        spec = builtin_estfun("qv", builtin_model("ou_sqrt_theta"))
        closed = float(np.sum(np.diff(values) ** 2))
        result = solve(spec, sample)
        if 0.01 < closed < 1.99:
            assert result.theta_hat == pytest.approx(closed, abs=1e-9)
        elif closed > 1.99 or closed < 0.01:
            assert result.status == NO_ROOT

    @pytest.mark.parametrize("name", ["sec4_g", "sec4_h"])
    def test_root_residual(self, ergodic, ergodic_path, name):
        spec = builtin_estfun(name, ergodic)
        config = RootSolverConfig()
        for n in (100, 1000, 10_000):
            sample = Sample.from_path(subsample(ergodic_path, n))
            result = solve(spec, sample, config)
            if result.status == NO_ROOT:
                continue
            scale = 1 + abs(eval_G(spec, sample, config.search_lo)) + abs(eval_G(spec, sample, config.search_hi))
            assert abs(eval_G(spec, sample, result.theta_hat)) <= config.xtol * scale


class TestNormalizer:
    def test_hand_computation(self, qv):
        assert compute_What(qv, Sample([0.0, 1.0, 1.0], delta=0.5), 1.0) == pytest.approx(1.0)

    def test_all_terms_zero(self, qv):
        with pytest.raises(DegenerateNormalizer):
            compute_What(qv, Sample([0.0, 1.0, 0.0], delta=1.0), 1.0)

    def test_degenerate_status(self):
        spec = EstimatingFunctionSpec("flat", lambda t, y, x, th: (th - 1.0) + 0.0 * y)
        result = estimate(spec, Sample([0.0, 0.0, 0.0]))
        assert result.status == DEGENERATE_W and result.w_hat is None

    @pytest.mark.parametrize("name", ["sec4_g", "sec4_h"])
    def test_version_invariance(self, ergodic, ergodic_path, name):
        spec = builtin_estfun(name, ergodic)
        sample = Sample.from_path(subsample(ergodic_path, 1000))
        base = estimate(spec, sample)
        assert base.status == CONVERGED
        doubled = estimate(spec.scaled(2.0), sample)
        flipped = estimate(spec.scaled(-1.0), sample)
        assert doubled.theta_hat == pytest.approx(base.theta_hat, abs=1e-9)
        assert doubled.w_hat == pytest.approx(base.w_hat, rel=1e-9)
        assert flipped.theta_hat == pytest.approx(base.theta_hat, abs=1e-9)
        assert flipped.w_hat == pytest.approx(-base.w_hat, rel=1e-9)


class TestNormalizedStat:
    def test_at_truth(self):
        assert normalized_stat(1.0, 0.5, 1.0, 100) == 0.0

    def test_arithmetic(self):
        assert normalized_stat(1.1, 1.0, 1.0, 100) == pytest.approx(1.0)

    def test_zero_normalizer(self):
        with pytest.raises(DegenerateNormalizer):
            normalized_stat(1.1, 0.0, 1.0, 100)


class TestLimitFunctionals:
    def test_sec4_g_constant_path(self, ergodic):
        spec = builtin_estfun("sec4_g", ergodic)
        assert abs(mixing_W(spec, ergodic, PathGrid(np.zeros(101)), 1.0)) == pytest.approx(math.sqrt(2), rel=1e-12)

    @pytest.mark.parametrize("theta0", [0.5, 1.0, 1.8])
    def test_qv_mixing(self, ou, qv, ou_path, theta0):
        assert mixing_W(qv, ou, ou_path, theta0) == pytest.approx(theta0 * math.sqrt(2), rel=1e-12)

    def test_zero_denominator(self, brownian_model):
        spec = DIAGNOSTIC_CATALOG["naive_qv"](brownian_model)
        with pytest.raises(ZeroDenominator):
            mixing_W(spec, brownian_model, PathGrid(np.linspace(0, 1, 11)), 1.0)

    def test_A_vanishes_at_truth(self, ergodic, ergodic_path):
        spec = builtin_estfun("sec4_h", ergodic)
        A, _, _ = limit_functionals(spec, ergodic, ergodic_path, 1.0, 1.0)
        assert A == 0.0

    def test_A_qv(self, ou, qv, ou_path):
        A, _, _ = limit_functionals(qv, ou, ou_path, 1.5, 1.0)
        assert A == pytest.approx(-0.5, rel=1e-12)

    @pytest.mark.parametrize("name", ["sec4_g", "sec4_h", "efficient_generic"])
    def test_W_from_B_and_C(self, ergodic, ergodic_path, name):
        spec = builtin_estfun(name, ergodic)
        _, B, C = limit_functionals(spec, ergodic, ergodic_path, 1.0, 1.0)
        assert mixing_W(spec, ergodic, ergodic_path, 1.0) == pytest.approx(-math.sqrt(C) / B, rel=1e-10)

    def test_B_is_theta_derivative_of_A(self, ergodic, ergodic_path):
        spec = builtin_estfun("sec4_h", ergodic)
        theta, h = 1.3, 1e-5
        A_plus, _, _ = limit_functionals(spec, ergodic, ergodic_path, theta + h, 1.0)
        A_minus, _, _ = limit_functionals(spec, ergodic, ergodic_path, theta - h, 1.0)
        _, B, _ = limit_functionals(spec, ergodic, ergodic_path, theta, 1.0)
        assert B == pytest.approx((A_plus - A_minus) / (2 * h), rel=1e-5)

    def test_grid_refinement(self, ergodic):
        spec = builtin_estfun("sec4_h", ergodic)

        def W(n):
            return mixing_W(spec, ergodic, PathGrid(0.8 * np.cos(3 * np.arange(n + 1) / n)), 1.0)

        gaps = [abs(W(2 * n) - W(n)) for n in (200, 400, 800)]
        assert gaps[0] / gaps[1] == pytest.approx(2.0, rel=0.05)
        assert gaps[1] / gaps[2] == pytest.approx(2.0, rel=0.05)


class TestFisherConsistency:
    def test_sec4_g_is_efficient(self, ergodic, ergodic_path):
        _, _, ratio = fisher_consistency_check(builtin_estfun("sec4_g", ergodic), ergodic, ergodic_path, 1.0)
        assert ratio == pytest.approx(1.0, abs=1e-6)

    def test_qv_is_efficient(self, ou, qv, ou_path):
        w, fisher, ratio = fisher_consistency_check(qv, ou, ou_path, 1.3)
        assert w == pytest.approx(1.3 * math.sqrt(2), rel=1e-12)
        assert ratio == pytest.approx(1.0, abs=1e-12)

    def test_sec4_h_is_not(self, ergodic, ergodic_path):
        _, _, ratio = fisher_consistency_check(builtin_estfun("sec4_h", ergodic), ergodic, ergodic_path, 1.0)
        # Cauchy-Schwarz: an inefficient version has the larger scale
        assert ratio > 1.0 + 1e-6
