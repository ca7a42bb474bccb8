import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psconfound import dgp
from psconfound.dgp import SimulatedDataset
from psconfound.estimators import (
    METHODS,
    Method,
    caliper_match,
    estimate_ps,
    iptw_weights,
    nn_match_with_replacement,
    run_method,
    standardised_log_or,
    standardised_log_or_gradient,
)
from psconfound.solvers import fit_logistic

LOG_OR_2X2 = math.log(27 / 7)
SE_2X2 = math.sqrt(1 / 30 + 1 / 70 + 1 / 10 + 1 / 90)


def dataset(e, y=None, **cols):
    n = len(e)
    base = {f"x{i}": np.zeros(n) for i in range(1, 6)}
    base.update({k: np.asarray(v, dtype=float) for k, v in cols.items()})
    return SimulatedDataset(e=np.asarray(e), y=None if y is None else np.asarray(y), **base)


def covariate_free_2x2():
    e = np.r_[np.ones(100), np.zeros(100)].astype(int)
    y = np.r_[np.ones(30), np.zeros(70), np.ones(10), np.zeros(90)].astype(int)
    return dataset(e, y)


def brute_nn(ps, e):
    controls = [j for j in range(len(ps)) if e[j] == 0]
    return [(i, min(controls, key=lambda j: (abs(ps[j] - ps[i]), j))) for i in range(len(ps)) if e[i] == 1]


def brute_caliper(ps, e, order, caliper=1e-2):
    free = {j for j in range(len(ps)) if e[j] == 0}
    pairs = []
    for i in order:
        near = [j for j in free if abs(ps[j] - ps[i]) < caliper]
        if near:
            j = min(near, key=lambda j: (abs(ps[j] - ps[i]), j))
            free.remove(j)
            pairs.append((i, j))
    return pairs


def random_instance(rng, n):
    # rounding to a coarse grid produces many exact ties
    ps = np.round(rng.uniform(0.05, 0.95, n), rng.integers(1, 4))
    e = (rng.random(n) < 0.5).astype(int)
    return ps, e


class TestPropensityScore:
    def test_saturated_single_covariate(self):
        x1 = np.r_[np.zeros(40), np.ones(60)]
        e = np.r_[np.ones(10), np.zeros(30), np.ones(45), np.zeros(15)].astype(int)
        ps = estimate_ps(dataset(e, x1=x1))
        assert ps.converged
        np.testing.assert_allclose(ps.ps[:40], 10 / 40, atol=1e-9)
        np.testing.assert_allclose(ps.ps[40:], 45 / 60, atol=1e-9)

    def test_separated_toy(self):
        x2 = np.arange(30.0)
        e = (x2 >= 15).astype(int)
        ps = estimate_ps(dataset(e, x2=x2))
        assert not ps.converged and ps.ps is None
        for m in METHODS:
            if m.uses_ps:
                assert not run_method(m, dataset(e, np.arange(30) % 2, x2=x2), ps).converged

    def test_null_model(self):
        rng = np.random.default_rng(4)
        n = 100_000
        data = dataset(
            (rng.random(n) < 0.3).astype(int),
            x1=(rng.random(n) < 0.4),
            x2=rng.standard_normal(n),
            x3=rng.standard_normal(n),
            x4=rng.standard_normal(n),
            x5=rng.standard_normal(n),
        )
        fit = estimate_ps(data).source_fit
        assert fit.converged
        assert np.all(np.abs(fit.coef[1:]) < 0.05)
        assert np.all(np.abs(fit.coef[1:]) < 3 * fit.se[1:])


class TestNearestNeighbour:
    def test_tie_goes_to_lowest_index(self):
        ps = np.array([0.30, 0.10, 0.29, 0.31])
        e = np.array([1, 0, 0, 0])
        m = nn_match_with_replacement(ps, e)
        assert m.pairs.tolist() == [[0, 2]]
        ps2 = np.array([0.30, 0.10, 0.31, 0.29])
        assert nn_match_with_replacement(ps2, e).pairs.tolist() == [[0, 2]]

    def test_reused_control_counts(self):
        ps = np.array([0.2, 0.4, 0.6, 0.5])
        e = np.array([1, 1, 1, 0])
        m = nn_match_with_replacement(ps, e)
        assert m.weights[3] == 3
        assert m.weights.tolist() == [1, 1, 1, 3]

    def test_empty_group(self):
        m = nn_match_with_replacement(np.array([0.2, 0.4]), np.array([1, 1]))
        assert m.n_exposed_matched == 0 and m.weights.sum() == 0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(200):
            n = int(rng.integers(2, 51))
            ps, e = random_instance(rng, n)
            if e.all() or not e.any():
                continue
            m = nn_match_with_replacement(ps, e)
            assert [tuple(p) for p in m.pairs.tolist()] == brute_nn(ps, e)


class TestCaliper:
    def test_outside_caliper(self):
        m = caliper_match(np.array([0.50, 0.52]), np.array([1, 0]))
        assert m.n_exposed_matched == 0

    def test_inside_caliper(self):
        m = caliper_match(np.array([0.50, 0.505]), np.array([1, 0]))
        assert m.pairs.tolist() == [[0, 1]]

    def test_without_replacement(self):
        m = caliper_match(np.array([0.50, 0.501, 0.502]), np.array([1, 1, 0]))
        assert m.n_exposed_matched == 1 and m.weights.max() == 1

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(321)
        checked = 0
        while checked < 200:
            n = int(rng.integers(2, 51))
            ps, e = random_instance(rng, n)
            ps = np.round(ps / 3, 3)  # compress so the caliper binds
            seed = int(rng.integers(2**32))
            m = caliper_match(ps, e, rng=np.random.default_rng(seed))
            exposed = np.flatnonzero(e == 1)
            if len(exposed) and (e == 0).any():
                order = exposed[np.random.default_rng(seed).permutation(len(exposed))]
            else:
                order = exposed
            assert [tuple(p) for p in m.pairs.tolist()] == brute_caliper(ps, e, order.tolist())
            checked += 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.01, 0.99), st.booleans()), min_size=1, max_size=60))
    def test_pairs_are_valid(self, rows):
        ps = np.array([r[0] for r in rows])
        e = np.array([int(r[1]) for r in rows])
        m = caliper_match(ps, e, rng=np.random.default_rng(0))
        if len(m.pairs):
            assert np.all(e[m.pairs[:, 0]] == 1) and np.all(e[m.pairs[:, 1]] == 0)
            assert len(set(m.pairs[:, 1].tolist())) == len(m.pairs)
            assert np.all(np.abs(ps[m.pairs[:, 0]] - ps[m.pairs[:, 1]]) < 1e-2)
        assert m.weights.sum() == 2 * m.n_exposed_matched


class TestIPTW:
    def test_half(self):
        np.testing.assert_array_equal(iptw_weights(np.full(4, 0.5), np.array([0, 1, 0, 1])), 2.0)

    def test_quarter(self):
        w = iptw_weights(np.array([0.25, 0.25]), np.array([1, 0]))
        assert w[0] == 4.0
        assert w[1] == pytest.approx(1 / 0.75)

    def test_degenerate_ps(self):
        w = iptw_weights(np.array([0.0, 0.5]), np.array([1, 0]))
        assert np.isinf(w[0])


class TestRegressionStandardisation:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            n = 500
            design = np.column_stack([np.ones(n), rng.random(n) < 0.4, rng.standard_normal((n, 3))]).astype(float)
            beta = rng.normal(0, 0.7, design.shape[1])
            grad = standardised_log_or_gradient(beta, design)
            h = 1e-6
            fd = np.array([
                (standardised_log_or(beta + h * ej, design) - standardised_log_or(beta - h * ej, design)) / (2 * h)
                for ej in np.eye(len(beta))
            ])
            assert np.max(np.abs(grad - fd)) <= 1e-4 * np.max(np.abs(fd))

    def test_no_covariates_gives_crude(self):
        est = run_method(Method.REGRESSION_STANDARDISED, covariate_free_2x2())
        assert est.converged
        assert est.log_or == pytest.approx(LOG_OR_2X2, abs=1e-8)
        assert est.se == pytest.approx(SE_2X2, abs=1e-8)


class TestRunMethod:
    @pytest.mark.parametrize("method", [Method.PS_COVARIATE, Method.IPTW, Method.CALIPER_MATCH,
                                        Method.REGRESSION_STANDARDISED])
    def test_covariate_free_data_reduce_to_2x2(self, method):
        est = run_method(method, covariate_free_2x2(), caliper_rng=np.random.default_rng(0))
        assert est.converged
        assert est.log_or == pytest.approx(LOG_OR_2X2, abs=1e-8)

    def test_matched_2x2_standard_error(self):
        est = run_method(Method.CALIPER_MATCH, covariate_free_2x2())
        assert est.se == pytest.approx(SE_2X2, abs=1e-8)

    def test_constant_ps_matches_unadjusted(self):
        data = covariate_free_2x2()
        est = run_method(Method.PS_COVARIATE, data)
        crude = fit_logistic(np.column_stack([np.ones(200), data.e]), data.y)
        assert est.log_or == pytest.approx(crude.coef[1], abs=1e-10)

    def test_nn_frequency_weights(self):
        data = dataset([1, 1, 0, 0, 1, 0], [1, 0, 1, 0, 1, 0], x2=[0.1, 0.2, 0.1, 0.5, 0.3, 0.25])
        ps = estimate_ps(data)
        est = run_method(Method.NN_MATCH, data, ps)
        match = nn_match_with_replacement(ps.ps, data.e)
        x = np.repeat(np.column_stack([np.ones(6), data.e]), match.weights, axis=0)
        fit = fit_logistic(x, np.repeat(data.y, match.weights))
        assert est.converged == fit.converged
        if fit.converged:
            assert est.log_or == pytest.approx(fit.coef[1], abs=1e-9)
            assert est.se == pytest.approx(fit.se[1], abs=1e-9)

    def test_zero_exposed(self):
        data = dgp.simulate(dgp.ScenarioSpec(200, 0.5, 1))
        data = data.replace(e=np.zeros(200, dtype=np.int8))
        for m in METHODS:
            assert not run_method(m, data).converged

    def test_needs_outcome(self):
        with pytest.raises(ValueError):
            run_method(Method.IPTW, dataset([0, 1]))

    def test_simulated_replicate_all_converge(self):
        data = dgp.simulate(dgp.ScenarioSpec(1000, 0.5, 1, base_seed=1))
        ps = estimate_ps(data)
        for m in METHODS:
            est = run_method(m, data, ps, caliper_rng=np.random.default_rng(0))
            assert est.converged, m
            assert abs(est.log_or - data.true_log_mor) < 1.0
