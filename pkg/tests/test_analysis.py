import math
import time

import numpy as np
import pytest
from pydantic import ValidationError

from emcel_analysis import (FrozenChainReference, RateRow, RateTable,
                            bootstrap_std_error, constant,
                            empirical_wasserstein_p, exact_reference_sampler,
                            fit_rate, functional_expectation,
                            marginal_rate_study, path_distance_diagnostic,
                            running_maximum, terminal_value, write_rate_fit,
                            write_rate_table)
from emcel_chain import simulate_terminal_batch
from emcel_const import ArgumentError, ModelSpec, UnsupportedModelError
from emcel_measure import check_condition_C, default_audit_grid
from emcel_models import MODELS, build_model
from emcel_scale import build_scheme


def scheme_of(model_id, **params):
    m, space = build_model(ModelSpec(id=model_id, **params))
    return build_scheme(m, space, 0.5)


def martingale_setup(model_id):
    """ Scheme, y0, h and T of the martingale check of a built-in model.
    """
    params = {"sigma": 1.5} if model_id == "scaled_brownian" else {}
    if model_id == "custom":
        params = {"density": "rational_1px2", "density_params": [2.0],
                  "atoms": [(0.5, 0.5)]}
    y0, h, T = 0.3, 0.04, 0.4
    if model_id == "cantor_slowed":
        y0, h, T = 0.5, 0.1, 0.6
    if model_id == "absorbing_halfline":
        y0 = 0.2
    return scheme_of(model_id, **params), y0, h, T


def power_table(c, slope, h_list):
    return RateTable(rows=[RateRow(h=h, estimate=c * h ** slope,
                                   std_error=0.0, n=10) for h in h_list])


class TestWasserstein:

    def test_shift(self):
        assert empirical_wasserstein_p([0, 1], [1, 2], 2) == pytest.approx(1.0)

    def test_unsorted(self):
        assert empirical_wasserstein_p([1, 0], [2, 1], 1) == pytest.approx(1.0)

    def test_coupling(self):
        # sorted coupling pairs 0 with 1 and 2 with 1
        assert empirical_wasserstein_p([0, 2], [1, 1], 1) == pytest.approx(1.0)
        assert empirical_wasserstein_p([0, 2], [1, 1], 2) == pytest.approx(1.0)
        assert empirical_wasserstein_p([0, 3], [1, 1], 2) == pytest.approx(
            math.sqrt(2.5))

    def test_identical(self):
        x = np.random.default_rng(0).normal(size=100)
        assert empirical_wasserstein_p(x, x[::-1]) == 0.0

    def test_errors(self):
        with pytest.raises(ArgumentError):
            empirical_wasserstein_p([0, 1], [0, 1], 0.5)
        with pytest.raises(ArgumentError):
            empirical_wasserstein_p([], [], 2)
        with pytest.raises(ArgumentError):
            empirical_wasserstein_p([0, 1], [0, 1, 2], 2)

    def test_pseudometric(self):
        rng = np.random.default_rng(21)
        for _ in range(1000):
            x, y, z = rng.normal(size=(3, 50)) * rng.uniform(0.5, 2, (3, 1))
            p = rng.uniform(1, 4)
            xy = empirical_wasserstein_p(x, y, p)
            assert xy == pytest.approx(empirical_wasserstein_p(y, x, p))
            assert xy <= (empirical_wasserstein_p(x, z, p) +
                          empirical_wasserstein_p(z, y, p) + 1e-12)

    def test_monotone_in_p(self):
        rng = np.random.default_rng(22)
        for _ in range(1000):
            x, y = rng.standard_cauchy(size=(2, 40))
            values = [empirical_wasserstein_p(x, y, p) for p in [1, 1.5, 2, 4]]
            assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


class TestRateFit:

    def test_exact_power_law(self):
        fit = fit_rate(power_table(2.0, 0.25, [0.1, 0.05, 0.025, 0.0125]))
        assert fit.slope == pytest.approx(0.25)
        assert fit.intercept == pytest.approx(math.log(2.0))
        assert fit.r_squared == pytest.approx(1.0)

    def test_too_few_rows(self):
        with pytest.raises(ArgumentError):
            fit_rate(power_table(1.0, 0.5, [0.1, 0.05]))

    def test_zero_estimate(self):
        table = power_table(1.0, 0.5, [0.1, 0.05, 0.025])
        table.rows[1].estimate = 0.0
        with pytest.raises(ArgumentError):
            fit_rate(table)

    def test_increasing_h_is_rejected(self):
        with pytest.raises(ValidationError):
            power_table(1.0, 0.5, [0.05, 0.1, 0.025])


class TestMarginalRateStudy:

    def test_empty_h_list(self):
        with pytest.raises(ArgumentError):
            marginal_rate_study(scheme_of("brownian"), 0.0, 1.0, [],
                                exact_reference_sampler(0.0, 1.0), 2.0, 10, 0)

    def test_own_reference(self):
        scheme = scheme_of("sticky_brownian")

        def reference(n, seed):
            return simulate_terminal_batch(scheme, 0.1, 0.0, 1.0, n, seed)

        table = marginal_rate_study(scheme, 0.0, 1.0, [0.1], reference, 2.0,
                                    500, 4)
        assert table.rows[0].estimate == 0.0
        assert table.rows[0].n == 500

    def test_brownian_bound(self):
        h_list = [0.1, 0.05, 0.025]
        table = marginal_rate_study(scheme_of("brownian"), 0.0, 1.0, h_list,
                                    exact_reference_sampler(0.0, 1.0), 2.0,
                                    2000, 5, workers=3)
        assert [row.h for row in table.rows] == h_list
        for row in table.rows:
            assert row.estimate <= row.h ** 0.25
            assert row.std_error > 0

    def test_workers_do_not_change_results(self):
        scheme = scheme_of("brownian")
        reference = exact_reference_sampler(0.0, 1.0)
        a = marginal_rate_study(scheme, 0.0, 1.0, [0.1, 0.05], reference, 2.0,
                                300, 6, workers=1)
        b = marginal_rate_study(scheme, 0.0, 1.0, [0.1, 0.05], reference, 2.0,
                                300, 6, workers=2)
        assert a == b

    @pytest.mark.slow
    def test_brownian_bound_and_slope(self):
        h_list = [2.0 ** -k for k in range(4, 13)]
        start = time.perf_counter()
        table = marginal_rate_study(scheme_of("brownian"), 0.0, 1.0, h_list,
                                    exact_reference_sampler(0.0, 1.0), 2.0,
                                    100000, 7, workers=4)
        assert time.perf_counter() - start < 120.0
        for row in table.rows:
            assert row.estimate <= row.h ** 0.25
        assert fit_rate(table).slope >= 0.25

    @pytest.mark.slow
    def test_sticky_frozen_reference(self):
        scheme = scheme_of("sticky_brownian")
        h_list = [2.0 ** -k for k in range(3, 9)]
        start = time.perf_counter()
        reference = FrozenChainReference(scheme, 2.0 ** -16, 0.0, 1.0,
                                         workers=4)
        table = marginal_rate_study(scheme, 0.0, 1.0, h_list, reference, 2.0,
                                    10000, 8, workers=3)
        assert time.perf_counter() - start < 300.0
        for coarse, fine in zip(table.rows, table.rows[1:]):
            assert fine.estimate <= coarse.estimate + 2 * (coarse.std_error +
                                                           fine.std_error)
        assert fit_rate(table).slope >= 0.2


class TestReferences:

    def test_exact_sampler(self):
        sample = exact_reference_sampler(1.0, 4.0)
        values = sample(20000, 3)
        assert np.array_equal(values, sample(20000, 3))
        assert abs(values.mean() - 1.0) <= 4 * 2.0 / math.sqrt(20000)
        assert values.std() == pytest.approx(2.0, rel=0.03)

    def test_frozen_reference_is_cached(self):
        reference = FrozenChainReference(scheme_of("brownian"), 0.05, 0.0,
                                         0.5)
        first = reference(50, 2)
        assert reference(50, 2) is first
        chain = simulate_terminal_batch(reference.scheme, 0.05, 0.0, 0.5, 50, 2)
        assert not np.array_equal(first, chain)


class TestFunctionalExpectation:

    def test_terminal_value(self):
        result = functional_expectation(scheme_of("brownian"), 0.04, 0.3, 1.0,
                                        terminal_value, 4000, 1)
        assert abs(result.mean - 0.3) <= 4 * result.std_error
        assert result.n == 4000

    def test_constant(self):
        result = functional_expectation(scheme_of("sticky_brownian"), 0.1,
                                        0.0, 1.0, constant(2.5), 100, 1)
        assert result.mean == 2.5
        assert result.std_error == 0.0

    def test_no_paths(self):
        with pytest.raises(ArgumentError):
            functional_expectation(scheme_of("brownian"), 0.1, 0.0, 1.0,
                                   terminal_value, 0, 1)

    def test_running_maximum(self):
        T = 1.0
        expected = math.sqrt(2.0 * T / math.pi)
        previous = None
        for h in [0.04, 0.01]:
            result = functional_expectation(scheme_of("brownian"), h, 0.0, T,
                                            running_maximum, 2000, 9)
            tolerance = max(4 * result.std_error, 2 * h ** 0.2)
            assert abs(result.mean - expected) <= tolerance
            if previous is not None:
                assert result.mean >= previous - 4 * result.std_error
            previous = result.mean

    @pytest.mark.parametrize("model_id", list(MODELS))
    def test_martingale_every_model(self, model_id):
        scheme, y0, h, T = martingale_setup(model_id)
        result = functional_expectation(scheme, h, y0, T, terminal_value,
                                        2000, 10)
        assert abs(result.mean - y0) <= 4 * result.std_error

    @pytest.mark.slow
    @pytest.mark.parametrize("model_id", list(MODELS))
    def test_martingale_every_model_large_sample(self, model_id):
        scheme, y0, h, T = martingale_setup(model_id)
        start = time.perf_counter()
        result = functional_expectation(scheme, h, y0, T, terminal_value,
                                        100000, 11, workers=4)
        assert time.perf_counter() - start < 60.0
        assert result.n == 100000
        assert abs(result.mean - y0) <= 4 * result.std_error

    def test_martingale_without_condition_C(self):
        # the density decays faster than any Cauchy bound
        m, space = build_model(ModelSpec(id="custom", density="exp_quadratic",
                                         density_params=[2.0]))
        report = check_condition_C(m, space, 1.0, 1, default_audit_grid(space))
        assert not report.passes
        scheme = build_scheme(m, space, 0.5)
        result = functional_expectation(scheme, 0.04, 0.0, 0.2, terminal_value,
                                        2000, 12)
        assert abs(result.mean) <= 4 * result.std_error


def test_bootstrap_std_error():
    values = np.random.default_rng(1).normal(size=2000)
    se = bootstrap_std_error(values, np.mean, 3)
    assert se == pytest.approx(1.0 / math.sqrt(2000), rel=0.2)
    assert bootstrap_std_error(values, np.mean, 3) == se
    with pytest.raises(ArgumentError):
        bootstrap_std_error([], np.mean, 3)


class TestPathDistance:

    def test_not_brownian(self):
        with pytest.raises(UnsupportedModelError):
            path_distance_diagnostic(scheme_of("sticky_brownian"), 0.25, 0.0,
                                     1.0, 10)

    def test_small_fine_factor(self):
        with pytest.raises(ArgumentError):
            path_distance_diagnostic(scheme_of("brownian"), 0.25, 0.0, 1.0,
                                     10, fine_factor=32)

    def test_report(self):
        report = path_distance_diagnostic(scheme_of("brownian"), 0.25, 0.0,
                                          1.0, 200, master_seed=3)
        assert report.estimate > 0
        assert report.biased
        assert report.fine_factor == 64

    def test_fine_factor_doubled(self):
        scheme = scheme_of("brownian")
        coarse = path_distance_diagnostic(scheme, 0.25, 0.0, 1.0, 2000,
                                          fine_factor=64, master_seed=4)
        fine = path_distance_diagnostic(scheme, 0.25, 0.0, 1.0, 2000,
                                        fine_factor=128, master_seed=4)
        assert abs(fine.estimate - coarse.estimate) < 0.1 * coarse.estimate


def test_writers(tmp_path):
    table = power_table(1.0, 0.5, [0.1, 0.05, 0.025])
    filename = tmp_path / "rate_table.csv"
    write_rate_table(table, str(filename))
    lines = filename.read_text().splitlines()
    assert lines[0] == "h,estimate,std_error,n"
    assert len(lines) == 4
    fit_file = tmp_path / "rate_fit.txt"
    write_rate_fit(fit_rate(table), str(fit_file), target=0.25)
    text = fit_file.read_text()
    assert "slope = " in text
    assert "expected_slope = 0.25" in text
