import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from motionsurv.errors import MalformedInputError, UndefinedResultError
from motionsurv.survival import (
    SurvivalData,
    SurvivalRecord,
    concordance_index,
    cox_gradient_wrt_risks,
    cox_l2_objective,
    cox_loss_and_gradient,
    cox_neg_log_partial_likelihood,
    fit_cox_l2,
    kaplan_meier,
    logrank_test,
    read_survival_csv,
    risk_set,
    write_survival_csv,
)

from oracles import concordance_bruteforce, cox_loglik_1d, cox_nll_bruteforce, numerical_gradient

DATA = Path(__file__).parent / "data"


def frac(v):
    return float(Fraction(*v))


def random_outcomes(rng, n, censor=0.3, tie_grid=None):
    if tie_grid:
        time = rng.integers(1, tie_grid, size=n).astype(float)
    else:
        time = rng.exponential(100.0, size=n)
    event = (rng.random(n) >= censor).astype(int)
    return SurvivalData(time, event)


@st.composite
def survival_problems(draw, max_n=12):
    n = draw(st.integers(2, max_n))
    time = draw(st.lists(st.integers(1, 6), min_size=n, max_size=n))
    event = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    risks = draw(st.lists(st.floats(-5, 5), min_size=n, max_size=n))
    return np.array(risks), SurvivalData(time, event)


class TestSurvivalData:
    def test_rejects_negative_time(self):
        with pytest.raises(MalformedInputError):
            SurvivalData([1.0, -2.0], [1, 0])

    def test_rejects_bad_event(self):
        with pytest.raises(MalformedInputError):
            SurvivalData([1.0, 2.0], [1, 2])

    def test_record_validation(self):
        with pytest.raises(MalformedInputError):
            SurvivalRecord("a", float("nan"), 1)

    def test_arrays_are_read_only(self):
        d = SurvivalData([1.0, 2.0], [1, 0])
        with pytest.raises(ValueError):
            d.time[0] = 5.0

    def test_indexing_keeps_ids(self):
        d = SurvivalData([1.0, 2.0, 3.0], [1, 0, 1], ["a", "b", "c"])
        sub = d[np.array([2, 0])]
        assert sub.subject_id == ("c", "a")
        assert sub.time.tolist() == [3.0, 1.0]
        assert d[np.array([True, False, True])].n_events == 2

    def test_records_roundtrip(self):
        d = SurvivalData([1.5, 2.0], [1, 0], ["x", "y"])
        again = SurvivalData.from_records(d.records())
        assert again.subject_id == d.subject_id
        np.testing.assert_array_equal(again.time, d.time)

    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        d = SurvivalData(rng.exponential(500, 20), rng.integers(0, 2, 20), [f"s{i}" for i in range(20)])
        write_survival_csv(tmp_path / "s.csv", d)
        back = read_survival_csv(tmp_path / "s.csv")
        np.testing.assert_array_equal(back.time, d.time)
        np.testing.assert_array_equal(back.event, d.event)
        assert back.subject_id == d.subject_id

    def test_csv_missing_column(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("subject_id,time\na,1\n")
        with pytest.raises(MalformedInputError, match="time_days"):
            read_survival_csv(p)

    def test_risk_set_includes_self_and_ties(self):
        d = SurvivalData([3.0, 1.0, 3.0, 5.0], [1, 1, 0, 1])
        assert risk_set(d, 0).tolist() == [0, 2, 3]


class TestCoxLikelihood:
    def test_two_events_log2(self):
        d = SurvivalData([1.0, 2.0], [1, 1])
        assert cox_neg_log_partial_likelihood([0.0, 0.0], d) == pytest.approx(np.log(2.0), abs=1e-15)

    def test_all_censored_is_zero(self):
        d = SurvivalData([1.0, 2.0, 3.0], [0, 0, 0])
        assert cox_neg_log_partial_likelihood([1.0, -2.0, 0.3], d) == 0.0
        np.testing.assert_array_equal(cox_gradient_wrt_risks([1.0, -2.0, 0.3], d), 0.0)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(1, 11))
            d = random_outcomes(rng, n, censor=rng.uniform(0, 0.8), tie_grid=5 if rng.random() < 0.5 else None)
            risks = rng.normal(0, 2, n)
            expected = cox_nll_bruteforce(risks, d.time, d.event)
            assert cox_neg_log_partial_likelihood(risks, d) == pytest.approx(expected, abs=1e-10, rel=1e-12)

    def test_large_risks_stay_finite(self):
        d = SurvivalData([1.0, 2.0, 3.0], [1, 1, 1])
        loss = cox_neg_log_partial_likelihood([800.0, 0.0, -800.0], d)
        assert np.isfinite(loss)
        assert loss == pytest.approx(np.log1p(np.exp(-800.0)) + np.log1p(np.exp(-800.0)), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(2, 15))
            d = random_outcomes(rng, n, tie_grid=6)
            risks = rng.normal(size=n)
            num = numerical_gradient(lambda r: cox_nll_bruteforce(r, d.time, d.event), risks)
            np.testing.assert_allclose(cox_gradient_wrt_risks(risks, d), num, atol=1e-7)

    def test_raw_form_agrees(self):
        rng = np.random.default_rng(2)
        d = random_outcomes(rng, 40, tie_grid=10)
        r = rng.normal(size=40)
        loss, grad = cox_loss_and_gradient(r, d.time, d.event)
        assert loss == cox_neg_log_partial_likelihood(r, d)
        np.testing.assert_array_equal(grad, cox_gradient_wrt_risks(r, d))

    def test_length_mismatch(self):
        with pytest.raises(MalformedInputError):
            cox_neg_log_partial_likelihood([0.0], SurvivalData([1.0, 2.0], [1, 1]))

    @given(survival_problems(), st.floats(-10, 10))
    def test_shift_invariance(self, problem, c):
        risks, d = problem
        a = cox_neg_log_partial_likelihood(risks, d)
        b = cox_neg_log_partial_likelihood(risks + c, d)
        assert b == pytest.approx(a, abs=1e-9)

    @given(survival_problems())
    def test_gradient_sums_to_zero(self, problem):
        risks, d = problem
        assert abs(cox_gradient_wrt_risks(risks, d).sum()) < 1e-9

    @given(survival_problems())
    def test_nonnegative(self, problem):
        risks, d = problem
        assert cox_neg_log_partial_likelihood(risks, d) >= -1e-12


class TestCoxFit:
    def test_one_covariate_matches_bruteforce(self):
        d = SurvivalData([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1])
        z = np.array([1.0, 0.0, 1.0, 0.0])
        fit = fit_cox_l2(z[:, None], d, 0.0)
        ref = optimize.minimize_scalar(lambda b: -cox_loglik_1d(b, z, d.time, d.event),
                                       bounds=(-10, 10), method="bounded", options={"xatol": 1e-10})
        assert fit.converged
        assert fit.coefficients[0] == pytest.approx(ref.x, abs=1e-4)

    def test_random_one_covariate_instances(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = 25
            z = rng.normal(size=n)
            d = SurvivalData(rng.exponential(1, n) / np.exp(0.7 * z), (rng.random(n) < 0.8).astype(int))
            grid = np.linspace(-6, 6, 2401)
            ll = [cox_loglik_1d(b, z, d.time, d.event) for b in grid]
            b0 = grid[int(np.argmax(ll))]
            ref = optimize.minimize_scalar(lambda b: -cox_loglik_1d(b, z, d.time, d.event),
                                           bracket=(b0 - 0.01, b0, b0 + 0.01), tol=1e-12)
            fit = fit_cox_l2(z, d, 0.0)
            assert fit.coefficients[0] == pytest.approx(ref.x, abs=1e-4)

    def test_huge_penalty_shrinks(self):
        rng = np.random.default_rng(6)
        Z = rng.normal(size=(50, 3))
        d = SurvivalData(rng.exponential(1, 50) / np.exp(Z @ [1.0, -1.0, 0.5]), np.ones(50, int))
        fit = fit_cox_l2(Z, d, 1e8)
        assert np.max(np.abs(fit.coefficients)) < 1e-4

    def test_objective_never_decreases(self):
        rng = np.random.default_rng(7)
        Z = rng.normal(size=(60, 4))
        d = SurvivalData(rng.exponential(1, 60) / np.exp(Z @ [2.0, -1.0, 0.5, 0.0]), rng.integers(0, 2, 60))
        fit = fit_cox_l2(Z, d, 0.1)
        assert np.all(np.diff(fit.objective_trace) >= -1e-12 * (1 + abs(fit.objective)))
        assert fit.objective == pytest.approx(cox_l2_objective(fit.coefficients, Z, d, 0.1))

    def test_penalty_subtracted(self):
        d = SurvivalData([1.0, 2.0], [1, 1])
        beta = np.array([2.0])
        Z = np.array([[0.0], [0.0]])
        assert cox_l2_objective(beta, Z, d, 1.0) == pytest.approx(-np.log(2.0) - 2.0)

    def test_duplicated_covariates_share_weight(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=40)
        d = SurvivalData(rng.exponential(1, 40) / np.exp(z), np.ones(40, int))
        fit = fit_cox_l2(np.column_stack([z, z]), d, 0.5)
        assert fit.coefficients[0] == pytest.approx(fit.coefficients[1], abs=1e-10)

    def test_predict(self):
        d = SurvivalData([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1])
        fit = fit_cox_l2(np.array([[1.0], [0.0], [1.0], [0.0]]), d, 0.1)
        np.testing.assert_allclose(fit.predict([[2.0]]), 2.0 * fit.coefficients)

    def test_rejects_negative_penalty(self):
        with pytest.raises(MalformedInputError):
            fit_cox_l2(np.ones((2, 1)), SurvivalData([1.0, 2.0], [1, 1]), -1.0)


class TestConcordance:
    def test_perfect_and_reversed(self):
        d = SurvivalData([1.0, 2.0, 3.0], [1, 1, 1])
        assert concordance_index([3.0, 2.0, 1.0], d) == 1.0
        assert concordance_index([1.0, 2.0, 3.0], d) == 0.0

    def test_tied_risks(self):
        d = SurvivalData([1.0, 2.0], [1, 1])
        assert concordance_index([1.0, 1.0], d) == 0.5
        assert concordance_index([1.0, 1.0], d, ties="strict") == 0.0

    def test_no_informative_pairs(self):
        with pytest.raises(UndefinedResultError):
            concordance_index([1.0, 2.0], SurvivalData([1.0, 2.0], [0, 0]))
        with pytest.raises(UndefinedResultError):
            concordance_index([1.0, 2.0], SurvivalData([1.0, 1.0], [1, 1]))

    def test_unknown_tie_policy(self):
        with pytest.raises(ValueError):
            concordance_index([1.0, 2.0], SurvivalData([1.0, 2.0], [1, 1]), ties="somers")

    def test_matches_pair_enumeration(self):
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(200):
            n = int(rng.integers(2, 31))
            d = random_outcomes(rng, n, censor=rng.uniform(0, 0.8), tie_grid=8)
            risks = rng.integers(0, 5, n).astype(float)
            for ties in ("harrell", "strict"):
                ref = concordance_bruteforce(risks, d.time, d.event, ties)
                if ref is None:
                    continue
                assert concordance_index(risks, d, ties=ties) == ref
                checked += 1
        assert checked > 300

    @given(survival_problems(max_n=15))
    @settings(max_examples=200)
    def test_monotone_transform_invariance(self, problem):
        risks, d = problem
        try:
            c = concordance_index(risks, d)
        except UndefinedResultError:
            return
        ranks = stats.rankdata(risks)
        assert concordance_index(ranks ** 3 - 4.0, d) == pytest.approx(c)
        assert 0.0 <= c <= 1.0

    @given(survival_problems(max_n=15))
    def test_negation_reflects_without_ties(self, problem):
        risks, d = problem
        risks = risks + np.arange(risks.size) * 1e-3
        if np.unique(risks).size < risks.size:
            return
        try:
            c = concordance_index(risks, d)
        except UndefinedResultError:
            return
        assert concordance_index(-risks, d) == pytest.approx(1.0 - c)


@pytest.fixture(scope="module")
def fixtures():
    return json.loads((DATA / "km_fixtures.json").read_text())["cases"]


class TestKaplanMeier:
    def test_hand_computed(self, fixtures):
        for case in fixtures:
            km = kaplan_meier(SurvivalData(case["time"], case["event"]))
            assert km.times.tolist() == case["times"]
            assert km.n_at_risk.tolist() == case["n_at_risk"]
            assert km.n_events.tolist() == case["n_events"]
            assert km.n_censored.tolist() == case["n_censored"]
            np.testing.assert_allclose(km.survival, [frac(s) for s in case["survival"]], rtol=0, atol=1e-15)

    def test_log_log_band(self, fixtures):
        for case in fixtures:
            km = kaplan_meier(SurvivalData(case["time"], case["event"]))
            for k, gw in enumerate(case["greenwood"]):
                s = frac(case["survival"][k])
                if gw is None or s == 0.0:
                    assert km.ci_lower[k] == km.ci_upper[k] == 0.0
                    continue
                se = np.sqrt(frac(gw)) / abs(np.log(s))
                z = stats.norm.ppf(0.975)
                assert km.ci_lower[k] == pytest.approx(s ** np.exp(z * se), rel=1e-9)
                assert km.ci_upper[k] == pytest.approx(s ** np.exp(-z * se), rel=1e-9)
                assert km.ci_lower[k] <= s <= km.ci_upper[k]

    def test_step_function(self):
        km = kaplan_meier(SurvivalData([1, 2, 2, 3, 4, 5], [1, 1, 0, 1, 0, 1]))
        np.testing.assert_allclose(km([0.0, 1.0, 1.5, 2.0, 3.5, 10.0]), [1.0, 5 / 6, 5 / 6, 2 / 3, 4 / 9, 0.0])

    def test_all_censored(self):
        km = kaplan_meier(SurvivalData([1.0, 2.0], [0, 0]))
        np.testing.assert_array_equal(km.survival, 1.0)
        np.testing.assert_array_equal(km.ci_lower, 1.0)

    def test_no_censoring_equals_empirical(self):
        rng = np.random.default_rng(4)
        t = rng.exponential(size=25)
        km = kaplan_meier(SurvivalData(t, np.ones(25, int)))
        grid = np.linspace(0, t.max(), 50)
        np.testing.assert_allclose(km(grid), [(t > g).mean() for g in grid], atol=1e-12)

    @given(st.lists(st.tuples(st.integers(1, 9), st.integers(0, 1)), min_size=1, max_size=30))
    def test_monotone_and_bounded(self, rows):
        t, e = zip(*rows)
        km = kaplan_meier(SurvivalData(t, e))
        assert np.all(np.diff(km.survival) <= 0)
        assert np.all((km.survival >= 0) & (km.survival <= 1))
        assert np.all(km.ci_lower <= km.survival + 1e-12)
        assert np.all(km.ci_upper >= km.survival - 1e-12)


class TestLogRank:
    def test_hand_computed(self):
        for case in json.loads((DATA / "logrank_fixtures.json").read_text())["cases"]:
            res = logrank_test(SurvivalData(case["a_time"], case["a_event"]),
                               SurvivalData(case["b_time"], case["b_event"]))
            assert res.observed_a == case["observed_a"]
            assert res.expected_a == pytest.approx(frac(case["expected_a"]), abs=1e-14)
            assert res.statistic == pytest.approx(frac(case["statistic"]), abs=1e-14)
            assert res.p_value == pytest.approx(stats.chi2.sf(frac(case["statistic"]), 1), abs=1e-14)
            assert res.df == 1

    def test_identical_groups(self):
        g = SurvivalData([3.0, 5.0, 7.0, 9.0], [1, 0, 1, 1])
        res = logrank_test(g, g)
        assert res.statistic == 0.0
        assert res.p_value == 1.0

    def test_zero_events(self):
        g = SurvivalData([3.0, 5.0], [0, 0])
        with pytest.raises(UndefinedResultError):
            logrank_test(g, g)

    def test_separated_groups_significant(self):
        a = SurvivalData(np.arange(1, 21), np.ones(20, int))
        b = SurvivalData(np.arange(101, 121), np.ones(20, int))
        assert logrank_test(a, b).p_value < 1e-6

    @given(st.lists(st.tuples(st.integers(1, 9), st.integers(0, 1)), min_size=1, max_size=12),
           st.lists(st.tuples(st.integers(1, 9), st.integers(0, 1)), min_size=1, max_size=12))
    def test_symmetric_in_groups(self, rows_a, rows_b):
        a = SurvivalData(*zip(*rows_a))
        b = SurvivalData(*zip(*rows_b))
        if a.n_events + b.n_events == 0:
            return
        assert logrank_test(a, b).statistic == pytest.approx(logrank_test(b, a).statistic, abs=1e-12)
