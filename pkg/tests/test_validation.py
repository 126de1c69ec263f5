import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from motionsurv.errors import MalformedInputError, NumericalError, StratificationError
from motionsurv.hyperopt import SearchSpace, SwarmConfig
from motionsurv.motion import (
    SyntheticCohortConfig,
    generate_synthetic_cohort,
    mean_displacement_per_vertex,
    planted_concordance,
)
from motionsurv.network import TrainConfig
from motionsurv.seeding import stream
from motionsurv.survival import SurvivalData, kaplan_meier, logrank_test
from motionsurv.validation import (
    NetworkTrainer,
    Replicate,
    ValidationReport,
    benchmark_conventional,
    bootstrap_optimism,
    compare_models,
    dataset_digest,
    read_report_json,
    stratify_by_median_risk,
    write_km_csv,
    write_logrank_csv,
    write_report_json,
)

from oracles import sign_flip_pvalue_exhaustive


def fixed_trainer(X, o, seed):
    return lambda Z: -Z[:, :4].mean(axis=1)


def memorizing_trainer(X, o, seed):
    ref = X.copy()
    risk = -o.time

    def score(Z):
        d = ((Z[:, None, :] - ref[None]) ** 2).sum(-1)
        return risk[np.argmin(d, axis=1)]

    return score


@pytest.fixture(scope="module")
def cohort300():
    c = generate_synthetic_cohort(SyntheticCohortConfig(n_subjects=300, V=16, T=5, seed=1))
    X = np.stack([mean_displacement_per_vertex(s) for s in c.samples])
    return X, c.outcomes


class TestBootstrap:
    def test_identities_hold_exactly(self, cohort300):
        X, o = cohort300
        rep = bootstrap_optimism(memorizing_trainer, X, o, B=10, seed=0)
        opt = [r.bootstrap_performance - r.test_performance for r in rep.replicates]
        assert rep.mean_optimism == math.fsum(opt) / 10
        assert rep.corrected_c == rep.apparent_c - rep.mean_optimism
        assert len(rep.replicates) == rep.B == 10

    def test_data_ignoring_trainer_has_no_optimism(self, cohort300):
        X, o = cohort300
        rep = bootstrap_optimism(fixed_trainer, X, o, B=200, seed=0)
        assert abs(rep.mean_optimism) < 0.02
        assert rep.corrected_c == pytest.approx(rep.apparent_c, abs=0.02)

    def test_memorizing_trainer_is_optimistic(self, cohort300):
        X, o = cohort300
        rep = bootstrap_optimism(memorizing_trainer, X, o, B=20, seed=0)
        assert rep.mean_optimism > 0.05
        assert rep.corrected_c < rep.apparent_c

    def test_seeded_resamples(self, cohort300):
        X, o = cohort300
        a = bootstrap_optimism(fixed_trainer, X, o, B=5, seed=4)
        b = bootstrap_optimism(fixed_trainer, X, o, B=5, seed=4, jobs=3)
        c = bootstrap_optimism(fixed_trainer, X, o, B=5, seed=5)
        assert [r.sample_indices for r in a.replicates] == [r.sample_indices for r in b.replicates]
        assert a.to_dict() == b.to_dict()
        assert [r.sample_indices for r in a.replicates] != [r.sample_indices for r in c.replicates]

    def test_test_performance_uses_original_sample(self, cohort300):
        X, o = cohort300
        rep = bootstrap_optimism(memorizing_trainer, X, o, B=4, seed=0)
        digest = dataset_digest(X, o)
        assert all(r.evaluation_digest == digest for r in rep.replicates)
        assert rep.data_digest == digest

    def test_zero_event_resamples_redrawn(self):
        o = SurvivalData(np.arange(1.0, 11.0), np.r_[1, np.zeros(9, int)])
        X = np.arange(10.0)[:, None]
        with pytest.warns(RuntimeWarning, match="redrew"):
            rep = bootstrap_optimism(lambda a, b, s: (lambda Z: -Z[:, 0]), X, o, B=20, seed=0)
        assert any(r.redraws > 0 for r in rep.replicates)
        for r in rep.replicates:
            assert o.event[r.sample_indices].any()

    def test_failed_replicates_excluded(self, cohort300):
        X, o = cohort300
        calls = {"n": 0}

        def flaky(Xb, ob, seed):
            calls["n"] += 1
            if calls["n"] == 3:
                raise NumericalError("diverged")
            return fixed_trainer(Xb, ob, seed)

        rep = bootstrap_optimism(flaky, X, o, B=10, seed=0)
        assert sum(r.excluded for r in rep.replicates) == 1
        assert len(rep.included) == 9
        assert "diverged" in [r for r in rep.replicates if r.excluded][0].error

    def test_too_many_failures_abort(self, cohort300):
        X, o = cohort300
        calls = {"n": 0}

        def mostly_broken(Xb, ob, seed):
            calls["n"] += 1
            if calls["n"] > 1 and calls["n"] % 4 == 0:
                raise NumericalError("nope")
            return fixed_trainer(Xb, ob, seed)

        with pytest.raises(NumericalError, match="replicates failed"):
            bootstrap_optimism(mostly_broken, X, o, B=20, seed=0)

    def test_ci_construction(self, cohort300):
        X, o = cohort300
        rep = bootstrap_optimism(memorizing_trainer, X, o, B=10, seed=1)
        vals = rep.corrected_values()
        sd = np.std(vals, ddof=1)
        lo, hi = rep.ci_95
        assert lo == pytest.approx(rep.corrected_c - 1.959963984540054 * sd)
        assert hi == pytest.approx(rep.corrected_c + 1.959963984540054 * sd)
        assert "1.96" in rep.ci_method

    def test_preconditions(self):
        o = SurvivalData([1.0], [1])
        with pytest.raises(MalformedInputError):
            bootstrap_optimism(fixed_trainer, np.zeros((1, 4)), o, B=5)
        o2 = SurvivalData([1.0, 2.0], [1, 1])
        with pytest.raises(MalformedInputError):
            bootstrap_optimism(fixed_trainer, np.zeros((2, 4)), o2, B=0)

    def test_json_roundtrip(self, tmp_path, cohort300):
        X, o = cohort300
        rep = bootstrap_optimism(fixed_trainer, X, o, B=3, seed=0)
        write_report_json(tmp_path / "r.json", rep)
        back = read_report_json(tmp_path / "r.json")
        assert back.to_dict() == rep.to_dict()
        assert "corrected C" in back.summary()

    @given(st.lists(st.tuples(st.floats(0.3, 1.0), st.floats(0.3, 1.0)), min_size=1, max_size=30),
           st.floats(0.4, 1.0))
    def test_report_identity_property(self, pairs, apparent):
        reps = [Replicate(i, a, b) for i, (a, b) in enumerate(pairs)]
        mean_opt = math.fsum(r.optimism for r in reps) / len(reps)
        report = ValidationReport(apparent, reps, mean_opt, apparent - mean_opt, (0, 0), len(reps))
        np.testing.assert_allclose(report.corrected_values().mean(), report.corrected_c, atol=1e-12)


class TestFastValidation:
    def test_reuses_hyperparameters(self):
        c = generate_synthetic_cohort(SyntheticCohortConfig(n_subjects=40, V=6, T=4, seed=2))
        X = c.features()
        space = SearchSpace.default()
        trainer = NetworkTrainer({}, TrainConfig(epochs=1, batch_size=20), space,
                                 SwarmConfig(n_particles=2, n_iterations=1, cv_folds=2))
        rep = bootstrap_optimism(trainer, X, c.outcomes, B=2, seed=0, fast_validation=True)
        assert rep.fast_validation
        assert set(rep.hyperparameters) == set(space.names)
        assert any("TRIPOD" in n for n in rep.notes)
        fixed = trainer.with_fixed_hyperparameters(type("S", (), {"hyperparameters": rep.hyperparameters})())
        assert fixed.space is None and fixed.hyperparameters == rep.hyperparameters


class TestStratify:
    def test_even(self):
        o = SurvivalData([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1], ["a", "b", "c", "d"])
        low, high = stratify_by_median_risk([1, 2, 3, 4], o)
        assert low.subject_id == ("a", "b") and high.subject_id == ("c", "d")

    def test_odd_median_goes_low(self):
        o = SurvivalData([1.0, 2.0, 3.0], [1, 1, 1], ["a", "b", "c"])
        low, high = stratify_by_median_risk([1, 2, 3], o)
        assert low.subject_id == ("a", "b") and high.subject_id == ("c",)

    def test_identical_risks(self):
        with pytest.raises(StratificationError):
            stratify_by_median_risk([2.0, 2.0, 2.0], SurvivalData([1.0, 2.0, 3.0], [1, 1, 1]))

    def test_length_mismatch(self):
        with pytest.raises(MalformedInputError):
            stratify_by_median_risk([1.0, 2.0], SurvivalData([1.0, 2.0, 3.0], [1, 1, 1]))

    @given(st.lists(st.integers(0, 5), min_size=2, max_size=40))
    def test_partition_property(self, risks):
        o = SurvivalData(np.arange(1.0, len(risks) + 1), np.ones(len(risks), int))
        try:
            low, high = stratify_by_median_risk(risks, o)
        except StratificationError:
            assert np.sum(np.array(risks) > np.median(risks)) == 0
            return
        assert len(low) + len(high) == len(risks)
        assert len(high) <= len(risks) / 2
        assert set(low.subject_id).isdisjoint(high.subject_id)

    def test_logrank_strengthens_with_signal(self):
        pvals = []
        for s in (0.0, 1.0, 2.5):
            c = generate_synthetic_cohort(SyntheticCohortConfig(n_subjects=200, V=20, T=6, seed=5,
                                                                signal_strength=s))
            trainer = NetworkTrainer({"hidden_units": 16, "latent_dim": 4, "dropout_rate": 0.1,
                                      "learning_rate": 3e-3}, TrainConfig(epochs=40, batch_size=16))
            scorer = trainer(c.features(), c.outcomes, 0)
            low, high = stratify_by_median_risk(scorer(c.features()), c.outcomes)
            pvals.append(logrank_test(low, high).p_value)
        assert pvals[0] > pvals[1] > pvals[2]


class TestBenchmark:
    def test_recovers_planted_concordance(self):
        c = generate_synthetic_cohort(SyntheticCohortConfig(n_subjects=300, V=4, T=3, seed=1, signal_strength=1.0))
        Z = c.planted_risk[:, None] + 0.05 * stream(0, "n").standard_normal((300, 1))
        rep = bootstrap_optimism(benchmark_conventional, Z, c.outcomes, B=20, seed=0)
        assert rep.corrected_c == pytest.approx(planted_concordance(1.0), abs=0.05)

    def test_noise_covariates_null(self):
        corrected = []
        for s in range(10):
            c = generate_synthetic_cohort(SyntheticCohortConfig(n_subjects=300, V=4, T=3, seed=100 + s))
            Z = stream(s, "noise").standard_normal((300, 3))
            corrected.append(bootstrap_optimism(benchmark_conventional, Z, c.outcomes, B=20, seed=s).corrected_c)
        assert np.mean(corrected) == pytest.approx(0.5, abs=0.05)

    def test_duplicated_covariates_equal_weights(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=80)
        o = SurvivalData(rng.exponential(size=80) / np.exp(z), np.ones(80, int))
        scorer = benchmark_conventional(np.column_stack([z, z]), o, seed=0)
        assert scorer.penalty > 0
        assert scorer.coefficients[0] == pytest.approx(scorer.coefficients[1], abs=1e-10)

    def test_standardisation_uses_training_statistics(self):
        rng = np.random.default_rng(4)
        Z = rng.normal(10.0, 3.0, size=(60, 2))
        o = SurvivalData(rng.exponential(size=60), np.ones(60, int))
        scorer = benchmark_conventional(Z, o, seed=0)
        np.testing.assert_allclose(scorer.mean, Z.mean(axis=0))
        np.testing.assert_allclose(scorer(Z), ((Z - Z.mean(0)) / Z.std(0)) @ scorer.coefficients)


class TestCompareModels:
    def _reports(self, B=8, seed=0):
        c = generate_synthetic_cohort(SyntheticCohortConfig(n_subjects=120, V=4, T=3, seed=seed))
        good = c.planted_risk[:, None] + 0.1 * stream(seed, "g").standard_normal((120, 1))
        noise = stream(seed, "z").standard_normal((120, 2))
        a = bootstrap_optimism(benchmark_conventional, good, c.outcomes, B=B, seed=seed)
        b = bootstrap_optimism(benchmark_conventional, noise, c.outcomes, B=B, seed=seed)
        return a, b

    def test_self_comparison(self):
        a, _ = self._reports()
        res = compare_models(a, a)
        assert res.mean_difference == 0.0
        assert res.p_value == 1.0

    def test_signal_beats_noise(self):
        a, b = self._reports(B=12)
        res = compare_models(a, b)
        assert res.mean_difference > 0
        assert res.p_value < 0.05
        assert res.exact

    def test_matches_exhaustive_enumeration(self):
        for B in range(2, 13):
            d = stream(B, "diffs").normal(0.02, 0.05, size=B)
            reps_a = [Replicate(i, 0.7, 0.7 - 0.01 - x, [i]) for i, x in enumerate(d)]
            reps_b = [Replicate(i, 0.6, 0.59, [i]) for i in range(B)]
            mk = lambda reps: ValidationReport(0.7, reps, 0.0, 0.7, (0, 0), B)
            res = compare_models(mk(reps_a), mk(reps_b), exact=True)
            diffs = [(0.7 - r.optimism) - (0.7 - q.optimism) for r, q in zip(reps_a, reps_b)]
            assert res.p_value == pytest.approx(sign_flip_pvalue_exhaustive(diffs), abs=1e-12)

    def test_monte_carlo_close_to_exact(self):
        d = stream(0, "diffs").normal(0.01, 0.05, size=14)
        reps_a = [Replicate(i, 0.7, 0.7 - x, [i]) for i, x in enumerate(d)]
        reps_b = [Replicate(i, 0.6, 0.6, [i]) for i in range(14)]
        mk = lambda reps: ValidationReport(0.7, reps, 0.0, 0.7, (0, 0), 14)
        mc = compare_models(mk(reps_a), mk(reps_b), n_permutations=10_000)
        ex = compare_models(mk(reps_a), mk(reps_b), exact=True)
        assert not mc.exact and ex.exact
        assert mc.p_value == pytest.approx(ex.p_value, abs=0.02)

    def test_mismatched_counts(self):
        a, _ = self._reports(B=4)
        _, b = self._reports(B=5)
        with pytest.raises(MalformedInputError):
            compare_models(a, b)


class TestOutputs:
    def test_km_csv(self, tmp_path):
        km = kaplan_meier(SurvivalData([1, 2, 2, 3], [1, 1, 0, 1]))
        write_km_csv(tmp_path / "km.csv", {"low": km, "high": km})
        lines = (tmp_path / "km.csv").read_text().splitlines()
        assert lines[0] == "group,time,n_at_risk,n_events,n_censored,survival,ci_lower,ci_upper"
        assert lines[1].startswith("low,0.0,4,0,0,1.0")
        assert len(lines) == 1 + 2 * (1 + 3)

    def test_logrank_csv(self, tmp_path):
        res = logrank_test(SurvivalData([1, 3], [1, 1]), SurvivalData([2, 4], [1, 1]))
        write_logrank_csv(tmp_path / "lr.csv", res, 2, 2)
        header, row = (tmp_path / "lr.csv").read_text().splitlines()
        assert header.split(",")[:3] == ["statistic", "df", "p_value"]
        assert float(row.split(",")[0]) == pytest.approx(8 / 13)
