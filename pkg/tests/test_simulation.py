import math
from pathlib import Path

import numpy as np
import pytest

DEFAULT_SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "diabetes_k3.cfg"


class TestSourcePopulation:
    """Test the synthetic source population."""

    def test_deterministic(self) -> None:
        """Test that a seed fixes the population."""
        from src.simulation import synthesize_source

        first = synthesize_source(seed=3).dataset
        second = synthesize_source(seed=3).dataset
        other = synthesize_source(seed=4).dataset
        assert np.array_equal(first.outcomes, second.outcomes)
        assert np.array_equal(first.baseline, second.baseline)
        assert not np.array_equal(first.outcomes, other.outcomes)

    def test_shape_and_bounds(self) -> None:
        """Test the default layout and covariate ranges."""
        from src.simulation import GeneratorParams, synthesize_source

        params = GeneratorParams()
        src = synthesize_source(params, seed=0)
        ds = src.dataset
        assert ds.outcomes.shape == (380, 3)
        assert ds.observed.all()
        assert ds.covariate_names == ("age", "gender", "weight", "hba1c_baseline")
        assert ds.visit_labels == ("4", "12", "26")
        assert set(np.unique(ds.baseline[:, 1])) <= {0.0, 1.0}
        assert ds.baseline[:, 0].min() >= 18.0 and ds.baseline[:, 0].max() <= 80.0
        assert ds.baseline[:, 3].min() >= 6.0 and ds.baseline[:, 3].max() <= 12.0
        assert src.provenance == {"kind": "synthetic", "seed": 0}

    def test_moments(self) -> None:
        """Test change moments, residual visit correlation and the baseline association."""
        from src.simulation import GeneratorParams, synthesize_source

        params = GeneratorParams(n_source=40_000)
        ds = synthesize_source(params, seed=1).dataset
        means, sds = params.change_moments()
        assert np.allclose(ds.outcomes.mean(axis=0), means, atol=0.01)
        assert np.allclose(ds.outcomes.std(axis=0), sds, atol=0.01)
        residuals = (
            ds.outcomes
            - np.asarray(params.change_means)
            - (ds.baseline[:, 3] - params.hba1c_mean)[:, None] * np.asarray(params.hba1c_slopes)
            - (ds.baseline[:, 2] - params.weight_mean)[:, None] * np.asarray(params.weight_slopes)
        )
        assert np.allclose(residuals.std(axis=0), params.residual_sds, atol=0.01)
        assert np.corrcoef(residuals[:, 0], residuals[:, 1])[0, 1] == pytest.approx(0.7, abs=0.02)
        assert np.corrcoef(ds.baseline[:, 3], ds.outcomes[:, 2])[0, 1] == pytest.approx(-0.5, abs=0.05)

    def test_final_visit_moments_at_default_size(self) -> None:
        """Test the final-visit mean and SD within three standard errors at N=380."""
        from src.simulation import GeneratorParams, synthesize_source

        params = GeneratorParams()
        final = synthesize_source(params, seed=380).dataset.outcomes[:, -1]
        means, sds = params.change_moments()
        n = final.size
        assert abs(final.mean() - means[-1]) < 3.0 * sds[-1] / math.sqrt(n)
        assert abs(final.std() - sds[-1]) < 3.0 * sds[-1] / math.sqrt(2.0 * n)

    def test_prognostic_strength(self) -> None:
        """Test how much of the final change and responder status baseline covariates explain."""
        from src.simulation import GeneratorParams, synthesize_source

        params = GeneratorParams(n_source=40_000)
        src = synthesize_source(params, seed=2)
        ds = src.dataset
        design = np.column_stack([np.ones(ds.n_subjects), ds.baseline])
        final = ds.outcomes[:, -1]
        fitted = design @ np.linalg.lstsq(design, final, rcond=None)[0]
        assert 1.0 - np.var(final - fitted) / np.var(final) == pytest.approx(0.52, abs=0.04)
        achieved = ds.baseline[:, 3] + final
        fitted = design @ np.linalg.lstsq(design, achieved, rcond=None)[0]
        assert 1.0 - np.var(achieved - fitted) / np.var(achieved) == pytest.approx(0.76, abs=0.04)
        assert src.to_binary().dataset.outcomes[:, -1].mean() == pytest.approx(0.44, abs=0.03)

    def test_independent_without_slopes(self) -> None:
        """Test that zero slopes leave baseline HbA1c and the final change uncorrelated."""
        from src.simulation import GeneratorParams, synthesize_source

        params = GeneratorParams(n_source=10_000, hba1c_slopes=(0.0, 0.0, 0.0), weight_slopes=(0.0, 0.0, 0.0))
        ds = synthesize_source(params, seed=3).dataset
        correlation = np.corrcoef(ds.baseline[:, 3], ds.outcomes[:, 2])[0, 1]
        assert abs(correlation) < 3.0 / math.sqrt(10_000)

    def test_invalid_params(self) -> None:
        """Test parameter validation."""
        from src.errors import InvalidParams
        from src.simulation import GeneratorParams, synthesize_source

        with pytest.raises(InvalidParams):
            synthesize_source(GeneratorParams(change_means=(0.0, 0.0)))
        with pytest.raises(InvalidParams):
            synthesize_source(GeneratorParams(residual_correlation=1.0))
        with pytest.raises(InvalidParams):
            synthesize_source(GeneratorParams(residual_sds=(0.3, 0.0, 0.4)))
        with pytest.raises(InvalidParams):
            synthesize_source(GeneratorParams(hba1c_slopes=(0.0, float("nan"), -0.3)))
        not_positive_definite = tuple(tuple(1.0 if i == j else -0.5 for j in range(4)) for i in range(4))
        with pytest.raises(InvalidParams):
            synthesize_source(GeneratorParams(covariate_correlation=not_positive_definite))

    def test_to_binary(self) -> None:
        """Test responder derivation from achieved HbA1c."""
        from src.data_model import OutcomeKind
        from src.simulation import synthesize_source

        src = synthesize_source(seed=2)
        binary = src.to_binary()
        expected = (src.dataset.baseline[:, 3][:, None] + src.dataset.outcomes < 7.0).astype(float)
        assert binary.outcome_kind is OutcomeKind.BINARY
        assert np.array_equal(binary.dataset.outcomes, expected)
        assert binary.provenance["threshold"] == 7.0
        assert binary.to_binary() is binary

    def test_from_dataset_keeps_completers(self, continuous_trial) -> None:
        """Test that a file-backed source drops incomplete subjects."""
        from src.simulation import SourcePopulation

        src = SourcePopulation.from_dataset(continuous_trial, baseline_column="age")
        assert src.dataset.n_subjects == int(continuous_trial.observed.all(axis=1).sum())
        assert src.dataset.observed.all()

    def test_missing_outcomes_rejected(self, continuous_trial) -> None:
        """Test that a population with gaps is refused."""
        from src.errors import InvalidParams
        from src.simulation import SourcePopulation

        with pytest.raises(InvalidParams):
            SourcePopulation(dataset=continuous_trial)


class TestEffectsAndDropout:
    """Test effect injection and dropout hazards."""

    def test_apply_continuous_effect(self) -> None:
        """Test that treated rows are shifted down per visit."""
        from src.simulation import EffectProfile, apply_effect

        outcomes = np.zeros((2, 3))
        treated = np.array([False, True])
        result = apply_effect(outcomes, treated, EffectProfile.continuous(), np.zeros((2, 3)))
        assert np.array_equal(result[0], [0.0, 0.0, 0.0])
        assert np.array_equal(result[1], [-1.0, -1.5, -2.0])

    def test_apply_binary_effect(self) -> None:
        """Test that only treated non-responders with small uniforms flip."""
        from src.simulation import EffectProfile, apply_effect

        outcomes = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        treated = np.array([False, True])
        uniforms = np.array([[0.1, 0.1, 0.1], [0.1, 0.9, 0.1]])
        result = apply_effect(outcomes, treated, EffectProfile.binary(), uniforms)
        assert np.array_equal(result[0], [0.0, 0.0, 1.0])
        assert np.array_equal(result[1], [1.0, 0.0, 1.0])

    def test_effect_validation(self) -> None:
        """Test effect checks against the outcome kind and visit count."""
        from src.data_model import OutcomeKind
        from src.errors import InvalidParams
        from src.simulation import EffectProfile

        with pytest.raises(InvalidParams):
            EffectProfile.binary((0.2, 1.5, 0.3))
        with pytest.raises(InvalidParams):
            EffectProfile.continuous().check(OutcomeKind.BINARY, 3)
        with pytest.raises(InvalidParams):
            EffectProfile.continuous((1.0, 2.0)).check(OutcomeKind.CONTINUOUS, 3)

    def test_mcar_hazards_reproduce_targets(self) -> None:
        """Test that the exact MCAR hazards give the cumulative targets."""
        from scipy import special

        from src.simulation import DropoutMechanism

        intercepts, slope = DropoutMechanism.mcar((0.05, 0.10, 0.15)).hazard_parameters(3)
        survival = np.cumprod(1.0 - special.expit(intercepts[0]))
        assert slope == 0.0
        assert np.allclose(1.0 - survival, [0.05, 0.10, 0.15], atol=1e-12)
        assert np.array_equal(intercepts[0], intercepts[1])

    def test_dropout_validation(self) -> None:
        """Test target and calibration checks."""
        from src.errors import InvalidParams
        from src.simulation import DropoutMechanism

        with pytest.raises(InvalidParams):
            DropoutMechanism.mcar((0.2, 0.1, 0.3))
        with pytest.raises(InvalidParams):
            DropoutMechanism.mar(control=(0.1, 0.2), treated=(0.1,))
        uncalibrated = DropoutMechanism.mar()
        assert not uncalibrated.calibrated
        with pytest.raises(InvalidParams):
            uncalibrated.hazard_parameters(3)
        assert uncalibrated.with_intercepts([[0.0] * 3, [0.0] * 3]).calibrated

    def test_censoring_kernels_agree(self) -> None:
        """Test that the serial and parallel kernels give identical flags."""
        from src.simulation import monotone_censoring

        rng = np.random.default_rng(4)
        driver = rng.normal(size=(500, 3))
        arms = rng.integers(0, 2, size=500)
        intercepts = np.array([[-2.0, -1.5, -1.0], [-2.5, -2.0, -1.5]])
        uniforms = rng.random((500, 3))
        serial = monotone_censoring(driver, arms, intercepts, 0.5, uniforms, use_parallel=False)
        parallel = monotone_censoring(driver, arms, intercepts, 0.5, uniforms, use_parallel=True)
        assert np.array_equal(serial, parallel)
        assert not (~serial[:, :-1] & serial[:, 1:]).any()


class TestGenerateTrial:
    """Test trial generation."""

    def test_deterministic(self) -> None:
        """Test that a seed fixes the trial."""
        from src.simulation import DropoutMechanism, EffectProfile, generate_trial, synthesize_source

        src = synthesize_source(seed=0)
        first = generate_trial(src, 100, EffectProfile.continuous(), DropoutMechanism.mcar(), seed=9)
        second = generate_trial(src, 100, EffectProfile.continuous(), DropoutMechanism.mcar(), seed=9)
        assert np.array_equal(first.outcomes, second.outcomes, equal_nan=True)
        assert np.array_equal(first.arms, second.arms)
        assert first.subject_ids[0] == "S0001"

    def test_resamples_source_rows(self) -> None:
        """Test that without effect or dropout every subject is a source row."""
        from src.simulation import DropoutMechanism, EffectProfile, generate_trial, synthesize_source

        src = synthesize_source(seed=0)
        ds = generate_trial(src, 50, EffectProfile.zero(), DropoutMechanism.none(), seed=1)
        source_rows = {tuple(row) for row in np.column_stack([src.dataset.baseline, src.dataset.outcomes])}
        for row in np.column_stack([ds.baseline, ds.outcomes]):
            assert tuple(row) in source_rows
        assert ds.observed.all()

    def test_mcar_missingness(self) -> None:
        """Test that MCAR dropout hits its cumulative targets."""
        from src.simulation import DropoutMechanism, EffectProfile, generate_trial, synthesize_source

        src = synthesize_source(seed=0)
        ds = generate_trial(src, 200_000, EffectProfile.zero(), DropoutMechanism.mcar(), seed=2)
        missing = 1.0 - ds.observed.mean(axis=0)
        assert np.allclose(missing, [0.05, 0.10, 0.15], atol=0.005)

    def test_calibrated_mar_missingness(self) -> None:
        """Test that calibrated MAR intercepts hit the per-arm targets."""
        from src.simulation import (
            DropoutMechanism,
            EffectProfile,
            calibrate_mar_intercepts,
            generate_trial,
            synthesize_source,
        )

        src = synthesize_source(seed=0)
        effect = EffectProfile.continuous()
        dropout = DropoutMechanism.mar(slope=0.5)
        intercepts = calibrate_mar_intercepts(src, effect, dropout, n_calibration=100_000, seed=1)
        ds = generate_trial(src, 200_000, effect, dropout.with_intercepts(intercepts), seed=3)
        for arm, targets in enumerate(dropout.arm_targets):
            missing = 1.0 - ds.observed[ds.arms == arm].mean(axis=0)
            assert np.allclose(missing, targets, atol=0.01)

    def test_calibration_needs_mar(self) -> None:
        """Test that MCAR dropout has nothing to calibrate."""
        from src.errors import InvalidParams
        from src.simulation import DropoutMechanism, EffectProfile, calibrate_mar_intercepts, synthesize_source

        with pytest.raises(InvalidParams):
            calibrate_mar_intercepts(synthesize_source(), EffectProfile.zero(), DropoutMechanism.mcar())

    def test_invalid_size(self) -> None:
        """Test that an empty trial is refused."""
        from src.errors import InvalidParams
        from src.simulation import DropoutMechanism, EffectProfile, generate_trial, synthesize_source

        with pytest.raises(InvalidParams):
            generate_trial(synthesize_source(), 0, EffectProfile.zero(), DropoutMechanism.none(), seed=0)


class TestTrueDelta:
    """Test the analytic and Monte Carlo effect sizes."""

    def test_analytic(self) -> None:
        """Test the closed forms for each effect kind."""
        from src.simulation import EffectProfile, analytic_true_delta, synthesize_source

        src = synthesize_source(seed=0)
        binary = src.to_binary()
        assert analytic_true_delta(src, EffectProfile.zero()) == 0.0
        assert analytic_true_delta(src, EffectProfile.continuous()) == -2.0
        non_responders = float(np.mean(binary.dataset.outcomes[:, -1] == 0.0))
        assert analytic_true_delta(binary, EffectProfile.binary()) == pytest.approx(0.3 * non_responders)

    @pytest.mark.parametrize("outcome_kind", ["continuous", "binary"])
    def test_oracle_agrees(self, outcome_kind: str) -> None:
        """Test that the Monte Carlo oracle lands near the analytic value."""
        from src.simulation import EffectProfile, analytic_true_delta, synthesize_source, true_delta_oracle

        src = synthesize_source(seed=0)
        if outcome_kind == "binary":
            src, effect = src.to_binary(), EffectProfile.binary()
        else:
            effect = EffectProfile.continuous()
        oracle = true_delta_oracle(src, effect, seed=4)
        assert abs(oracle.delta - analytic_true_delta(src, effect)) < 4.0 * oracle.mc_se

    def test_oracle_minimum_draws(self) -> None:
        """Test that a small oracle run is refused."""
        from src.errors import InvalidParams
        from src.simulation import EffectProfile, synthesize_source, true_delta_oracle

        with pytest.raises(InvalidParams):
            true_delta_oracle(synthesize_source(), EffectProfile.zero(), n_mc=1000)


class TestMetrics:
    """Test Monte Carlo performance metrics."""

    @pytest.mark.parametrize("mse_estimator,expected", [(0.0085, 1.48), (0.0059, 2.14), (0.0058, 2.17)])
    def test_relative_mse(self, mse_estimator: float, expected: float) -> None:
        """Test the ratio against published MSE pairs."""
        from src.simulation import relative_mse

        assert round(relative_mse(0.0126, mse_estimator), 2) == expected

    def test_relative_mse_edge_cases(self) -> None:
        """Test zero MSE and negative input."""
        from src.errors import InvalidParams
        from src.simulation import relative_mse

        assert relative_mse(0.1, 0.0) == math.inf
        assert relative_mse(0.0, 0.0) == 1.0
        with pytest.raises(InvalidParams):
            relative_mse(-1.0, 0.1)

    def test_summarize(self) -> None:
        """Test that MSE decomposes into VAR plus squared bias."""
        from src.simulation import summarize_replicates

        rng = np.random.default_rng(0)
        estimates = rng.normal(0.3, 0.2, size=500)
        estimates[:3] = np.nan
        covered = rng.random(497) < 0.9
        metrics = summarize_replicates("mmrm", estimates, 0.25, covered, {"NotConverged": 3})
        assert metrics.replicates == 497
        assert metrics.mse == pytest.approx(metrics.variance + metrics.bias ** 2, abs=1e-12)
        assert metrics.coverage == pytest.approx(float(covered.mean()))
        assert metrics.coverage_replicates == 497
        assert metrics.failures == {"NotConverged": 3}
        assert metrics.bias_se > 0.0

    def test_summarize_without_estimates(self) -> None:
        """Test a row where every replicate failed."""
        from src.simulation import summarize_replicates

        metrics = summarize_replicates("tmle", np.full(4, np.nan), 0.0)
        assert metrics.replicates == 0
        assert math.isnan(metrics.mse)
        assert metrics.coverage is None


class TestRunScenario:
    """Test Monte Carlo scenario runs."""

    @staticmethod
    def scenario(dropout=None):
        from src.simulation import DropoutMechanism, EffectProfile, GeneratorParams, Scenario, synthesize_source

        return Scenario(
            name="continuous/beneficial/mcar",
            source=synthesize_source(GeneratorParams(n_source=150), seed=5),
            n=120,
            effect=EffectProfile.continuous(),
            dropout=dropout or DropoutMechanism.mcar(),
        )

    def test_replicate_seeds(self) -> None:
        """Test that replicate streams are fixed and distinct."""
        from src.simulation import replicate_seeds

        first = replicate_seeds(7, 0)
        assert first[1] == replicate_seeds(7, 0)[1]
        assert first[1] != replicate_seeds(7, 1)[1]
        assert first[0].spawn_key == (0, 0)

    def test_point_estimates(self) -> None:
        """Test rows, the reference ratio and the true delta."""
        from src.estimators import EstimatorSpec
        from src.simulation import run_scenario

        metrics = run_scenario(self.scenario(), [EstimatorSpec("unadjusted"), EstimatorSpec("mmrm")],
                               replicates=4, seed=1)
        assert metrics.true_delta == -2.0
        assert [row.estimator for row in metrics.rows] == ["unadjusted", "mmrm"]
        reference = metrics.row("unadjusted")
        assert reference.relative_mse == 1.0
        assert reference.relative_mse_se == 0.0
        assert reference.replicates == 4
        assert reference.coverage is None
        assert metrics.row("mmrm").relative_mse > 0.0
        with pytest.raises(KeyError):
            metrics.row("tmle")

    def test_deterministic_across_workers(self) -> None:
        """Test that the worker count does not change any metric."""
        from src.estimators import EstimatorSpec
        from src.simulation import run_scenario

        specs = [EstimatorSpec("unadjusted"), EstimatorSpec("tmle")]
        serial = run_scenario(self.scenario(), specs, replicates=6, seed=2, workers=1)
        parallel = run_scenario(self.scenario(), specs, replicates=6, seed=2, workers=3)
        for a, b in zip(serial.rows, parallel.rows):
            assert (a.bias, a.variance, a.mse, a.relative_mse) == (b.bias, b.variance, b.mse, b.relative_mse)

    def test_coverage(self) -> None:
        """Test that bootstrapping records interval coverage per replicate."""
        from src.estimators import EstimatorSpec
        from src.simulation import run_scenario

        metrics = run_scenario(self.scenario(), [EstimatorSpec("unadjusted")], replicates=3, boot_B=20, seed=3)
        row = metrics.row("unadjusted")
        assert row.coverage_replicates == 3
        assert 0.0 <= row.coverage <= 1.0

    def test_rejects_uncalibrated_mar(self) -> None:
        """Test that MAR dropout must be calibrated before running."""
        from src.errors import InvalidParams
        from src.estimators import EstimatorSpec
        from src.simulation import DropoutMechanism, run_scenario

        with pytest.raises(InvalidParams):
            run_scenario(self.scenario(DropoutMechanism.mar()), [EstimatorSpec("unadjusted")], replicates=3)

    def test_rejects_single_replicate(self) -> None:
        """Test the replicate minimum."""
        from src.errors import InvalidParams
        from src.estimators import EstimatorSpec
        from src.simulation import run_scenario

        with pytest.raises(InvalidParams):
            run_scenario(self.scenario(), [EstimatorSpec("unadjusted")], replicates=1)


@pytest.mark.slow
class TestDefaultScenarios:
    """Full-scale Monte Carlo checks on the default scenario file."""

    @pytest.fixture(scope="class")
    def results(self):
        from src.scenario_config import load_scenario_file
        from src.simulation import run_scenario

        config = load_scenario_file(DEFAULT_SCENARIO)
        return {
            scenario.name: run_scenario(
                scenario, config.estimators_for(scenario.outcome_kind), replicates=1000,
                boot_B=0, seed=config.seed, workers=8,
            )
            for scenario in config.build_scenarios()
        }

    def test_adjusted_estimators_unbiased(self, results) -> None:
        """Test that adjusted estimators stay within three Monte Carlo SEs of zero bias."""
        for metrics in results.values():
            for row in metrics.rows:
                if row.estimator in ("mmrm_star", "tmle", "glmm"):
                    assert abs(row.bias) < 3.0 * row.bias_se, f"{metrics.scenario}/{row.estimator}"

    def test_efficiency_ordering(self, results) -> None:
        """Test that covariate adjustment pays off in every scenario."""
        for metrics in results.values():
            for row in metrics.rows:
                if row.estimator != "unadjusted":
                    assert row.relative_mse > 1.2, f"{metrics.scenario}/{row.estimator}"
            if metrics.scenario.startswith("continuous"):
                assert metrics.row("mmrm_star").relative_mse >= metrics.row("mmrm").relative_mse
            else:
                assert metrics.row("tmle").mse <= 1.1 * metrics.row("glmm").mse

    def test_efficiency_bands(self, results) -> None:
        """Test the size of the adjustment gain under the default prognostic strength."""
        for name, metrics in results.items():
            if name.startswith("binary"):
                assert 1.5 <= metrics.row("glmm").relative_mse <= 2.6, name
            else:
                gain = metrics.row("mmrm").mse / metrics.row("mmrm_star").mse - 1.0
                assert 0.3 <= gain <= 0.7, name
                if name.endswith("/mar"):
                    assert 1.5 <= metrics.row("tmle").relative_mse <= 2.8, name

    def test_bca_coverage(self) -> None:
        """Test nominal BCa coverage in the null MCAR continuous scenario."""
        from src.scenario_config import load_scenario_file
        from src.simulation import run_scenario

        config = load_scenario_file(DEFAULT_SCENARIO)
        (scenario,) = config.build_scenarios(only="continuous/zero/mcar")
        metrics = run_scenario(scenario, config.estimators_for(scenario.outcome_kind), replicates=500,
                               boot_B=1000, seed=config.seed, workers=8)
        for row in metrics.rows:
            assert 0.92 <= row.coverage <= 0.98, row.estimator
