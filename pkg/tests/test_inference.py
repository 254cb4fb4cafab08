from statistics import NormalDist

import numpy as np
import pytest


class FlakyEstimator:
    """Unadjusted estimator that fails on every `period`-th call after the first."""

    def __init__(self, period: int):
        self.period = period
        self.calls = 0

    def __call__(self, ds):
        from src.errors import SingularSystem
        from src.estimators import unadjusted

        self.calls += 1
        if self.calls > 1 and self.calls % self.period == 0:
            raise SingularSystem("forced failure")
        return unadjusted(ds)


class TestAcceleration:
    """Test the jackknife acceleration."""

    def test_known_value(self) -> None:
        """Test a small hand-computed case."""
        from src.inference import acceleration

        assert acceleration([0.0, 0.0, 3.0]) == pytest.approx(-1.0 / 6.0 ** 1.5, abs=1e-14)

    def test_symmetric_is_zero(self) -> None:
        """Test that symmetric jackknife values have no skew."""
        from src.inference import acceleration

        assert acceleration([1.0, 2.0, 3.0, 4.0, 5.0]) == pytest.approx(0.0, abs=1e-14)

    def test_undefined(self) -> None:
        """Test that constant or too-short inputs give NaN."""
        from src.inference import acceleration

        assert np.isnan(acceleration([2.0, 2.0, 2.0]))
        assert np.isnan(acceleration([1.0]))


class TestBcaInterval:
    """Test BCa and fallback intervals."""

    replicates = 0.1 * np.arange(20)
    jackknife_values = np.array([1.0, 1.2, 0.9, 1.1, 0.95, 1.4])

    def test_matches_hand_formula(self) -> None:
        """Test the interval against a direct evaluation of the BCa quantiles."""
        from src.inference import bca_interval

        point = 1.05
        normal = NormalDist()
        z0 = normal.inv_cdf(11 / 20)
        deviations = self.jackknife_values.mean() - self.jackknife_values
        a = np.sum(deviations ** 3) / (6.0 * np.sum(deviations ** 2) ** 1.5)
        probabilities = []
        for z in (normal.inv_cdf(0.025), normal.inv_cdf(0.975)):
            probabilities.append(normal.cdf(z0 + (z0 + z) / (1.0 - a * (z0 + z))))
        expected = np.quantile(self.replicates, probabilities)

        interval = bca_interval(self.replicates, point, self.jackknife_values, 0.95)
        assert interval.fallback_used == "none"
        assert interval.z0 == pytest.approx(z0, abs=1e-10)
        assert interval.acceleration == pytest.approx(a, abs=1e-10)
        assert interval.lower == pytest.approx(expected[0], abs=1e-10)
        assert interval.upper == pytest.approx(expected[1], abs=1e-10)

    def test_ties_count_half(self) -> None:
        """Test that replicates equal to the point contribute one half."""
        from src.inference import bca_interval

        interval = bca_interval([1.0, 2.0, 2.0, 3.0], 2.0, [1.0, 2.0, 3.0])
        assert interval.z0 == pytest.approx(0.0, abs=1e-12)

    def test_infinite_bias_falls_back_to_percentile(self) -> None:
        """Test the fallback when the point lies below every replicate."""
        from src.inference import bca_interval, percentile_interval

        interval = bca_interval(self.replicates, -1.0, self.jackknife_values)
        reference = percentile_interval(self.replicates)
        assert interval.fallback_used == "percentile"
        assert (interval.lower, interval.upper) == (reference.lower, reference.upper)

    def test_undefined_acceleration_falls_back(self) -> None:
        """Test the fallback for constant jackknife values."""
        from src.inference import bca_interval

        interval = bca_interval(self.replicates, 1.05, [0.5, 0.5, 0.5])
        assert interval.fallback_used == "percentile"
        assert np.isnan(interval.acceleration)
        assert interval.to_dict()["acceleration"] is None

    def test_degenerate(self) -> None:
        """Test identical replicates."""
        from src.errors import DegenerateReplicates
        from src.inference import bca_interval

        interval = bca_interval([0.3] * 10, 0.3, [0.3, 0.3, 0.3])
        assert interval.fallback_used == "degenerate"
        assert interval.lower == interval.upper == 0.3
        assert interval.covers(0.3)
        with pytest.raises(DegenerateReplicates):
            bca_interval([0.3] * 10, 0.3, [0.3, 0.3, 0.3], strict=True)

    @pytest.mark.parametrize("level", [0.0, 1.0, 1.5])
    def test_invalid_level(self, level: float) -> None:
        """Test that levels outside (0, 1) are rejected."""
        from src.errors import InvalidParams
        from src.inference import percentile_interval

        with pytest.raises(InvalidParams):
            percentile_interval(self.replicates, level)

    def test_percentile_quantiles(self) -> None:
        """Test that the percentile interval uses linear-interpolation quantiles."""
        from src.inference import percentile_interval

        interval = percentile_interval(np.arange(101, dtype=float), 0.9)
        assert interval.lower == pytest.approx(5.0)
        assert interval.upper == pytest.approx(95.0)


class TestResampling:
    """Test subject resampling streams."""

    def test_resample_indices_are_reproducible(self) -> None:
        """Test that a replicate's indices depend only on seed and replicate number."""
        from src.inference import resample_indices

        first = resample_indices(50, 7, 3)
        assert np.array_equal(first, resample_indices(50, 7, 3))
        assert not np.array_equal(first, resample_indices(50, 7, 4))
        assert first.min() >= 0 and first.max() < 50

    def test_jackknife(self, trial_factory) -> None:
        """Test leave-one-out values of the unadjusted estimator."""
        from src.estimators import EstimatorSpec
        from src.inference import jackknife

        ds = trial_factory(n=30, seed=12)
        result = jackknife(ds, EstimatorSpec("unadjusted"))
        assert result.values.shape == (30,)
        assert result.failed == 0

    def test_jackknife_too_small(self, trial_factory) -> None:
        """Test that fewer than three subjects are rejected."""
        from src.errors import InvalidParams
        from src.estimators import EstimatorSpec
        from src.inference import jackknife

        ds = trial_factory(n=10, seed=12).take([0, 1])
        with pytest.raises(InvalidParams):
            jackknife(ds, EstimatorSpec("unadjusted"))


class TestBootstrap:
    """Test the subject-level bootstrap."""

    def test_result(self, continuous_trial) -> None:
        """Test replicate bookkeeping and the variance."""
        from src.estimators import EstimatorSpec
        from src.inference import bootstrap

        result = bootstrap(continuous_trial, EstimatorSpec("unadjusted"), B=40, seed=3)
        assert result.retained == 40
        assert result.excluded == 0
        assert result.variance == pytest.approx(float(np.var(result.replicates, ddof=1)))
        assert result.standard_error == pytest.approx(np.sqrt(result.variance))
        assert result.interval.lower <= result.interval.upper
        assert result.jackknife is not None and result.jackknife.values.size == continuous_trial.n_subjects
        payload = result.to_dict()
        assert payload["B"] == 40 and payload["seed"] == 3 and payload["failures"] == {}

    def test_deterministic_across_workers(self, continuous_trial) -> None:
        """Test that the replicates do not depend on the process count."""
        from src.estimators import EstimatorSpec
        from src.inference import bootstrap

        serial = bootstrap(continuous_trial, EstimatorSpec("unadjusted"), B=30, seed=5, workers=1)
        parallel = bootstrap(continuous_trial, EstimatorSpec("unadjusted"), B=30, seed=5, workers=2)
        assert np.array_equal(serial.replicates, parallel.replicates)
        assert serial.interval == parallel.interval

    def test_seed_changes_replicates(self, continuous_trial) -> None:
        """Test that a different seed draws different resamples."""
        from src.estimators import EstimatorSpec
        from src.inference import bootstrap

        first = bootstrap(continuous_trial, EstimatorSpec("unadjusted"), B=20, seed=1)
        second = bootstrap(continuous_trial, EstimatorSpec("unadjusted"), B=20, seed=2)
        assert not np.array_equal(first.replicates, second.replicates)

    def test_failures_are_excluded_and_counted(self, continuous_trial) -> None:
        """Test that a few failing replicates are dropped and tallied."""
        from src.inference import bootstrap

        result = bootstrap(continuous_trial, FlakyEstimator(period=20), B=40, seed=3)
        assert result.excluded == 2
        assert result.retained == 38
        assert result.failures == {"SingularSystem": 2}

    def test_too_many_failures(self, continuous_trial) -> None:
        """Test that failing more than a tenth of replicates raises."""
        from src.errors import TooManyFailures
        from src.inference import bootstrap

        with pytest.raises(TooManyFailures):
            bootstrap(continuous_trial, FlakyEstimator(period=2), B=20, seed=3)

    @pytest.mark.parametrize("B,seed", [(1, 0), (10, -1)])
    def test_invalid_arguments(self, continuous_trial, B: int, seed: int) -> None:
        """Test argument validation."""
        from src.errors import InvalidParams
        from src.estimators import EstimatorSpec
        from src.inference import bootstrap

        with pytest.raises(InvalidParams):
            bootstrap(continuous_trial, EstimatorSpec("unadjusted"), B=B, seed=seed)
