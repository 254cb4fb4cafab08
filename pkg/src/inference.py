"""
Nonparametric bootstrap variance and BCa confidence intervals.

Resampling is at the subject level so each trajectory stays intact.
Replicate b draws its resample from SeedSequence(seed, spawn_key=(b,)),
which makes results independent of worker count and scheduling.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy import stats

from .data_model import TrialDataset
from .errors import DegenerateReplicates, InvalidParams, TooManyFailures, TrialAnalysisError
from .estimators import EffectEstimate
from .parallel import map_ordered

MAX_FAILURE_FRACTION = 0.10

Estimator = Callable[[TrialDataset], EffectEstimate]


@dataclass(frozen=True)
class BcaInterval:
    """
    Bootstrap confidence interval.

    fallback_used is 'none' for a proper BCa interval, 'percentile' when
    the bias correction or acceleration was unusable and 'degenerate' when
    every replicate was identical.
    """

    lower: float
    upper: float
    level: float
    z0: float
    acceleration: float
    fallback_used: str = "none"

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> Dict[str, object]:
        def finite(value: float) -> Optional[float]:
            return value if math.isfinite(value) else None

        return {
            "lower": self.lower,
            "upper": self.upper,
            "level": self.level,
            "z0": finite(self.z0),
            "acceleration": finite(self.acceleration),
            "fallback_used": self.fallback_used,
        }


@dataclass(frozen=True)
class JackknifeResult:
    values: np.ndarray
    failed: int = 0
    failures: Dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class BootstrapResult:
    point: EffectEstimate
    replicates: np.ndarray
    excluded: int
    variance: float
    interval: BcaInterval
    seed: int
    B: int
    failures: Dict[str, int] = field(default_factory=dict)
    jackknife: Optional[JackknifeResult] = None

    @property
    def retained(self) -> int:
        return int(self.replicates.size)

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.variance)

    def to_dict(self) -> Dict[str, object]:
        return {
            "B": self.B,
            "seed": self.seed,
            "retained": self.retained,
            "excluded": self.excluded,
            "failures": dict(sorted(self.failures.items())),
            "variance": self.variance,
            "interval": self.interval.to_dict(),
        }


# --- intervals ----------------------------------------------------------------


def _validate_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise InvalidParams(f"confidence level must lie in (0, 1), got {level}")


def percentile_interval(replicates: Sequence[float], level: float = 0.95) -> BcaInterval:
    """Percentile interval from linear-interpolation quantiles."""
    _validate_level(level)
    values = np.asarray(replicates, dtype=np.float64)
    if values.size == 0:
        raise InvalidParams("no replicates to form an interval")
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(values, [alpha, 1.0 - alpha])
    return BcaInterval(float(lower), float(upper), level, 0.0, 0.0, "percentile")


def acceleration(jackknife_values: Sequence[float]) -> float:
    """Jackknife acceleration; NaN when the denominator vanishes."""
    values = np.asarray(jackknife_values, dtype=np.float64)
    if values.size < 2:
        return float("nan")
    deviations = values.mean() - values
    denominator = 6.0 * float(np.sum(deviations ** 2)) ** 1.5
    if denominator == 0.0:
        return float("nan")
    return float(np.sum(deviations ** 3)) / denominator


def bca_interval(
    replicates: Sequence[float],
    point: float,
    jackknife_values: Sequence[float],
    level: float = 0.95,
    strict: bool = False,
) -> BcaInterval:
    """
    Bias-corrected and accelerated bootstrap interval.

    z0 counts half of the replicates tied with the point estimate. The
    interval falls back to plain percentiles when z0 is not finite or the
    jackknife acceleration is undefined.

    Raises:
        DegenerateReplicates: Only with strict=True, when all replicates are equal
    """
    _validate_level(level)
    values = np.asarray(replicates, dtype=np.float64)
    if values.size == 0:
        raise InvalidParams("no replicates to form an interval")
    if np.ptp(values) == 0.0:
        if strict:
            raise DegenerateReplicates("all bootstrap replicates are identical")
        logger.debug("All replicates identical; returning the point interval")
        return BcaInterval(float(point), float(point), level, 0.0, 0.0, "degenerate")

    below = np.count_nonzero(values < point) + 0.5 * np.count_nonzero(values == point)
    z0 = float(stats.norm.ppf(below / values.size))
    a = acceleration(jackknife_values)
    if not (math.isfinite(z0) and math.isfinite(a)):
        logger.warning(f"BCa correction unavailable (z0={z0}, a={a}); using the percentile interval")
        fallback = percentile_interval(values, level)
        return BcaInterval(fallback.lower, fallback.upper, level, z0, a, "percentile")

    alpha = (1.0 - level) / 2.0
    probabilities = []
    for z in stats.norm.ppf([alpha, 1.0 - alpha]):
        shifted = z0 + z
        denominator = 1.0 - a * shifted
        if denominator <= 0.0:
            logger.warning("BCa adjustment left its domain; using the percentile interval")
            fallback = percentile_interval(values, level)
            return BcaInterval(fallback.lower, fallback.upper, level, z0, a, "percentile")
        probabilities.append(float(stats.norm.cdf(z0 + shifted / denominator)))
    lower, upper = np.quantile(values, probabilities)
    return BcaInterval(float(lower), float(upper), level, z0, a, "none")


# --- resampling work items ------------------------------------------------------


@dataclass(frozen=True)
class _ReplicateTask:
    ds: TrialDataset
    estimator: Estimator
    seed: int
    start: int
    stop: int


@dataclass(frozen=True)
class _FoldTask:
    ds: TrialDataset
    estimator: Estimator
    start: int
    stop: int


def _evaluate(estimator: Estimator, ds: TrialDataset) -> Tuple[float, Optional[str]]:
    try:
        estimate = estimator(ds)
    except (TrialAnalysisError, np.linalg.LinAlgError) as exc:
        return float("nan"), type(exc).__name__
    if not estimate.converged:
        return float("nan"), "NotConverged"
    if not math.isfinite(estimate.delta):
        return float("nan"), "NonFinite"
    return estimate.delta, None


def resample_indices(n: int, seed: int, replicate: int) -> np.ndarray:
    """Subject indices of bootstrap replicate `replicate`."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))
    return rng.integers(0, n, size=n)


def _run_replicates(task: _ReplicateTask) -> List[Tuple[float, Optional[str]]]:
    n = task.ds.n_subjects
    return [
        _evaluate(task.estimator, task.ds.take(resample_indices(n, task.seed, b)))
        for b in range(task.start, task.stop)
    ]


def _run_folds(task: _FoldTask) -> List[Tuple[float, Optional[str]]]:
    everyone = np.arange(task.ds.n_subjects)
    return [
        _evaluate(task.estimator, task.ds.take(np.delete(everyone, i)))
        for i in range(task.start, task.stop)
    ]


def _chunks(total: int, workers: int) -> List[Tuple[int, int]]:
    size = max(1, math.ceil(total / max(1, workers * 4)))
    return [(start, min(start + size, total)) for start in range(0, total, size)]


def _split(outcomes: Sequence[Tuple[float, Optional[str]]]) -> Tuple[np.ndarray, Dict[str, int]]:
    values = np.array([value for value, error in outcomes if error is None], dtype=np.float64)
    failures = Counter(error for _, error in outcomes if error is not None)
    return values, dict(sorted(failures.items()))


def jackknife(ds: TrialDataset, estimator: Estimator, workers: int = 1) -> JackknifeResult:
    """
    Leave-one-subject-out estimates; failed folds are excluded and counted.
    """
    if ds.n_subjects < 3:
        raise InvalidParams(f"jackknife needs at least 3 subjects, got {ds.n_subjects}")
    tasks = [_FoldTask(ds, estimator, start, stop) for start, stop in _chunks(ds.n_subjects, workers)]
    outcomes = [item for chunk in map_ordered(_run_folds, tasks, workers) for item in chunk]
    values, failures = _split(outcomes)
    failed = sum(failures.values())
    if failed:
        logger.warning(f"Jackknife: {failed} of {ds.n_subjects} folds failed {failures}")
    return JackknifeResult(values=values, failed=failed, failures=failures)


def bootstrap(
    ds: TrialDataset,
    estimator: Estimator,
    B: int,
    seed: int,
    level: float = 0.95,
    workers: int = 1,
    progress: bool = False,
) -> BootstrapResult:
    """
    Subject-level nonparametric bootstrap with a BCa interval.

    Failed or non-converged replicates are excluded and counted by error
    class.

    Args:
        ds: Trial dataset
        estimator: Picklable callable returning an EffectEstimate
        B: Replicate count (at least 2)
        seed: Non-negative integer seed
        level: Nominal interval coverage
        workers: Process count
        progress: Show a progress bar on stderr

    Returns:
        BootstrapResult

    Raises:
        TooManyFailures: If more than 10% of replicates fail
    """
    if B < 2:
        raise InvalidParams(f"bootstrap needs B >= 2, got {B}")
    if seed < 0:
        raise InvalidParams(f"seed must be non-negative, got {seed}")
    point = estimator(ds)
    label = point.label or point.estimator_kind.value
    logger.info(f"Bootstrapping {label}: B={B}, seed={seed}, workers={workers}")

    tasks = [_ReplicateTask(ds, estimator, seed, start, stop) for start, stop in _chunks(B, workers)]
    outcomes = [
        item
        for chunk in map_ordered(_run_replicates, tasks, workers, progress=progress, description=label)
        for item in chunk
    ]
    replicates, failures = _split(outcomes)
    excluded = B - replicates.size
    if excluded:
        logger.warning(f"{label}: excluded {excluded} of {B} replicates {failures}")
    if excluded > MAX_FAILURE_FRACTION * B:
        raise TooManyFailures(excluded, B)

    variance = float(np.var(replicates, ddof=1)) if replicates.size > 1 else 0.0
    folds = jackknife(ds, estimator, workers)
    interval = bca_interval(replicates, point.delta, folds.values, level)
    return BootstrapResult(
        point=point,
        replicates=replicates,
        excluded=int(excluded),
        variance=variance,
        interval=interval,
        seed=seed,
        B=B,
        failures=failures,
        jackknife=folds,
    )
