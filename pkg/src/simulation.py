"""
Monte Carlo trial simulation: synthetic source population, resampled
trials with randomized arms, effect injection, monotone dropout and
aggregation of estimator performance metrics.
"""

import math
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numba as nb
import numpy as np
from loguru import logger
from scipy import special, stats

from .data_model import CovariateKind, CovariateSpec, OutcomeKind, TrialDataset
from .errors import CalibrationOutOfRange, InvalidParams, TrialAnalysisError
from .estimators import EstimatorSpec
from .inference import bootstrap
from .parallel import map_ordered

INTERCEPT_BOUND = 20.0
CALIBRATION_SAMPLE = 200_000
ORACLE_MINIMUM = 100_000

SeedLike = Union[int, np.random.SeedSequence]


# --- synthetic source population ------------------------------------------------


DEFAULT_COVARIATE_CORRELATION = (
    (1.0, 0.0, -0.1, -0.1),
    (0.0, 1.0, -0.3, 0.0),
    (-0.1, -0.3, 1.0, 0.0),
    (-0.1, 0.0, 0.0, 1.0),
)


@dataclass(frozen=True)
class GeneratorParams:
    """
    Synthetic diabetes-trial completer population.

    Baseline covariates (age, gender, body weight, baseline HbA1c) come from
    truncated-normal and Bernoulli marginals joined by a Gaussian copula.
    The HbA1c change at visit t is

        change_means[t] + hba1c_slopes[t] * (hba1c - hba1c_mean)
                        + weight_slopes[t] * (weight - weight_mean) + e_t

    with e multivariate normal, standard deviations residual_sds and
    correlation residual_correlation ** |s - t|. The defaults make baseline
    HbA1c and weight prognostic mainly for the final visit, where baseline
    HbA1c correlates with the change at about -0.5.
    """

    n_source: int = 380
    visit_labels: Tuple[str, ...] = ("4", "12", "26")
    age_mean: float = 57.0
    age_sd: float = 10.0
    age_bounds: Tuple[float, float] = (18.0, 80.0)
    female_probability: float = 0.45
    weight_mean: float = 88.0
    weight_sd: float = 18.0
    weight_bounds: Tuple[float, float] = (45.0, 180.0)
    hba1c_mean: float = 8.1
    hba1c_sd: float = 1.0
    hba1c_bounds: Tuple[float, float] = (6.0, 12.0)
    covariate_correlation: Tuple[Tuple[float, ...], ...] = DEFAULT_COVARIATE_CORRELATION
    change_means: Tuple[float, ...] = (-0.6, -0.9, -1.0)
    hba1c_slopes: Tuple[float, ...] = (0.0, -0.10, -0.31)
    weight_slopes: Tuple[float, ...] = (0.0, 0.0, -0.0165)
    residual_sds: Tuple[float, ...] = (0.35, 0.38, 0.40)
    residual_correlation: float = 0.7

    def validate(self) -> None:
        k = len(self.visit_labels)
        if self.n_source < 2:
            raise InvalidParams(f"n_source must be at least 2, got {self.n_source}")
        for name in ("change_means", "hba1c_slopes", "weight_slopes", "residual_sds"):
            values = getattr(self, name)
            if len(values) != k:
                raise InvalidParams(f"{name} needs {k} entries, one per visit")
            if not all(math.isfinite(v) for v in values):
                raise InvalidParams(f"{name} must be finite")
        for name in ("age_sd", "weight_sd", "hba1c_sd"):
            if getattr(self, name) <= 0:
                raise InvalidParams(f"{name} must be positive")
        if min(self.residual_sds) <= 0:
            raise InvalidParams("residual_sds must be positive")
        for name in ("age_bounds", "weight_bounds", "hba1c_bounds"):
            low, high = getattr(self, name)
            if not low < high:
                raise InvalidParams(f"{name} must be an increasing pair")
        if not 0.0 <= self.female_probability <= 1.0:
            raise InvalidParams("female_probability must lie in [0, 1]")
        if not -1.0 < self.residual_correlation < 1.0:
            raise InvalidParams("residual_correlation must lie in (-1, 1)")
        covariates = np.asarray(self.covariate_correlation, dtype=np.float64)
        if covariates.shape != (4, 4) or not np.allclose(covariates, covariates.T):
            raise InvalidParams("covariate_correlation must be a symmetric 4 x 4 matrix")
        if np.linalg.eigvalsh(covariates).min() <= 0:
            raise InvalidParams("covariate_correlation is not positive definite")

    def residual_covariance(self) -> np.ndarray:
        k = len(self.visit_labels)
        lags = np.abs(np.subtract.outer(np.arange(k), np.arange(k)))
        sds = np.asarray(self.residual_sds, dtype=np.float64)
        return np.outer(sds, sds) * self.residual_correlation ** lags

    def change_moments(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Per-visit mean and SD of the change implied by the covariate
        marginals. The HbA1c-weight covariance is taken at the copula
        correlation, which is exact when that correlation is zero.
        """
        hba1c = _truncated(self.hba1c_mean, self.hba1c_sd, self.hba1c_bounds)
        weight = _truncated(self.weight_mean, self.weight_sd, self.weight_bounds)
        b = np.asarray(self.hba1c_slopes)
        w = np.asarray(self.weight_slopes)
        means = (
            np.asarray(self.change_means)
            + b * (hba1c.mean() - self.hba1c_mean)
            + w * (weight.mean() - self.weight_mean)
        )
        covariance = self.covariate_correlation[2][3] * hba1c.std() * weight.std()
        variances = (
            b ** 2 * hba1c.var() + w ** 2 * weight.var() + 2.0 * b * w * covariance
            + np.asarray(self.residual_sds) ** 2
        )
        return means, np.sqrt(variances)


SOURCE_SCHEMA = (
    CovariateSpec("age", CovariateKind.CONTINUOUS),
    CovariateSpec("gender", CovariateKind.BINARY),
    CovariateSpec("weight", CovariateKind.CONTINUOUS),
    CovariateSpec("hba1c_baseline", CovariateKind.CONTINUOUS),
)


def _truncated(mean: float, sd: float, bounds: Tuple[float, float]) -> Any:
    a, b = (bounds[0] - mean) / sd, (bounds[1] - mean) / sd
    return stats.truncnorm(a, b, loc=mean, scale=sd)


def _truncated_normal(u: np.ndarray, mean: float, sd: float, bounds: Tuple[float, float]) -> np.ndarray:
    return _truncated(mean, sd, bounds).ppf(u)


@dataclass(frozen=True)
class SourcePopulation:
    """Completer pool that trials are resampled from."""

    dataset: TrialDataset
    provenance: Dict[str, Any] = field(default_factory=dict, compare=False)
    baseline_column: Optional[str] = "hba1c_baseline"
    threshold: float = 7.0

    def __post_init__(self) -> None:
        if not self.dataset.observed.all():
            raise InvalidParams("a source population must not contain missing outcomes")

    @property
    def outcome_kind(self) -> OutcomeKind:
        return self.dataset.outcome_kind

    @classmethod
    def from_dataset(
        cls,
        ds: TrialDataset,
        baseline_column: Optional[str] = None,
        threshold: float = 7.0,
        provenance: Optional[Dict[str, Any]] = None,
    ) -> "SourcePopulation":
        """Keep the subjects of both arms who completed every visit."""
        completers = np.flatnonzero(ds.observed.all(axis=1))
        if completers.size < 2:
            raise InvalidParams("the dataset has fewer than two completers")
        if baseline_column is not None and baseline_column not in ds.covariate_names:
            raise InvalidParams(f"unknown baseline column {baseline_column!r}")
        logger.info(f"Source population: {completers.size} of {ds.n_subjects} subjects completed")
        return cls(
            dataset=ds.take(completers),
            provenance=provenance or {"kind": "file"},
            baseline_column=baseline_column,
            threshold=threshold,
        )

    def to_binary(self, threshold: Optional[float] = None) -> "SourcePopulation":
        """
        Responder outcomes: achieved HbA1c (baseline plus change) below the
        threshold.
        """
        if self.outcome_kind is OutcomeKind.BINARY:
            return self
        if self.baseline_column is None:
            raise InvalidParams("deriving binary outcomes needs a baseline column")
        threshold = self.threshold if threshold is None else threshold
        baseline = self.dataset.baseline[:, self.dataset.covariate_names.index(self.baseline_column)]
        responders = (baseline[:, None] + self.dataset.outcomes < threshold).astype(np.float64)
        return SourcePopulation(
            dataset=self.dataset.with_outcomes(responders, OutcomeKind.BINARY),
            provenance={**self.provenance, "threshold": threshold},
            baseline_column=self.baseline_column,
            threshold=threshold,
        )


def synthesize_source(params: GeneratorParams = GeneratorParams(), seed: SeedLike = 0) -> SourcePopulation:
    """
    Draw a complete synthetic source population.

    Raises:
        InvalidParams: If the parameters are out of range or the covariate
            correlation is not positive definite
    """
    params.validate()
    rng = np.random.default_rng(seed)
    factor = np.linalg.cholesky(np.asarray(params.covariate_correlation, dtype=np.float64))
    uniforms = stats.norm.cdf(rng.standard_normal((params.n_source, 4)) @ factor.T)
    baseline = np.column_stack([
        _truncated_normal(uniforms[:, 0], params.age_mean, params.age_sd, params.age_bounds),
        (uniforms[:, 1] < params.female_probability).astype(np.float64),
        _truncated_normal(uniforms[:, 2], params.weight_mean, params.weight_sd, params.weight_bounds),
        _truncated_normal(uniforms[:, 3], params.hba1c_mean, params.hba1c_sd, params.hba1c_bounds),
    ])
    k = len(params.visit_labels)
    residuals = rng.standard_normal((params.n_source, k)) @ np.linalg.cholesky(params.residual_covariance()).T
    changes = (
        np.asarray(params.change_means)
        + (baseline[:, 3] - params.hba1c_mean)[:, None] * np.asarray(params.hba1c_slopes)
        + (baseline[:, 2] - params.weight_mean)[:, None] * np.asarray(params.weight_slopes)
        + residuals
    )
    width = max(4, len(str(params.n_source)))
    ds = TrialDataset(
        subject_ids=tuple(f"P{i + 1:0{width}d}" for i in range(params.n_source)),
        arms=np.zeros(params.n_source, dtype=np.int8),
        baseline=baseline,
        outcomes=changes,
        outcome_kind=OutcomeKind.CONTINUOUS,
        visit_labels=params.visit_labels,
        schema=SOURCE_SCHEMA,
        check_rank=False,
    )
    logger.debug(f"Synthesized source population {ds!r}")
    seed_record = seed if isinstance(seed, int) else repr(seed)
    return SourcePopulation(dataset=ds, provenance={"kind": "synthetic", "seed": seed_record})


# --- effect and dropout models ---------------------------------------------------


class EffectKind(str, Enum):
    ZERO = "zero"
    BENEFICIAL_CONTINUOUS = "beneficial_continuous"
    BENEFICIAL_BINARY = "beneficial_binary"


@dataclass(frozen=True)
class EffectProfile:
    """
    Treatment effect injected into treated subjects.

    Continuous: per-visit absolute decrements of the outcome.
    Binary: per-visit probabilities of flipping a treated 0 to 1.
    """

    kind: EffectKind = EffectKind.ZERO
    shifts: Tuple[float, ...] = ()
    flip_probs: Tuple[float, ...] = ()
    true_delta: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EffectKind(self.kind))
        object.__setattr__(self, "shifts", tuple(float(s) for s in self.shifts))
        object.__setattr__(self, "flip_probs", tuple(float(p) for p in self.flip_probs))
        if self.kind is EffectKind.BENEFICIAL_CONTINUOUS:
            if not self.shifts or not all(math.isfinite(s) for s in self.shifts):
                raise InvalidParams("a continuous effect needs finite per-visit shifts")
        if self.kind is EffectKind.BENEFICIAL_BINARY:
            if not self.flip_probs or not all(0.0 <= p <= 1.0 for p in self.flip_probs):
                raise InvalidParams("flip probabilities must lie in [0, 1]")

    @classmethod
    def zero(cls) -> "EffectProfile":
        return cls(EffectKind.ZERO)

    @classmethod
    def continuous(cls, shifts: Sequence[float] = (1.0, 1.5, 2.0)) -> "EffectProfile":
        return cls(EffectKind.BENEFICIAL_CONTINUOUS, shifts=tuple(shifts))

    @classmethod
    def binary(cls, flip_probs: Sequence[float] = (0.2, 0.25, 0.3)) -> "EffectProfile":
        return cls(EffectKind.BENEFICIAL_BINARY, flip_probs=tuple(flip_probs))

    def check(self, outcome_kind: OutcomeKind, k: int) -> None:
        if self.kind is EffectKind.BENEFICIAL_CONTINUOUS:
            if outcome_kind is not OutcomeKind.CONTINUOUS:
                raise InvalidParams("shift effects apply to continuous outcomes only")
            if len(self.shifts) != k:
                raise InvalidParams(f"effect needs {k} shifts, got {len(self.shifts)}")
        if self.kind is EffectKind.BENEFICIAL_BINARY:
            if outcome_kind is not OutcomeKind.BINARY:
                raise InvalidParams("flip effects apply to binary outcomes only")
            if len(self.flip_probs) != k:
                raise InvalidParams(f"effect needs {k} flip probabilities, got {len(self.flip_probs)}")


def apply_effect(
    outcomes: np.ndarray, treated: np.ndarray, effect: EffectProfile, flip_uniforms: np.ndarray
) -> np.ndarray:
    """Outcomes after injecting the effect into treated rows."""
    result = outcomes.copy()
    if effect.kind is EffectKind.BENEFICIAL_CONTINUOUS:
        result[treated] -= np.asarray(effect.shifts)
    elif effect.kind is EffectKind.BENEFICIAL_BINARY:
        flips = treated[:, None] & (result == 0.0) & (flip_uniforms < np.asarray(effect.flip_probs))
        result[flips] = 1.0
    return result


class DropoutKind(str, Enum):
    NONE = "none"
    MCAR = "mcar"
    MAR = "mar"


def _check_fractions(values: Sequence[float], what: str) -> None:
    if any(not 0.0 <= v < 1.0 for v in values):
        raise InvalidParams(f"{what} must lie in [0, 1)")
    if any(later < earlier for earlier, later in zip(values, values[1:])):
        raise InvalidParams(f"{what} must be nondecreasing across visits")


@dataclass(frozen=True)
class DropoutMechanism:
    """
    Monotone dropout model.

    The hazard of missing visit t given attendance so far is
    logit^-1(intercept[arm, t] + slope * latest observed outcome), with the
    outcome before the first visit taken as 0. MCAR targets are marginal
    cumulative missing fractions; MAR targets are per arm (control, treated).
    """

    kind: DropoutKind = DropoutKind.NONE
    targets: Tuple[float, ...] = ()
    arm_targets: Tuple[Tuple[float, ...], ...] = ()
    slope: float = 0.5
    intercepts: Optional[Tuple[Tuple[float, ...], ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DropoutKind(self.kind))
        object.__setattr__(self, "targets", tuple(float(v) for v in self.targets))
        object.__setattr__(self, "arm_targets", tuple(tuple(float(v) for v in arm) for arm in self.arm_targets))
        if self.intercepts is not None:
            object.__setattr__(self, "intercepts", tuple(tuple(float(v) for v in arm) for arm in self.intercepts))
        if self.kind is DropoutKind.MCAR:
            if not self.targets:
                raise InvalidParams("MCAR dropout needs per-visit targets")
            _check_fractions(self.targets, "MCAR targets")
        if self.kind is DropoutKind.MAR:
            if len(self.arm_targets) != 2 or len(self.arm_targets[0]) != len(self.arm_targets[1]):
                raise InvalidParams("MAR dropout needs control and treated targets of equal length")
            for arm, values in enumerate(self.arm_targets):
                _check_fractions(values, f"MAR targets of arm {arm}")
            if not math.isfinite(self.slope):
                raise InvalidParams("MAR slope must be finite")
            if self.intercepts is not None and (
                len(self.intercepts) != 2 or any(len(row) != len(self.arm_targets[0]) for row in self.intercepts)
            ):
                raise InvalidParams("MAR intercepts need one row per arm and one entry per visit")

    @classmethod
    def none(cls) -> "DropoutMechanism":
        return cls(DropoutKind.NONE)

    @classmethod
    def mcar(cls, targets: Sequence[float] = (0.05, 0.10, 0.15)) -> "DropoutMechanism":
        return cls(DropoutKind.MCAR, targets=tuple(targets))

    @classmethod
    def mar(
        cls,
        control: Sequence[float] = (0.10, 0.15, 0.20),
        treated: Sequence[float] = (0.05, 0.10, 0.15),
        slope: float = 0.5,
        intercepts: Optional[Sequence[Sequence[float]]] = None,
    ) -> "DropoutMechanism":
        rows = None if intercepts is None else tuple(tuple(row) for row in intercepts)
        return cls(DropoutKind.MAR, arm_targets=(tuple(control), tuple(treated)), slope=slope, intercepts=rows)

    @property
    def calibrated(self) -> bool:
        return self.kind is not DropoutKind.MAR or self.intercepts is not None

    def with_intercepts(self, intercepts: Sequence[Sequence[float]]) -> "DropoutMechanism":
        return DropoutMechanism(
            kind=self.kind, targets=self.targets, arm_targets=self.arm_targets,
            slope=self.slope, intercepts=tuple(tuple(row) for row in intercepts),
        )

    def hazard_parameters(self, k: int) -> Tuple[np.ndarray, float]:
        """
        (2, K) intercepts and slope of the censoring hazard.

        MCAR hazards are exact: h_t = 1 - (1 - m_t) / (1 - m_{t-1}).
        """
        if self.kind is DropoutKind.NONE:
            return np.full((2, k), -np.inf), 0.0
        if self.kind is DropoutKind.MCAR:
            if len(self.targets) != k:
                raise InvalidParams(f"MCAR dropout needs {k} targets, got {len(self.targets)}")
            cumulative = np.concatenate([[0.0], self.targets])
            hazards = 1.0 - (1.0 - cumulative[1:]) / (1.0 - cumulative[:-1])
            with np.errstate(divide="ignore"):
                intercepts = special.logit(hazards)
            return np.tile(intercepts, (2, 1)), 0.0
        if self.intercepts is None:
            raise InvalidParams("MAR dropout intercepts have not been calibrated")
        intercepts = np.asarray(self.intercepts, dtype=np.float64)
        if intercepts.shape != (2, k):
            raise InvalidParams(f"MAR intercepts must have shape (2, {k})")
        return intercepts, float(self.slope)


# --- censoring kernels -----------------------------------------------------------


@nb.jit(nopython=True)
def _censor_kernel_serial(
    driver: np.ndarray, arms: np.ndarray, intercepts: np.ndarray, slope: float, uniforms: np.ndarray
) -> np.ndarray:
    """Serial monotone censoring: observed flags per subject and visit."""
    n, k = driver.shape
    observed = np.zeros((n, k), dtype=np.bool_)
    for i in range(n):
        latest = 0.0
        for t in range(k):
            hazard = 1.0 / (1.0 + np.exp(-(intercepts[arms[i], t] + slope * latest)))
            if uniforms[i, t] < hazard:
                break
            observed[i, t] = True
            latest = driver[i, t]
    return observed


@nb.jit(nopython=True, parallel=True, nogil=True)
def _censor_kernel_parallel(
    driver: np.ndarray, arms: np.ndarray, intercepts: np.ndarray, slope: float, uniforms: np.ndarray
) -> np.ndarray:
    """Parallel monotone censoring over subjects with prange."""
    n, k = driver.shape
    observed = np.zeros((n, k), dtype=np.bool_)
    for i in nb.prange(n):
        latest = 0.0
        for t in range(k):
            hazard = 1.0 / (1.0 + np.exp(-(intercepts[arms[i], t] + slope * latest)))
            if uniforms[i, t] < hazard:
                break
            observed[i, t] = True
            latest = driver[i, t]
    return observed


def monotone_censoring(
    driver: np.ndarray,
    arms: np.ndarray,
    intercepts: np.ndarray,
    slope: float,
    uniforms: np.ndarray,
    use_parallel: bool = True,
) -> np.ndarray:
    """
    Draw monotone observation flags from the logistic censoring hazard.

    Args:
        driver: (N, K) outcomes driving the hazard once observed
        arms: (N,) arm indicators
        intercepts: (2, K) hazard intercepts per arm and visit
        slope: Coefficient on the latest observed outcome
        uniforms: (N, K) uniform draws; visit t is missed when u < hazard
        use_parallel: Use the prange kernel, falling back to serial on failure

    Returns:
        (N, K) boolean observed flags, monotone in t
    """
    args = (
        np.ascontiguousarray(driver, dtype=np.float64),
        np.ascontiguousarray(arms, dtype=np.int64),
        np.ascontiguousarray(intercepts, dtype=np.float64),
        float(slope),
        np.ascontiguousarray(uniforms, dtype=np.float64),
    )
    try:
        if use_parallel:
            return _censor_kernel_parallel(*args)
        return _censor_kernel_serial(*args)
    except Exception as e:
        if use_parallel:
            logger.warning(f"Parallel censoring failed: {e}, falling back to serial mode")
            return monotone_censoring(driver, arms, intercepts, slope, uniforms, use_parallel=False)
        logger.error(f"Serial censoring failed: {e}")
        raise


def _expected_missing(driver: np.ndarray, survival: np.ndarray, t: int, intercept: float, slope: float) -> float:
    latest = driver[:, t - 1] if t > 0 else 0.0
    hazard = special.expit(intercept + slope * latest)
    return float(1.0 - np.mean(survival * (1.0 - hazard)))


def calibrate_mar_intercepts(
    src: SourcePopulation,
    effect: EffectProfile,
    dropout: DropoutMechanism,
    n_calibration: int = CALIBRATION_SAMPLE,
    seed: SeedLike = 0,
    tolerance: float = 1e-10,
) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """
    Solve for per-arm, per-visit MAR intercepts that hit the marginal targets.

    A large resample of the source (with the effect applied for the treated
    arm) gives each subject's exact survival probability; the intercepts are
    found visit by visit by bisection on [-20, 20].

    Raises:
        CalibrationOutOfRange: If a target lies outside the reachable range
    """
    if dropout.kind is not DropoutKind.MAR:
        raise InvalidParams("only MAR dropout needs calibration")
    k = src.dataset.n_visits
    effect.check(src.outcome_kind, k)
    if len(dropout.arm_targets[0]) != k:
        raise InvalidParams(f"MAR dropout needs {k} targets per arm")
    rng = np.random.default_rng(seed)
    indices = rng.integers(0, src.dataset.n_subjects, size=n_calibration)
    flip_uniforms = rng.random((n_calibration, k))
    pooled = src.dataset.outcomes[indices]

    rows = []
    for arm in (0, 1):
        driver = apply_effect(pooled, np.full(n_calibration, arm == 1), effect, flip_uniforms)
        survival = np.ones(n_calibration)
        intercepts = []
        for t, target in enumerate(dropout.arm_targets[arm]):
            low, high = -INTERCEPT_BOUND, INTERCEPT_BOUND
            reachable = (
                _expected_missing(driver, survival, t, low, dropout.slope),
                _expected_missing(driver, survival, t, high, dropout.slope),
            )
            if not reachable[0] <= target <= reachable[1]:
                raise CalibrationOutOfRange(arm, t + 1, target, reachable)
            while high - low > tolerance:
                middle = 0.5 * (low + high)
                if _expected_missing(driver, survival, t, middle, dropout.slope) < target:
                    low = middle
                else:
                    high = middle
            intercept = 0.5 * (low + high)
            latest = driver[:, t - 1] if t > 0 else 0.0
            survival = survival * (1.0 - special.expit(intercept + dropout.slope * latest))
            intercepts.append(intercept)
        rows.append(tuple(intercepts))
    logger.info(f"Calibrated MAR intercepts: control={np.round(rows[0], 4)}, treated={np.round(rows[1], 4)}")
    return rows[0], rows[1]


# --- trial generation ------------------------------------------------------------


def generate_trial(
    src: SourcePopulation,
    n: int,
    effect: EffectProfile,
    dropout: DropoutMechanism,
    seed: SeedLike,
    use_parallel: bool = False,
) -> TrialDataset:
    """
    Simulate one trial from the source population.

    Random draws, in order: resampled subject indices, fair-coin arms,
    flip uniforms, censoring uniforms.

    Raises:
        InvalidParams: If the effect or dropout does not fit the source
    """
    if n < 1:
        raise InvalidParams(f"trial size must be positive, got {n}")
    source = src.dataset
    k = source.n_visits
    effect.check(source.outcome_kind, k)
    intercepts, slope = dropout.hazard_parameters(k)

    rng = np.random.default_rng(seed)
    indices = rng.integers(0, source.n_subjects, size=n)
    arms = rng.integers(0, 2, size=n)
    flip_uniforms = rng.random((n, k))
    censor_uniforms = rng.random((n, k))

    outcomes = apply_effect(source.outcomes[indices], arms == 1, effect, flip_uniforms)
    if dropout.kind is not DropoutKind.NONE:
        observed = monotone_censoring(outcomes, arms, intercepts, slope, censor_uniforms, use_parallel)
        outcomes = np.where(observed, outcomes, np.nan)

    width = max(4, len(str(n)))
    return TrialDataset(
        subject_ids=tuple(f"S{i + 1:0{width}d}" for i in range(n)),
        arms=arms,
        baseline=source.baseline[indices],
        outcomes=outcomes,
        outcome_kind=source.outcome_kind,
        visit_labels=source.visit_labels,
        schema=source.schema,
        check_rank=False,
    )


def analytic_true_delta(src: SourcePopulation, effect: EffectProfile) -> float:
    """
    Exact delta for resampling from a finite source: minus the final shift
    for continuous effects, flip_K times the source non-responder rate for
    binary effects.
    """
    if effect.true_delta is not None:
        return float(effect.true_delta)
    if effect.kind is EffectKind.BENEFICIAL_CONTINUOUS:
        return -effect.shifts[-1]
    if effect.kind is EffectKind.BENEFICIAL_BINARY:
        return effect.flip_probs[-1] * float(np.mean(src.dataset.outcomes[:, -1] == 0.0))
    return 0.0


@dataclass(frozen=True)
class OracleResult:
    delta: float
    mc_se: float


def true_delta_oracle(
    src: SourcePopulation, effect: EffectProfile, n_mc: int = ORACLE_MINIMUM, seed: SeedLike = 0
) -> OracleResult:
    """Monte Carlo delta of one large trial without dropout."""
    if n_mc < ORACLE_MINIMUM:
        raise InvalidParams(f"the oracle needs at least {ORACLE_MINIMUM} draws, got {n_mc}")
    trial = generate_trial(src, n_mc, effect, DropoutMechanism.none(), seed)
    final = trial.outcomes[:, -1]
    groups = [final[trial.arms == arm] for arm in (0, 1)]
    delta = float(groups[1].mean() - groups[0].mean())
    mc_se = math.sqrt(sum(float(np.var(g, ddof=1)) / g.size for g in groups))
    logger.debug(f"Oracle delta {delta:.6f} (MC SE {mc_se:.2e}) from {n_mc} draws")
    return OracleResult(delta, mc_se)


# --- metrics ---------------------------------------------------------------------


def relative_mse(mse_reference: float, mse_estimator: float) -> float:
    """MSE of the reference (unadjusted) estimator over that of another."""
    if mse_estimator < 0 or mse_reference < 0:
        raise InvalidParams("MSE values must be non-negative")
    if mse_estimator == 0.0:
        return math.inf if mse_reference > 0 else 1.0
    return mse_reference / mse_estimator


@dataclass(frozen=True)
class EstimatorMetrics:
    """Performance of one estimator over the retained replicates."""

    estimator: str
    replicates: int
    bias: float
    variance: float
    mse: float
    relative_mse: float
    coverage: Optional[float]
    bias_se: float
    variance_se: float
    mse_se: float
    relative_mse_se: float
    coverage_se: Optional[float]
    failures: Dict[str, int] = field(default_factory=dict)
    coverage_replicates: int = 0


def _mean_se(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else float("nan")


def summarize_replicates(
    label: str,
    estimates: np.ndarray,
    true_delta: float,
    covered: Optional[np.ndarray] = None,
    failures: Optional[Dict[str, int]] = None,
) -> EstimatorMetrics:
    """
    Bias, VAR (divisor R), MSE and coverage with Monte Carlo standard errors.

    relative_mse is filled in later against the reference estimator.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    estimates = estimates[np.isfinite(estimates)]
    if estimates.size == 0:
        nan = float("nan")
        return EstimatorMetrics(label, 0, nan, nan, nan, nan, None, nan, nan, nan, nan, None, dict(failures or {}))
    errors = estimates - true_delta
    centered = estimates - estimates.mean()
    coverage = coverage_se = None
    coverage_count = 0
    if covered is not None and np.asarray(covered).size:
        flags = np.asarray(covered, dtype=np.float64)
        coverage_count = int(flags.size)
        coverage = float(flags.mean())
        coverage_se = math.sqrt(coverage * (1.0 - coverage) / flags.size)
    return EstimatorMetrics(
        estimator=label,
        replicates=int(estimates.size),
        bias=float(errors.mean()),
        variance=float(np.mean(centered ** 2)),
        mse=float(np.mean(errors ** 2)),
        relative_mse=float("nan"),
        coverage=coverage,
        bias_se=_mean_se(errors),
        variance_se=_mean_se(centered ** 2),
        mse_se=_mean_se(errors ** 2),
        relative_mse_se=float("nan"),
        coverage_se=coverage_se,
        failures=dict(failures or {}),
        coverage_replicates=coverage_count,
    )


def _relative_mse_se(reference: np.ndarray, other: np.ndarray, truth: float) -> float:
    both = np.isfinite(reference) & np.isfinite(other)
    if both.sum() < 2:
        return float("nan")
    a = (reference[both] - truth) ** 2
    b = (other[both] - truth) ** 2
    ma, mb = a.mean(), b.mean()
    if ma == 0.0 or mb == 0.0:
        return float("nan")
    covariance = np.cov(a, b, ddof=1)
    ratio = ma / mb
    spread = covariance[0, 0] / ma ** 2 + covariance[1, 1] / mb ** 2 - 2.0 * covariance[0, 1] / (ma * mb)
    return float(ratio * math.sqrt(max(spread, 0.0) / both.sum()))


@dataclass(frozen=True)
class Scenario:
    """One (outcome, effect, dropout) combination of a simulation study."""

    name: str
    source: SourcePopulation
    n: int
    effect: EffectProfile
    dropout: DropoutMechanism

    @property
    def outcome_kind(self) -> OutcomeKind:
        return self.source.outcome_kind

    @property
    def true_delta(self) -> float:
        return analytic_true_delta(self.source, self.effect)


@dataclass(frozen=True)
class ScenarioMetrics:
    scenario: str
    outcome_kind: OutcomeKind
    true_delta: float
    replicates: int
    boot_B: int
    seed: int
    level: float
    rows: Tuple[EstimatorMetrics, ...]

    def row(self, estimator: str) -> EstimatorMetrics:
        for row in self.rows:
            if row.estimator == estimator:
                return row
        raise KeyError(estimator)


@dataclass(frozen=True)
class _ReplicateBatch:
    scenario: Scenario
    estimators: Tuple[EstimatorSpec, ...]
    seed: int
    boot_B: int
    level: float
    start: int
    stop: int


@dataclass(frozen=True)
class _EstimatorOutcome:
    delta: float
    covered: Optional[bool]
    error: Optional[str]


def replicate_seeds(seed: int, replicate: int) -> Tuple[np.random.SeedSequence, int]:
    """Trial seed sequence and integer bootstrap seed of one replicate."""
    trial_seed = np.random.SeedSequence(seed, spawn_key=(replicate, 0))
    boot_seed = int(np.random.SeedSequence(seed, spawn_key=(replicate, 1)).generate_state(1, dtype=np.uint64)[0])
    return trial_seed, boot_seed


def _run_one(spec: EstimatorSpec, ds: TrialDataset, truth: float, boot_B: int, boot_seed: int,
             level: float) -> _EstimatorOutcome:
    try:
        estimate = spec(ds)
    except (TrialAnalysisError, np.linalg.LinAlgError) as exc:
        return _EstimatorOutcome(float("nan"), None, type(exc).__name__)
    if not estimate.converged:
        return _EstimatorOutcome(float("nan"), None, "NotConverged")
    if boot_B <= 0:
        return _EstimatorOutcome(estimate.delta, None, None)
    try:
        result = bootstrap(ds, spec, boot_B, boot_seed, level)
    except (TrialAnalysisError, np.linalg.LinAlgError) as exc:
        logger.debug(f"{spec.name}: bootstrap failed ({type(exc).__name__}); coverage not recorded")
        return _EstimatorOutcome(estimate.delta, None, None)
    return _EstimatorOutcome(estimate.delta, result.interval.covers(truth), None)


def _run_batch(batch: _ReplicateBatch) -> List[List[_EstimatorOutcome]]:
    results = []
    truth = batch.scenario.true_delta
    for replicate in range(batch.start, batch.stop):
        trial_seed, boot_seed = replicate_seeds(batch.seed, replicate)
        scenario = batch.scenario
        ds = generate_trial(scenario.source, scenario.n, scenario.effect, scenario.dropout, trial_seed)
        results.append([_run_one(spec, ds, truth, batch.boot_B, boot_seed, batch.level) for spec in batch.estimators])
    return results


def run_scenario(
    scenario: Scenario,
    estimators: Sequence[EstimatorSpec],
    replicates: int,
    boot_B: int = 0,
    seed: int = 0,
    level: float = 0.95,
    workers: int = 1,
    progress: bool = False,
    reference: str = "unadjusted",
) -> ScenarioMetrics:
    """
    Run a Monte Carlo study of one scenario.

    Each replicate generates a trial, runs every estimator and, when boot_B
    is positive, records whether the BCa interval covers the true delta.
    Aggregation follows replicate order, so results do not depend on the
    worker count.

    Raises:
        InvalidParams: If replicates < 2 or the MAR dropout is uncalibrated
    """
    if replicates < 2:
        raise InvalidParams(f"a simulation needs at least 2 replicates, got {replicates}")
    if not scenario.dropout.calibrated:
        raise InvalidParams(f"scenario {scenario.name!r} has uncalibrated MAR dropout")
    estimators = tuple(estimators)
    truth = scenario.true_delta
    logger.info(f"Scenario {scenario.name}: {replicates} replicates, boot B={boot_B}, true delta={truth:.6f}")
    start_time = time.time()

    size = max(1, math.ceil(replicates / max(1, workers * 4)))
    batches = [
        _ReplicateBatch(scenario, estimators, seed, boot_B, level, start, min(start + size, replicates))
        for start in range(0, replicates, size)
    ]
    outcomes = [
        row
        for chunk in map_ordered(_run_batch, batches, workers, progress=progress, description=scenario.name)
        for row in chunk
    ]

    deltas = {spec.name: np.array([row[j].delta for row in outcomes]) for j, spec in enumerate(estimators)}
    rows = []
    for j, spec in enumerate(estimators):
        failures = dict(sorted(Counter(row[j].error for row in outcomes if row[j].error).items()))
        covered = [row[j].covered for row in outcomes if row[j].covered is not None] if boot_B > 0 else None
        rows.append(summarize_replicates(
            spec.name, deltas[spec.name], truth,
            None if covered is None else np.array(covered, dtype=bool), failures,
        ))
        failed = sum(failures.values())
        if failed:
            logger.warning(f"{scenario.name}/{spec.name}: {failed} of {replicates} replicates failed {failures}")

    if reference in deltas:
        base = next(row for row in rows if row.estimator == reference)
        completed = []
        for row in rows:
            ratio = relative_mse(base.mse, row.mse)
            se = 0.0 if row.estimator == reference else _relative_mse_se(deltas[reference], deltas[row.estimator], truth)
            completed.append(replace(row, relative_mse=ratio, relative_mse_se=se))
        rows = completed

    logger.info(f"Scenario {scenario.name} finished in {time.time() - start_time:.1f}s")
    return ScenarioMetrics(
        scenario=scenario.name,
        outcome_kind=scenario.outcome_kind,
        true_delta=truth,
        replicates=replicates,
        boot_B=boot_B,
        seed=seed,
        level=level,
        rows=tuple(rows),
    )
