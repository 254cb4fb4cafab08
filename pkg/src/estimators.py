"""
Average treatment effect estimators for a longitudinal trial.

Every estimator maps a TrialDataset to an EffectEstimate of
delta = E[Y_K | A=1] - E[Y_K | A=0] (treatment minus control) and is a
pure, deterministic function of its inputs.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy import special

from .data_model import OutcomeKind, TrialDataset, encode_design
from .errors import (
    AllStructuresFailed,
    EmptyArm,
    IncompatibleOutcome,
    InsufficientRiskSet,
    InvalidParams,
    NumericalError,
    SeparationDetected,
    SingularSystem,
)
from .numerics import (
    COEFFICIENT_CAP,
    DEFAULT_LADDER,
    IRLS_SCORE_TOLERANCE,
    CovarianceParams,
    CovarianceStructure,
    FitDiagnostics,
    LongitudinalDesign,
    fit_reml,
    irls_logistic,
    wls,
)

GEE_TOLERANCE = 1e-6
GEE_MAX_ITER = 50
GEE_DAMPING = 0.95
DEFAULT_TRUNCATION = 0.025
MIN_RISK_SET = 10


class EstimatorKind(str, Enum):
    UNADJUSTED = "unadjusted"
    MMRM = "mmrm"
    MMRM_STAR = "mmrm_star"
    GLMM = "glmm"
    TMLE = "tmle"


@dataclass(frozen=True)
class MmrmFit:
    coefficients: np.ndarray
    columns: Tuple[str, ...]
    params: CovarianceParams
    diagnostics: FitDiagnostics
    method: str = "reml"

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.columns.index(name)])


@dataclass(frozen=True)
class GeeFit:
    coefficients: np.ndarray
    columns: Tuple[str, ...]
    structure: CovarianceStructure
    working_correlation: np.ndarray
    predictions_control: np.ndarray
    predictions_treated: np.ndarray
    diagnostics: FitDiagnostics
    attempts: Tuple[str, ...] = ()


@dataclass(frozen=True)
class TmleFit:
    """
    Working-model fits of the sequential regression estimator.

    retention holds the floored probabilities of remaining observed per
    visit (NaN outside each risk set); weights[a] holds the cumulative
    inverse-probability weights of arm a per regression step (NaN for
    subjects outside the step's fit).
    """

    propensity_coefficients: Optional[np.ndarray]
    propensity: np.ndarray
    retention_coefficients: Tuple[Optional[np.ndarray], ...]
    retention: np.ndarray
    outcome_coefficients: Dict[int, Tuple[np.ndarray, ...]]
    weights: Dict[int, np.ndarray]
    predictions: Dict[int, np.ndarray]
    truncation: float


@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate of delta with per-arm means and fit provenance."""

    delta: float
    arm_means: Tuple[float, float]
    estimator_kind: EstimatorKind
    covariance_structure_used: Optional[str]
    diagnostics: Optional[FitDiagnostics]
    n_used: int
    label: str = ""
    fit: Any = field(default=None, compare=False, repr=False)

    @property
    def converged(self) -> bool:
        return self.diagnostics is None or self.diagnostics.converged

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimator": self.label or self.estimator_kind.value,
            "kind": self.estimator_kind.value,
            "delta": self.delta,
            "arm_means": {"control": self.arm_means[0], "treated": self.arm_means[1]},
            "covariance_structure": self.covariance_structure_used,
            "n_used": self.n_used,
            "diagnostics": None if self.diagnostics is None else self.diagnostics.to_dict(),
        }


def _estimate(kind: EstimatorKind, mu0: float, mu1: float, **kwargs: Any) -> EffectEstimate:
    return EffectEstimate(delta=float(mu1 - mu0), arm_means=(float(mu0), float(mu1)), estimator_kind=kind, **kwargs)


def _require_completers(ds: TrialDataset) -> None:
    completed = ds.observed[:, -1]
    for arm in (0, 1):
        if not (completed & (ds.arms == arm)).any():
            raise EmptyArm(arm)


def _require_kind(ds: TrialDataset, kind: OutcomeKind, estimator: str) -> None:
    if ds.outcome_kind is not kind:
        raise IncompatibleOutcome(f"{estimator} requires a {kind.value} outcome, got {ds.outcome_kind.value}")


# --- unadjusted ---------------------------------------------------------------


def unadjusted(ds: TrialDataset) -> EffectEstimate:
    """Difference of completer means at the final visit."""
    _require_completers(ds)
    completed = ds.observed[:, -1]
    final = ds.outcomes[:, -1]
    means = [float(np.mean(final[completed & (ds.arms == arm)])) for arm in (0, 1)]
    return _estimate(
        EstimatorKind.UNADJUSTED, means[0], means[1],
        covariance_structure_used=None, diagnostics=None,
        n_used=int(completed.sum()), label="unadjusted",
    )


# --- MMRM / MMRM* -------------------------------------------------------------


def longitudinal_rows(
    covariates: np.ndarray,
    arms: np.ndarray,
    visit_labels: Sequence[str],
    covariate_names: Sequence[str],
    baseline_main: bool = True,
    interactions: bool = False,
) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """
    Saturated visit-by-arm mean design, one row per subject and visit.

    Columns: intercept, visit indicators for visits 2..K, arm, arm-by-visit
    indicators for visits 2..K, then optionally baseline main effects and
    visit-by-baseline interactions for visits 2..K.

    Returns:
        (N, K, p) design array and column names
    """
    n, m = covariates.shape
    k = len(visit_labels)
    visit = np.broadcast_to(np.eye(k)[None, :, 1:], (n, k, k - 1))
    arm = np.broadcast_to(np.asarray(arms, dtype=np.float64)[:, None, None], (n, k, 1))
    blocks = [np.ones((n, k, 1)), visit, arm, arm * visit]
    later = visit_labels[1:]
    columns = ["intercept"] + [f"visit[{v}]" for v in later] + ["arm"] + [f"arm:visit[{v}]" for v in later]
    if baseline_main:
        blocks.append(np.broadcast_to(covariates[:, None, :], (n, k, m)))
        columns.extend(covariate_names)
    if interactions:
        blocks.append((visit[:, :, :, None] * covariates[:, None, None, :]).reshape(n, k, (k - 1) * m))
        columns.extend(f"{c}:visit[{v}]" for v in later for c in covariate_names)
    return np.concatenate(blocks, axis=2), tuple(columns)


def _fit_mmrm(
    ds: TrialDataset,
    kind: EstimatorKind,
    structure: Union[CovarianceStructure, str],
    method: str,
    interactions: bool,
    baseline_main: bool,
    gradient: str,
) -> EffectEstimate:
    _require_kind(ds, OutcomeKind.CONTINUOUS, kind.value)
    _require_completers(ds)
    structure = CovarianceStructure(structure)
    encoded = encode_design(ds)
    covariates = encoded.matrix[:, 1:]
    names = encoded.columns[1:]
    x, columns = longitudinal_rows(covariates, ds.arms, ds.visit_labels, names, baseline_main, interactions)
    design = LongitudinalDesign(x=x, y=ds.outcomes, observed=ds.observed)
    params, beta, diagnostics = fit_reml(design, structure, method=method, gradient=gradient)

    k = ds.n_visits
    contrast = np.zeros(len(columns))
    contrast[columns.index("arm")] = 1.0
    if k > 1:
        contrast[columns.index(f"arm:visit[{ds.visit_labels[-1]}]")] = 1.0
    control_rows, _ = longitudinal_rows(
        covariates, np.zeros(ds.n_subjects), ds.visit_labels, names, baseline_main, interactions
    )
    mu0 = float(np.mean(control_rows[:, -1, :] @ beta))
    mu1 = mu0 + float(contrast @ beta)
    fit = MmrmFit(coefficients=beta, columns=columns, params=params, diagnostics=diagnostics, method=method)
    logger.debug(f"{kind.value} ({structure.value}, {method}): delta={mu1 - mu0:.6f}")
    return _estimate(
        kind, mu0, mu1,
        covariance_structure_used=structure.value, diagnostics=diagnostics,
        n_used=design.n_subjects, label=kind.value, fit=fit,
    )


def mmrm(
    ds: TrialDataset,
    structure: Union[CovarianceStructure, str] = CovarianceStructure.UNSTRUCTURED,
    method: str = "reml",
    gradient: str = "numeric",
) -> EffectEstimate:
    """
    Mixed model for repeated measures with baseline main effects.

    delta is the arm coefficient plus the arm-by-final-visit coefficient.
    Non-convergence is flagged in the diagnostics; the estimate is still
    returned.

    Raises:
        IncompatibleOutcome, EmptyArm, RankDeficientDesign, SingularSystem
    """
    return _fit_mmrm(ds, EstimatorKind.MMRM, structure, method, False, True, gradient)


def mmrm_star(
    ds: TrialDataset,
    structure: Union[CovarianceStructure, str] = CovarianceStructure.UNSTRUCTURED,
    method: str = "reml",
    printed_form: bool = False,
    gradient: str = "numeric",
) -> EffectEstimate:
    """
    MMRM with visit-by-baseline interactions (one baseline coefficient
    vector per visit).

    Args:
        printed_form: Drop the baseline main effects, so baseline covariates
            enter only through visits 2..K
    """
    return _fit_mmrm(ds, EstimatorKind.MMRM_STAR, structure, method, True, not printed_form, gradient)


# --- standardized marginal logistic model (GEE) ----------------------------------


def _moment_correlation(
    structure: CovarianceStructure, residuals: np.ndarray, observed: np.ndarray, phi: float
) -> np.ndarray:
    k = observed.shape[1]
    correlation = np.eye(k)
    if k == 1 or structure is CovarianceStructure.INDEPENDENCE:
        return correlation
    products = residuals[:, :, None] * residuals[:, None, :]
    pairs = observed[:, :, None] & observed[:, None, :]
    counts = pairs.sum(axis=0)
    sums = np.where(pairs, products, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        moments = np.where(counts > 0, sums / (np.maximum(counts, 1) * phi), 0.0)
    if structure is CovarianceStructure.UNSTRUCTURED:
        correlation = moments.copy()
        correlation[np.diag_indices(k)] = 1.0
        return correlation
    lags = np.abs(np.subtract.outer(np.arange(k), np.arange(k)))
    if structure is CovarianceStructure.AR1:
        mask = lags == 1
        alpha = float(sums[mask].sum() / (max(counts[mask].sum(), 1) * phi))
        alpha = float(np.clip(alpha, -0.99, 0.99))
        return alpha ** lags
    mask = lags > 0
    alpha = float(sums[mask].sum() / (max(counts[mask].sum(), 1) * phi))
    return (1.0 - alpha) * np.eye(k) + alpha * np.ones((k, k))


def _make_positive_definite(correlation: np.ndarray) -> np.ndarray:
    damped = correlation.copy()
    off_diagonal = ~np.eye(correlation.shape[0], dtype=bool)
    for _ in range(500):
        if np.linalg.eigvalsh(damped).min() > 1e-8:
            return damped
        damped[off_diagonal] *= GEE_DAMPING
    return np.eye(correlation.shape[0])


def _gee_step(
    x: np.ndarray, y: np.ndarray, observed: np.ndarray, beta: np.ndarray, correlation: np.ndarray,
    groups: Sequence[Tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    eta = np.einsum("nkp,p->nk", x, beta)
    mu = special.expit(eta)
    root_variance = np.sqrt(mu * (1.0 - mu))
    p = x.shape[2]
    information = np.zeros((p, p))
    score = np.zeros(p)
    for visits, members in groups:
        factor = np.linalg.cholesky(correlation[np.ix_(visits, visits)])
        inverse_factor = np.linalg.solve(factor, np.eye(len(visits)))
        scaled_x = x[members][:, visits, :] * root_variance[members][:, visits, None]
        residual = (y[members][:, visits] - mu[members][:, visits]) / root_variance[members][:, visits]
        xw = np.einsum("ab,nbp->nap", inverse_factor, scaled_x)
        rw = residual @ inverse_factor.T
        information += np.einsum("nap,naq->pq", xw, xw)
        score += np.einsum("nap,na->p", xw, rw)
    try:
        return np.linalg.solve(information, score)
    except np.linalg.LinAlgError:
        raise SingularSystem("GEE information matrix is singular") from None


def _fit_gee_structure(
    design: LongitudinalDesign, structure: CovarianceStructure, start: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, FitDiagnostics]:
    x, y, observed = design.x, design.y, design.observed
    beta = start.copy()
    n_obs = design.n_observations
    p = design.n_coefficients
    correlation = np.eye(design.n_visits)
    change = np.inf
    for iteration in range(1, GEE_MAX_ITER + 1):
        mu = special.expit(np.einsum("nkp,p->nk", x, beta))
        residuals = np.where(observed, (y - mu) / np.sqrt(mu * (1.0 - mu)), 0.0)
        phi = float(np.sum(residuals ** 2) / max(n_obs - p, 1))
        correlation = _make_positive_definite(_moment_correlation(structure, residuals, observed, phi))
        step = _gee_step(x, y, observed, beta, correlation, design.groups)
        beta = beta + step
        change = float(np.abs(step).max(initial=0.0))
        if not np.isfinite(beta).all() or np.abs(beta).max(initial=0.0) >= COEFFICIENT_CAP:
            break
        if change < GEE_TOLERANCE:
            return beta, correlation, FitDiagnostics(
                converged=True, iterations=iteration, objective=phi, gradient_norm=change,
                condition=float(np.linalg.cond(correlation)), tolerance=GEE_TOLERANCE,
                message="gradient_norm holds the final coefficient step",
            )
    return beta, correlation, FitDiagnostics(
        converged=False, iterations=GEE_MAX_ITER, objective=float("nan"), gradient_norm=change,
        condition=float(np.linalg.cond(correlation)), tolerance=GEE_TOLERANCE,
        message="coefficient change did not fall below tolerance",
    )


def glmm_standardized(
    ds: TrialDataset,
    ladder: Sequence[Union[CovarianceStructure, str]] = DEFAULT_LADDER,
) -> EffectEstimate:
    """
    Marginal logistic model fitted GEE-style, standardized over all subjects.

    Each working correlation in the ladder is tried in order until one
    converges; delta averages every subject's predicted final-visit risk
    under treatment minus under control.

    Raises:
        IncompatibleOutcome, EmptyArm, SeparationDetected, AllStructuresFailed
    """
    _require_kind(ds, OutcomeKind.BINARY, "glmm")
    _require_completers(ds)
    ladder = tuple(CovarianceStructure(s) for s in ladder)
    if not ladder:
        raise InvalidParams("the working-structure ladder is empty")
    encoded = encode_design(ds)
    covariates = encoded.matrix[:, 1:]
    x, columns = longitudinal_rows(covariates, ds.arms, ds.visit_labels, encoded.columns[1:])
    design = LongitudinalDesign(x=x, y=ds.outcomes, observed=ds.observed)

    rows = design.observed
    start = irls_logistic(design.x[rows], design.y[rows])
    if start.diagnostics.separated:
        raise SeparationDetected("marginal logistic model separates under working independence")

    attempts: List[str] = []
    for structure in ladder:
        attempts.append(structure.value)
        if structure is CovarianceStructure.INDEPENDENCE:
            beta, correlation, diagnostics = start.coefficients, np.eye(ds.n_visits), start.diagnostics
        else:
            try:
                beta, correlation, diagnostics = _fit_gee_structure(design, structure, start.coefficients)
            except (NumericalError, np.linalg.LinAlgError) as exc:
                logger.warning(f"GEE with {structure.value} working correlation failed: {exc}")
                continue
        if diagnostics.converged:
            break
        logger.warning(f"GEE with {structure.value} working correlation did not converge; trying next structure")
    else:
        raise AllStructuresFailed(attempts)

    control_rows, _ = longitudinal_rows(covariates, np.zeros(ds.n_subjects), ds.visit_labels, encoded.columns[1:])
    treated_rows, _ = longitudinal_rows(covariates, np.ones(ds.n_subjects), ds.visit_labels, encoded.columns[1:])
    p0 = special.expit(control_rows[:, -1, :] @ beta)
    p1 = special.expit(treated_rows[:, -1, :] @ beta)
    fit = GeeFit(
        coefficients=beta, columns=columns, structure=structure, working_correlation=correlation,
        predictions_control=p0, predictions_treated=p1, diagnostics=diagnostics, attempts=tuple(attempts),
    )
    logger.debug(f"glmm ({structure.value}): delta={np.mean(p1) - np.mean(p0):.6f}")
    return _estimate(
        EstimatorKind.GLMM, float(np.mean(p0)), float(np.mean(p1)),
        covariance_structure_used=structure.value, diagnostics=diagnostics,
        n_used=design.n_subjects,
        label="glmm" if len(ladder) > 1 else f"glmm:{structure.value}", fit=fit,
    )


# --- sequential regression TMLE -------------------------------------------------


def _require_risk_set(count: int, columns: int, arm: Optional[int], step: str) -> None:
    required = max(MIN_RISK_SET, columns + 2)
    if count < required:
        raise InsufficientRiskSet(arm, step, count, required)


class _FitLog:
    """Collects logistic diagnostics across the working models."""

    def __init__(self) -> None:
        self.iterations = 0
        self.converged = True
        self.separated = False
        self.gradient_norm = 0.0
        self.condition = 0.0

    def add(self, diagnostics: FitDiagnostics, step: str) -> None:
        self.iterations += diagnostics.iterations
        self.condition = max(self.condition, diagnostics.condition)
        if diagnostics.separated:
            self.separated = True
            logger.warning(f"TMLE {step}: separation, continuing with capped coefficients")
            return
        self.converged = self.converged and diagnostics.converged
        self.gradient_norm = max(self.gradient_norm, diagnostics.gradient_norm)

    def diagnostics(self) -> FitDiagnostics:
        return FitDiagnostics(
            converged=self.converged, iterations=self.iterations, objective=float("nan"),
            gradient_norm=self.gradient_norm, condition=self.condition,
            tolerance=IRLS_SCORE_TOLERANCE, separated=self.separated,
        )


def tmle(
    ds: TrialDataset,
    trunc: float = DEFAULT_TRUNCATION,
    propensity: str = "estimated",
    outcome_link: str = "identity",
) -> EffectEstimate:
    """
    Longitudinal TMLE by inverse-probability-weighted sequential regression.

    Args:
        ds: Trial dataset (continuous or binary outcome)
        trunc: Truncation level; arm propensities are clipped to
            [trunc, 1 - trunc] and retention probabilities floored at trunc
        propensity: 'estimated' (logistic A ~ X) or 'fixed' (0.5)
        outcome_link: Continuous outcomes only: 'identity' or
            'logit_scaled' (min-max rescaled outcome with a logit link)

    Returns:
        EffectEstimate whose fit is a TmleFit

    Raises:
        InsufficientRiskSet: If a working-model fit has too few subjects
    """
    if not 0.0 < trunc <= 1.0:
        raise InvalidParams(f"truncation level must lie in (0, 1], got {trunc}")
    if propensity not in ("estimated", "fixed"):
        raise InvalidParams(f"unknown propensity option {propensity!r}")
    if outcome_link not in ("identity", "logit_scaled"):
        raise InvalidParams(f"unknown outcome link {outcome_link!r}")
    _require_completers(ds)

    encoded = encode_design(ds).matrix
    n, k = ds.n_subjects, ds.n_visits
    arms = ds.arms.astype(np.float64)
    observed = ds.observed
    outcomes = np.nan_to_num(ds.outcomes)
    log = _FitLog()

    propensity_coefficients = None
    if propensity == "fixed":
        treated_probability = np.full(n, 0.5)
    else:
        _require_risk_set(n, encoded.shape[1], None, "propensity")
        fit = irls_logistic(encoded, arms)
        log.add(fit.diagnostics, "propensity")
        propensity_coefficients = fit.coefficients
        treated_probability = special.expit(encoded @ fit.coefficients)
    # both arm probabilities share the band [trunc, 1 - trunc]
    ceiling = max(1.0 - trunc, trunc)
    arm_probability = {
        1: np.clip(treated_probability, trunc, ceiling),
        0: np.clip(1.0 - treated_probability, trunc, ceiling),
    }

    retention = np.full((n, k), np.nan)
    retention_coefficients: List[Optional[np.ndarray]] = []
    for t in range(k):
        at_risk = np.ones(n, dtype=bool) if t == 0 else observed[:, t - 1]
        design = np.column_stack([encoded, arms, outcomes[:, :t]])
        stays = observed[at_risk, t].astype(np.float64)
        _require_risk_set(stays.size, design.shape[1], None, f"retention t={t}")
        if stays.all() or not stays.any():
            probability = np.full(stays.size, float(stays[0]))
            retention_coefficients.append(None)
        else:
            fit = irls_logistic(design[at_risk], stays)
            log.add(fit.diagnostics, f"retention t={t}")
            retention_coefficients.append(fit.coefficients)
            probability = special.expit(design[at_risk] @ fit.coefficients)
        retention[at_risk, t] = np.clip(probability, trunc, 1.0)

    scaled = ds.outcome_kind is OutcomeKind.CONTINUOUS and outcome_link == "logit_scaled"
    logistic = ds.outcome_kind is OutcomeKind.BINARY or scaled
    final = ds.outcomes[:, -1]
    low, high = 0.0, 1.0
    if scaled:
        completed = final[observed[:, -1]]
        low, high = float(completed.min()), float(completed.max())
        if high <= low:
            raise IncompatibleOutcome("logit-scaled TMLE needs a non-constant final outcome")

    means: Dict[int, float] = {}
    predictions: Dict[int, np.ndarray] = {}
    weights: Dict[int, np.ndarray] = {}
    outcome_coefficients: Dict[int, Tuple[np.ndarray, ...]] = {}
    for a in (0, 1):
        pseudo = (final - low) / (high - low) if scaled else final.copy()
        arm_weights = np.full((n, k), np.nan)
        coefficients: List[np.ndarray] = []
        for t in range(k, 0, -1):
            fit_rows = (ds.arms == a) & observed[:, t - 1]
            history = np.ones(n, dtype=bool) if t == 1 else observed[:, t - 2]
            design = np.column_stack([encoded, outcomes[:, : t - 1]])
            step = f"outcome regression t={t}"
            _require_risk_set(int(fit_rows.sum()), design.shape[1], a, step)
            w = 1.0 / (arm_probability[a][fit_rows] * np.prod(retention[fit_rows, :t], axis=1))
            arm_weights[fit_rows, t - 1] = w
            if logistic:
                fit = irls_logistic(design[fit_rows], pseudo[fit_rows], w)
                log.add(fit.diagnostics, f"arm {a} {step}")
                beta = fit.coefficients
                fitted = special.expit(design[history] @ beta)
            else:
                beta = wls(design[fit_rows], pseudo[fit_rows], w).coefficients
                fitted = design[history] @ beta
            coefficients.append(beta)
            pseudo = np.full(n, np.nan)
            pseudo[history] = fitted
        mean = float(np.mean(pseudo))
        means[a] = low + (high - low) * mean if scaled else mean
        predictions[a] = pseudo
        weights[a] = arm_weights
        outcome_coefficients[a] = tuple(coefficients)

    fit_record = TmleFit(
        propensity_coefficients=propensity_coefficients,
        propensity=treated_probability,
        retention_coefficients=tuple(retention_coefficients),
        retention=retention,
        outcome_coefficients=outcome_coefficients,
        weights=weights,
        predictions=predictions,
        truncation=trunc,
    )
    logger.debug(f"tmle: mu0={means[0]:.6f} mu1={means[1]:.6f}")
    return _estimate(
        EstimatorKind.TMLE, means[0], means[1],
        covariance_structure_used=None, diagnostics=log.diagnostics(),
        n_used=n, label="tmle", fit=fit_record,
    )


# --- estimator registry ---------------------------------------------------------


_OUTCOME_SUPPORT = {
    "unadjusted": (OutcomeKind.CONTINUOUS, OutcomeKind.BINARY),
    "mmrm": (OutcomeKind.CONTINUOUS,),
    "mmrm_star": (OutcomeKind.CONTINUOUS,),
    "glmm": (OutcomeKind.BINARY,),
    "tmle": (OutcomeKind.CONTINUOUS, OutcomeKind.BINARY),
}

_FUNCTIONS: Dict[str, Callable[..., EffectEstimate]] = {
    "unadjusted": unadjusted,
    "mmrm": mmrm,
    "mmrm_star": mmrm_star,
    "glmm": glmm_standardized,
    "tmle": tmle,
}


@dataclass(frozen=True)
class EstimatorSpec:
    """
    Picklable estimator reference: a registry name plus keyword options.

    Names are 'unadjusted', 'mmrm', 'mmrm_star', 'glmm', 'tmle' and
    'glmm:<structure>' for a single-structure GEE fit.
    """

    name: str
    options: Tuple[Tuple[str, Any], ...] = ()

    def __post_init__(self) -> None:
        base, _, structure = self.name.partition(":")
        if base not in _FUNCTIONS:
            raise InvalidParams(f"unknown estimator {self.name!r} (known: {', '.join(sorted(_FUNCTIONS))})")
        if structure:
            if base != "glmm":
                raise InvalidParams(f"only glmm accepts a structure suffix, got {self.name!r}")
            if structure not in {s.value for s in CovarianceStructure}:
                raise InvalidParams(f"unknown working structure {structure!r} in {self.name!r}")

    @classmethod
    def create(cls, name: str, **options: Any) -> "EstimatorSpec":
        return cls(name=name, options=tuple(sorted(options.items())))

    @property
    def base_name(self) -> str:
        return self.name.partition(":")[0]

    def supports(self, outcome_kind: Union[OutcomeKind, str]) -> bool:
        return OutcomeKind(outcome_kind) in _OUTCOME_SUPPORT[self.base_name]

    def __call__(self, ds: TrialDataset) -> EffectEstimate:
        options = dict(self.options)
        structure = self.name.partition(":")[2]
        if structure:
            options["ladder"] = (CovarianceStructure(structure),)
        estimate = _FUNCTIONS[self.base_name](ds, **options)
        if estimate.label != self.name:
            estimate = EffectEstimate(
                delta=estimate.delta, arm_means=estimate.arm_means, estimator_kind=estimate.estimator_kind,
                covariance_structure_used=estimate.covariance_structure_used,
                diagnostics=estimate.diagnostics, n_used=estimate.n_used, label=self.name, fit=estimate.fit,
            )
        return estimate

    def __str__(self) -> str:
        return self.name


def estimator_names() -> Tuple[str, ...]:
    return tuple(_FUNCTIONS)


def default_estimators(outcome_kind: Union[OutcomeKind, str]) -> Tuple[EstimatorSpec, ...]:
    """All registered estimators supporting the outcome kind, in registry order."""
    specs = (EstimatorSpec(name) for name in _FUNCTIONS)
    return tuple(spec for spec in specs if spec.supports(outcome_kind))


def parse_estimators(text: str, outcome_kind: Union[OutcomeKind, str]) -> Tuple[List[EstimatorSpec], List[str]]:
    """
    Parse a comma-separated estimator list ('all' selects every compatible one).

    Returns:
        (compatible specs, notes on skipped incompatible estimators)
    """
    outcome_kind = OutcomeKind(outcome_kind)
    notes: List[str] = []
    if text.strip() == "all":
        for name, kinds in _OUTCOME_SUPPORT.items():
            if outcome_kind not in kinds:
                notes.append(f"{name} skipped: not applicable to {outcome_kind.value} outcomes")
        return list(default_estimators(outcome_kind)), notes
    specs = []
    for name in filter(None, (part.strip() for part in text.split(","))):
        spec = EstimatorSpec(name)
        if spec.supports(outcome_kind):
            specs.append(spec)
        else:
            notes.append(f"{name} skipped: not applicable to {outcome_kind.value} outcomes")
    return specs, notes
