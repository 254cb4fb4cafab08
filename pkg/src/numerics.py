"""
Shared numerical kernels: weighted least squares, logistic IRLS with
fractional responses, GLS over monotone missing-data patterns and (RE)ML
optimization of structured residual covariance matrices.

Every function here is pure; fits on disjoint inputs can run concurrently.
"""

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from loguru import logger
from scipy import linalg, optimize, special

from .errors import InvalidParams, NotConverged, SeparationDetected, SingularSystem

SINGULAR_TOLERANCE = 1e-10
IRLS_TOLERANCE = 1e-8
IRLS_MAX_ITER = 100
IRLS_SCORE_TOLERANCE = 1e-6
MAX_HALVINGS = 30
COEFFICIENT_CAP = 30.0
REML_GRADIENT_TOLERANCE = 1e-6
REML_RELATIVE_TOLERANCE = 1e-10
REML_MAX_ITER = 200
RHO_LIMIT = 1.0 - 1e-8
LOG_2PI = float(np.log(2.0 * np.pi))


class CovarianceStructure(str, Enum):
    UNSTRUCTURED = "unstructured"
    AR1 = "ar1"
    COMPOUND_SYMMETRY = "compound_symmetry"
    INDEPENDENCE = "independence"


DEFAULT_LADDER = (
    CovarianceStructure.UNSTRUCTURED,
    CovarianceStructure.AR1,
    CovarianceStructure.COMPOUND_SYMMETRY,
    CovarianceStructure.INDEPENDENCE,
)


def n_parameters(structure: Union[CovarianceStructure, str], k: int) -> int:
    """Length of theta for a structure of dimension k."""
    structure = CovarianceStructure(structure)
    if structure is CovarianceStructure.UNSTRUCTURED:
        return k * (k + 1) // 2
    if structure is CovarianceStructure.INDEPENDENCE:
        return k
    return 2


def _cs_lower(k: int) -> float:
    return -1.0 / (k - 1) if k > 2 else -1.0


@dataclass(frozen=True)
class CovarianceParams:
    """
    Unconstrained parameterization of a K x K residual covariance.

    theta layout:
        unstructured: log-Cholesky entries in row-major lower-triangle order,
            diagonal entries on the log scale
        ar1: (log sigma, atanh rho)
        compound_symmetry: (log sigma, theta_rho) with rho mapped onto the
            PD interval (-1/(K-1), 1)
        independence: log sigma_t per visit
    """

    structure: CovarianceStructure
    theta: np.ndarray
    k: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "structure", CovarianceStructure(self.structure))
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        expected = n_parameters(self.structure, self.k)
        if theta.size != expected:
            raise InvalidParams(
                f"{self.structure.value} covariance of dimension {self.k} takes "
                f"{expected} parameters, got {theta.size}"
            )
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def sigma(self) -> float:
        """Common standard deviation (ar1 / compound symmetry)."""
        return float(np.exp(self.theta[0]))

    @property
    def rho(self) -> float:
        """Correlation parameter (ar1 / compound symmetry)."""
        if self.structure is CovarianceStructure.AR1:
            return float(np.clip(np.tanh(self.theta[1]), -RHO_LIMIT, RHO_LIMIT))
        if self.structure is CovarianceStructure.COMPOUND_SYMMETRY:
            lo = _cs_lower(self.k)
            rho = lo + (1.0 - lo) * (np.tanh(self.theta[1]) + 1.0) / 2.0
            return float(np.clip(rho, lo + (1.0 - lo) * 1e-8, RHO_LIMIT))
        raise AttributeError(f"{self.structure.value} covariance has no rho")

    def cholesky_factor(self) -> np.ndarray:
        """Lower-triangular L with exp diagonal (unstructured only)."""
        factor = np.zeros((self.k, self.k))
        factor[np.tril_indices(self.k)] = self.theta
        diagonal = np.diag_indices(self.k)
        factor[diagonal] = np.exp(factor[diagonal])
        return factor

    def matrix(self) -> np.ndarray:
        """Materialize the covariance matrix."""
        k = self.k
        if self.structure is CovarianceStructure.UNSTRUCTURED:
            factor = self.cholesky_factor()
            return factor @ factor.T
        if self.structure is CovarianceStructure.INDEPENDENCE:
            return np.diag(np.exp(2.0 * self.theta))
        variance = np.exp(2.0 * self.theta[0])
        rho = self.rho
        if self.structure is CovarianceStructure.AR1:
            lags = np.abs(np.subtract.outer(np.arange(k), np.arange(k)))
            return variance * rho ** lags
        return variance * ((1.0 - rho) * np.eye(k) + rho * np.ones((k, k)))

    def derivatives(self) -> List[np.ndarray]:
        """dSigma/dtheta_j for every parameter, as K x K matrices."""
        k = self.k
        if self.structure is CovarianceStructure.UNSTRUCTURED:
            factor = self.cholesky_factor()
            result = []
            for row, col in zip(*np.tril_indices(k)):
                d_factor = np.zeros((k, k))
                d_factor[row, col] = factor[row, col] if row == col else 1.0
                product = d_factor @ factor.T
                result.append(product + product.T)
            return result
        if self.structure is CovarianceStructure.INDEPENDENCE:
            result = []
            for t in range(k):
                d_sigma = np.zeros((k, k))
                d_sigma[t, t] = 2.0 * np.exp(2.0 * self.theta[t])
                result.append(d_sigma)
            return result
        sigma_matrix = self.matrix()
        variance = np.exp(2.0 * self.theta[0])
        tanh = np.tanh(self.theta[1])
        if self.structure is CovarianceStructure.AR1:
            rho = self.rho
            lags = np.abs(np.subtract.outer(np.arange(k), np.arange(k)))
            d_rho = variance * np.where(lags > 0, lags * rho ** np.maximum(lags - 1, 0), 0.0)
            d_theta = 1.0 - tanh ** 2 if abs(tanh) < RHO_LIMIT else 0.0
            return [2.0 * sigma_matrix, d_rho * d_theta]
        lo = _cs_lower(k)
        d_theta = (1.0 - lo) * (1.0 - tanh ** 2) / 2.0
        return [2.0 * sigma_matrix, variance * (np.ones((k, k)) - np.eye(k)) * d_theta]

    @classmethod
    def from_matrix(cls, structure: Union[CovarianceStructure, str], sigma: np.ndarray) -> "CovarianceParams":
        """
        Project a covariance matrix onto a structure's parameterization.

        Exact for unstructured and independence; ar1 and compound symmetry use
        the average variance and the average lag-1 (resp. off-diagonal)
        correlation.
        """
        structure = CovarianceStructure(structure)
        sigma = np.asarray(sigma, dtype=np.float64)
        k = sigma.shape[0]
        if structure is CovarianceStructure.UNSTRUCTURED:
            try:
                factor = np.linalg.cholesky(sigma)
            except np.linalg.LinAlgError:
                raise SingularSystem("covariance matrix is not positive definite") from None
            factor[np.diag_indices(k)] = np.log(np.diag(factor))
            return cls(structure, factor[np.tril_indices(k)], k)
        variances = np.diag(sigma)
        if structure is CovarianceStructure.INDEPENDENCE:
            return cls(structure, 0.5 * np.log(variances), k)
        log_sigma = 0.5 * np.log(np.mean(variances))
        scale = np.sqrt(np.outer(variances, variances))
        correlation = sigma / scale
        if structure is CovarianceStructure.AR1:
            rho = float(np.mean(np.diag(correlation, 1))) if k > 1 else 0.0
            rho = float(np.clip(rho, -0.95, 0.95))
            return cls(structure, (log_sigma, np.arctanh(rho)), k)
        lo = _cs_lower(k)
        off_diagonal = correlation[~np.eye(k, dtype=bool)]
        rho = float(np.mean(off_diagonal)) if k > 1 else 0.0
        rho = float(np.clip(rho, lo + 0.05 * (1.0 - lo), 0.95))
        return cls(structure, (log_sigma, np.arctanh(2.0 * (rho - lo) / (1.0 - lo) - 1.0)), k)


@dataclass(frozen=True)
class FitDiagnostics:
    """Convergence record of an iterative fit."""

    converged: bool
    iterations: int
    objective: float
    gradient_norm: float
    condition: float
    tolerance: float
    separated: bool = False
    trace: Tuple[float, ...] = ()
    message: str = ""

    def to_dict(self) -> Dict[str, object]:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "objective": self.objective,
            "gradient_norm": self.gradient_norm,
            "condition": self.condition,
            "tolerance": self.tolerance,
            "separated": self.separated,
            "message": self.message,
        }


class WlsResult(NamedTuple):
    coefficients: np.ndarray
    fitted: np.ndarray


class LogisticFit(NamedTuple):
    coefficients: np.ndarray
    diagnostics: FitDiagnostics


class RemlFit(NamedTuple):
    params: CovarianceParams
    beta: np.ndarray
    diagnostics: FitDiagnostics


# --- linear and logistic regression -------------------------------------------


def _check_weights(design: np.ndarray, response: np.ndarray, weights: Optional[np.ndarray]) -> np.ndarray:
    if design.ndim != 2 or design.shape[0] != response.shape[0]:
        raise InvalidParams(f"design {design.shape} and response {response.shape} do not align")
    if weights is None:
        return np.ones(response.shape[0])
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != response.shape:
        raise InvalidParams("weights and response do not align")
    if not (np.isfinite(weights).all() and (weights > 0).all()):
        raise InvalidParams("weights must be positive and finite")
    return weights


def wls(design: np.ndarray, response: np.ndarray, weights: Optional[np.ndarray] = None) -> WlsResult:
    """
    Weighted least squares via QR of the row-scaled design.

    Args:
        design: (n, p) design matrix
        response: (n,) response
        weights: (n,) positive weights, unit weights when omitted

    Returns:
        WlsResult(coefficients, fitted values)

    Raises:
        SingularSystem: If the weighted design is rank deficient
    """
    design = np.asarray(design, dtype=np.float64)
    response = np.asarray(response, dtype=np.float64)
    weights = _check_weights(design, response, weights)
    if design.shape[0] < design.shape[1]:
        raise SingularSystem(f"{design.shape[0]} rows for {design.shape[1]} coefficients")
    root = np.sqrt(weights)
    q, r = linalg.qr(design * root[:, None], mode="economic")
    diagonal = np.abs(np.diag(r))
    if diagonal.size and diagonal.min() <= SINGULAR_TOLERANCE * max(diagonal.max(), 1e-300):
        raise SingularSystem("weighted design matrix is rank deficient")
    coefficients = linalg.solve_triangular(r, q.T @ (response * root))
    return WlsResult(coefficients, design @ coefficients)


def _quasi_loglik(eta: np.ndarray, response: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(weights * (response * eta - np.logaddexp(0.0, eta))))


def _newton_step(information: np.ndarray, score: np.ndarray) -> np.ndarray:
    """Solve information @ step = score, logging ill-conditioning instead of warning."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", linalg.LinAlgWarning)
        try:
            step = linalg.solve(information, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SingularSystem("logistic information matrix is singular") from None
    for warning in caught:
        if issubclass(warning.category, linalg.LinAlgWarning):
            logger.debug(f"Ill-conditioned logistic information matrix: {warning.message}")
        else:
            warnings.warn_explicit(warning.message, warning.category, warning.filename, warning.lineno)
    if not np.isfinite(step).all():
        raise SingularSystem("logistic information matrix is singular")
    return step


def irls_logistic(
    design: np.ndarray,
    response: np.ndarray,
    weights: Optional[np.ndarray] = None,
    tolerance: float = IRLS_TOLERANCE,
    max_iter: int = IRLS_MAX_ITER,
    cap: float = COEFFICIENT_CAP,
    strict: bool = False,
) -> LogisticFit:
    """
    Weighted logistic regression by Newton-Raphson (IRLS).

    Responses may be fractional in [0, 1]; the weighted Bernoulli
    quasi-log-likelihood is maximized without a dispersion parameter.
    Steps that lower the objective are halved; if halving never helps, the
    previous iterate is returned unconverged. When any coefficient reaches
    the cap the fit stops there and is flagged as separated.

    Raises:
        SingularSystem: If the information matrix cannot be factorized
        SeparationDetected: Only with strict=True, on hitting the cap
    """
    design = np.asarray(design, dtype=np.float64)
    response = np.asarray(response, dtype=np.float64)
    weights = _check_weights(design, response, weights)
    if ((response < 0.0) | (response > 1.0)).any():
        raise InvalidParams("logistic responses must lie in [0, 1]")

    beta = np.zeros(design.shape[1])
    objective = _quasi_loglik(design @ beta, response, weights)
    converged = False
    separated = False
    stalled = False
    trace = [objective]
    iteration = 0
    information = np.eye(design.shape[1])
    for iteration in range(1, max_iter + 1):
        mu = special.expit(design @ beta)
        score = design.T @ (weights * (response - mu))
        information = (design * (weights * mu * (1.0 - mu))[:, None]).T @ design
        step = _newton_step(information, score)

        candidate = beta + step
        new_objective = _quasi_loglik(design @ candidate, response, weights)
        halvings = 0
        while new_objective < objective - 1e-12 * abs(objective) and halvings < MAX_HALVINGS:
            step = step / 2.0
            candidate = beta + step
            new_objective = _quasi_loglik(design @ candidate, response, weights)
            halvings += 1
        if new_objective < objective - 1e-12 * abs(objective):
            # the previous iterate stays; no step direction improves the objective
            stalled = True
            break

        if np.abs(candidate).max(initial=0.0) >= cap:
            beta = np.clip(candidate, -cap, cap)
            objective = _quasi_loglik(design @ beta, response, weights)
            trace.append(objective)
            separated = True
            break
        beta = candidate
        objective = new_objective
        trace.append(objective)
        if np.abs(step).max(initial=0.0) < tolerance:
            converged = True
            break

    mu = special.expit(design @ beta)
    score_norm = float(np.abs(design.T @ (weights * (response - mu))).max(initial=0.0))
    converged = converged and not stalled and score_norm < IRLS_SCORE_TOLERANCE
    diagnostics = FitDiagnostics(
        converged=converged,
        iterations=iteration,
        objective=-objective,
        gradient_norm=score_norm,
        condition=float(np.linalg.cond(information)),
        tolerance=IRLS_SCORE_TOLERANCE,
        separated=separated,
        trace=tuple(-value for value in trace),
        message="step halving failed to improve the objective" if stalled else "",
    )
    if separated:
        logger.warning(f"Logistic fit hit the coefficient cap {cap} (separation)")
        if strict:
            raise SeparationDetected(f"coefficient magnitude reached {cap}")
    elif not converged:
        logger.debug(f"Logistic fit stopped after {iteration} iterations, score norm {score_norm:.3g}")
    return LogisticFit(beta, diagnostics)


# --- GLS over missing-data patterns -------------------------------------------


@dataclass(frozen=True)
class LongitudinalDesign:
    """
    Subject-by-visit regression layout.

    x holds one design row per subject and visit, y the outcomes (NaN where
    missing) and observed the availability mask. Subjects without any
    observed visit carry no likelihood contribution and are dropped.
    """

    x: np.ndarray
    y: np.ndarray
    observed: np.ndarray
    groups: Tuple[Tuple[np.ndarray, np.ndarray], ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        observed = np.asarray(self.observed, dtype=bool)
        keep = observed.any(axis=1)
        x = np.asarray(self.x, dtype=np.float64)[keep]
        y = np.where(observed, np.asarray(self.y, dtype=np.float64), 0.0)[keep]
        observed = observed[keep]
        patterns, inverse = np.unique(observed, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        groups = tuple(
            (np.flatnonzero(pattern), np.flatnonzero(inverse == g)) for g, pattern in enumerate(patterns)
        )
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "groups", groups)

    @property
    def n_subjects(self) -> int:
        return self.x.shape[0]

    @property
    def n_visits(self) -> int:
        return self.x.shape[1]

    @property
    def n_coefficients(self) -> int:
        return self.x.shape[2]

    @property
    def n_observations(self) -> int:
        return int(self.observed.sum())

    def complete_cases(self) -> np.ndarray:
        return self.observed.all(axis=1)


class _GlsTerms(NamedTuple):
    xtvx: np.ndarray
    xtvy: np.ndarray
    yvy: float
    logdet: float


def _pattern_whitening(sigma: np.ndarray, visits: np.ndarray) -> Tuple[np.ndarray, float]:
    block = sigma[np.ix_(visits, visits)]
    try:
        factor = linalg.cholesky(block, lower=True)
    except linalg.LinAlgError:
        raise SingularSystem("covariance submatrix is not positive definite") from None
    inverse_factor = linalg.solve_triangular(factor, np.eye(len(visits)), lower=True)
    return inverse_factor, 2.0 * float(np.sum(np.log(np.diag(factor))))


def _accumulate(design: LongitudinalDesign, sigma: np.ndarray) -> _GlsTerms:
    p = design.n_coefficients
    xtvx = np.zeros((p, p))
    xtvy = np.zeros(p)
    yvy = 0.0
    logdet = 0.0
    for visits, members in design.groups:
        inverse_factor, block_logdet = _pattern_whitening(sigma, visits)
        xs = design.x[members][:, visits, :]
        ys = design.y[members][:, visits]
        xw = np.einsum("ab,nbp->nap", inverse_factor, xs)
        yw = ys @ inverse_factor.T
        xtvx += np.einsum("nap,naq->pq", xw, xw)
        xtvy += np.einsum("nap,na->p", xw, yw)
        yvy += float(np.sum(yw * yw))
        logdet += members.size * block_logdet
    return _GlsTerms(xtvx, xtvy, yvy, logdet)


def _solve_normal(xtvx: np.ndarray, xtvy: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray, bool], float]:
    try:
        factor = linalg.cho_factor(xtvx, lower=True)
    except linalg.LinAlgError:
        raise SingularSystem("GLS normal equations are singular") from None
    diagonal = np.diag(factor[0])
    if diagonal.min() <= np.sqrt(SINGULAR_TOLERANCE) * diagonal.max():
        raise SingularSystem("GLS normal equations are numerically singular")
    beta = linalg.cho_solve(factor, xtvy)
    return beta, factor, 2.0 * float(np.sum(np.log(diagonal)))


def gls_profile_beta(design: LongitudinalDesign, params: Union[CovarianceParams, np.ndarray]) -> np.ndarray:
    """
    Generalized least squares fixed effects for a given residual covariance.

    Each subject contributes its observed subvector with the matching
    principal submatrix of Sigma.

    Raises:
        SingularSystem
    """
    sigma = params.matrix() if isinstance(params, CovarianceParams) else np.asarray(params)
    terms = _accumulate(design, sigma)
    return _solve_normal(terms.xtvx, terms.xtvy)[0]


def reml_objective(design: LongitudinalDesign, params: CovarianceParams, method: str = "reml") -> float:
    """
    Negative (restricted) log-likelihood with the fixed effects profiled out.

    Args:
        design: Longitudinal layout
        params: Covariance parameters
        method: 'reml' (default) or 'ml'
    """
    terms = _accumulate(design, params.matrix())
    beta, _, logdet_xtvx = _solve_normal(terms.xtvx, terms.xtvy)
    rss = terms.yvy - float(beta @ terms.xtvy)
    n = design.n_observations
    if method == "ml":
        return 0.5 * (terms.logdet + rss + n * LOG_2PI)
    p = design.n_coefficients
    return 0.5 * (terms.logdet + rss + logdet_xtvx + (n - p) * LOG_2PI)


def reml_gradient(design: LongitudinalDesign, params: CovarianceParams, method: str = "reml") -> np.ndarray:
    """
    Analytic gradient of reml_objective with respect to theta.

    Uses dL = tr(G dSigma) with
    G = 1/2 sum_i P_i' [S_i^-1 - S_i^-1 r_i r_i' S_i^-1 - S_i^-1 X_i C X_i' S_i^-1] P_i,
    where C = (X' V^-1 X)^-1; the last term is absent for ML. The fixed
    effects drop out at their optimum.
    """
    sigma = params.matrix()
    terms = _accumulate(design, sigma)
    beta, factor, _ = _solve_normal(terms.xtvx, terms.xtvy)
    information_inverse = linalg.cho_solve(factor, np.eye(design.n_coefficients))
    k = design.n_visits
    g_matrix = np.zeros((k, k))
    for visits, members in design.groups:
        inverse_factor, _ = _pattern_whitening(sigma, visits)
        precision = inverse_factor.T @ inverse_factor
        xs = design.x[members][:, visits, :]
        residuals = design.y[members][:, visits] - np.einsum("nap,p->na", xs, beta)
        scaled = residuals @ precision
        block = members.size * precision - scaled.T @ scaled
        if method != "ml":
            projected = np.einsum("ab,nbp->nap", precision, xs)
            block -= np.einsum("nap,pq,nbq->ab", projected, information_inverse, projected)
        g_matrix[np.ix_(visits, visits)] += 0.5 * block
    return np.array([float(np.sum(g_matrix * d_sigma)) for d_sigma in params.derivatives()])


def numeric_gradient(function, theta: np.ndarray) -> np.ndarray:
    """Central differences with step 1e-6 * (1 + |theta_j|)."""
    theta = np.asarray(theta, dtype=np.float64)
    gradient = np.empty_like(theta)
    for j in range(theta.size):
        step = 1e-6 * (1.0 + abs(theta[j]))
        forward = theta.copy()
        backward = theta.copy()
        forward[j] += step
        backward[j] -= step
        gradient[j] = (function(forward) - function(backward)) / (2.0 * step)
    return gradient


def initial_covariance(design: LongitudinalDesign) -> np.ndarray:
    """
    Starting covariance from OLS residuals.

    Complete cases give the sample covariance; otherwise pairwise moments
    over the observed pairs, falling back to a diagonal when the pairwise
    matrix is not positive definite.
    """
    rows = design.observed
    x_rows = design.x[rows]
    y_rows = design.y[rows]
    beta = np.linalg.lstsq(x_rows, y_rows, rcond=None)[0]
    residuals = np.where(design.observed, design.y - np.einsum("nkp,p->nk", design.x, beta), np.nan)
    k = design.n_visits
    complete = design.complete_cases()
    if complete.sum() > k + 1:
        sigma = np.atleast_2d(np.cov(residuals[complete], rowvar=False))
        if np.all(np.linalg.eigvalsh(sigma) > 1e-8 * max(np.trace(sigma), 1e-12)):
            return sigma
    sigma = np.empty((k, k))
    for s in range(k):
        for t in range(k):
            both = design.observed[:, s] & design.observed[:, t]
            sigma[s, t] = np.mean(residuals[both, s] * residuals[both, t]) if both.sum() > 1 else 0.0
    variances = np.maximum(np.diag(sigma), 1e-8)
    sigma[np.diag_indices(k)] = variances
    if np.all(np.linalg.eigvalsh(sigma) > 1e-8 * variances.sum()):
        return sigma
    logger.debug("Pairwise residual covariance not PD; starting from its diagonal")
    return np.diag(variances)


def fit_reml(
    design: LongitudinalDesign,
    structure: Union[CovarianceStructure, str] = CovarianceStructure.UNSTRUCTURED,
    init: Optional[np.ndarray] = None,
    method: str = "reml",
    gradient: str = "numeric",
    max_iter: int = REML_MAX_ITER,
    gradient_tolerance: float = REML_GRADIENT_TOLERANCE,
    strict: bool = False,
) -> RemlFit:
    """
    Fit the residual covariance by (restricted) maximum likelihood.

    Minimizes the profiled negative log-likelihood over theta with BFGS.
    Optimization stops on the gradient tolerance, on two consecutive
    accepted steps with relative objective change below 1e-10, or after
    max_iter iterations.

    Args:
        design: Longitudinal layout
        structure: Covariance structure
        init: Optional starting theta
        method: 'reml' or 'ml'
        gradient: 'numeric' (central differences) or 'analytic'
        max_iter: Iteration limit
        gradient_tolerance: Gradient infinity-norm tolerance, relative to
            max(1, |objective|)
        strict: Raise NotConverged instead of flagging

    Returns:
        RemlFit(params, beta, diagnostics)

    Raises:
        SingularSystem: If the fixed-effect design is singular
        NotConverged: Only with strict=True
    """
    structure = CovarianceStructure(structure)
    if method not in ("reml", "ml"):
        raise InvalidParams(f"unknown likelihood criterion {method!r}")
    if design.n_observations <= design.n_coefficients:
        raise SingularSystem(
            f"{design.n_observations} observations for {design.n_coefficients} fixed effects"
        )
    k = design.n_visits
    if init is None:
        theta0 = CovarianceParams.from_matrix(structure, initial_covariance(design)).theta.copy()
    else:
        theta0 = np.asarray(init, dtype=np.float64).copy()

    def objective(theta: np.ndarray) -> float:
        try:
            value = reml_objective(design, CovarianceParams(structure, theta, k), method)
        except SingularSystem:
            return np.inf
        return value if np.isfinite(value) else np.inf

    if gradient == "analytic":
        def jacobian(theta: np.ndarray) -> np.ndarray:
            return reml_gradient(design, CovarianceParams(structure, theta, k), method)
    elif gradient == "numeric":
        def jacobian(theta: np.ndarray) -> np.ndarray:
            return numeric_gradient(objective, theta)
    else:
        raise InvalidParams(f"unknown gradient mode {gradient!r}")

    start = objective(theta0)
    if not np.isfinite(start):
        raise SingularSystem("REML objective is not finite at the starting covariance")
    trace = [start]
    stalled = [0]

    def record(intermediate_result: optimize.OptimizeResult) -> None:
        previous = trace[-1]
        trace.append(float(intermediate_result.fun))
        change = abs(previous - trace[-1]) / max(abs(previous), 1e-300)
        stalled[0] = stalled[0] + 1 if change < REML_RELATIVE_TOLERANCE else 0
        if stalled[0] >= 2:
            raise StopIteration

    tolerance = gradient_tolerance * max(1.0, abs(start))
    result = optimize.minimize(
        objective,
        theta0,
        jac=jacobian,
        method="BFGS",
        callback=record,
        options={"gtol": tolerance, "maxiter": max_iter},
    )
    params = CovarianceParams(structure, result.x, k)
    final = objective(result.x)
    tolerance = gradient_tolerance * max(1.0, abs(final))
    gradient_norm = float(np.abs(jacobian(result.x)).max(initial=0.0))
    beta = gls_profile_beta(design, params)
    diagnostics = FitDiagnostics(
        converged=bool(np.isfinite(final) and gradient_norm <= tolerance),
        iterations=int(result.nit),
        objective=final,
        gradient_norm=gradient_norm,
        condition=float(np.linalg.cond(params.matrix())),
        tolerance=tolerance,
        trace=tuple(trace),
        message=str(result.message),
    )
    logger.debug(
        f"{method.upper()} fit ({structure.value}): objective {final:.6f}, "
        f"{diagnostics.iterations} iterations, gradient {gradient_norm:.3g}"
    )
    if not diagnostics.converged:
        logger.warning(
            f"{method.upper()} fit ({structure.value}) did not converge: gradient norm "
            f"{gradient_norm:.3g} > {tolerance:.3g}"
        )
        if strict:
            raise NotConverged(f"{structure.value} covariance fit did not converge", diagnostics)
    return RemlFit(params, beta, diagnostics)
