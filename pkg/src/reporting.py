"""
Tables, CSV frames and JSON reports for analyses and simulation studies.

JSON is the canonical machine output; CSV frames are derived from it.
Text tables round to 4 decimals (2 for relative MSE and coverage).
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .data_model import DropoutSummary, TrialDataset, dropout_summary
from .errors import SchemaMismatch
from .estimators import EffectEstimate
from .inference import BootstrapResult
from .simulation import EstimatorMetrics, ScenarioMetrics

REPORT_SCHEMA_VERSION = 1
REFERENCE_BOOT_B = 10_000
CSV_FLOAT_FORMAT = "%.10g"
REFERENCE_ESTIMATOR = "unadjusted"
DOMINANT_FLAG = "adjusted dominant"


def _finite(value: Any) -> Any:
    """Replace non-finite floats by None, recursively."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, np.floating):
        return _finite(float(value))
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return _finite(value.tolist())
    if isinstance(value, dict):
        return {key: _finite(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(item) for item in value]
    return value


def to_json(payload: Dict[str, Any]) -> str:
    return json.dumps(_finite(payload), indent=2, allow_nan=False) + "\n"


def frame_to_csv(frame: pd.DataFrame, path: Optional[Union[str, Path]] = None) -> str:
    """Render a frame as CSV; also writes it when a path is given."""
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# --- simulation metrics ------------------------------------------------------------


def _cell(value: Optional[float], digits: int, width: int) -> str:
    if value is None or not math.isfinite(value):
        return "-".rjust(width)
    return f"{value:{width}.{digits}f}"


def format_metrics_table(metrics: ScenarioMetrics) -> str:
    """
    Fixed-width block with columns Bias, VAR, MSE, RMSE (relative MSE) and CP.
    """
    lines = [
        f"Scenario {metrics.scenario} ({metrics.outcome_kind.value}), "
        f"true delta = {metrics.true_delta:.4f}, {metrics.replicates} replicates, seed {metrics.seed}",
    ]
    if metrics.boot_B > 0:
        lines.append(
            f"Coverage of {metrics.level:.0%} BCa intervals from B = {metrics.boot_B:,} resamples "
            f"(reference analyses use B = {REFERENCE_BOOT_B:,})"
        )
    else:
        lines.append("Coverage not computed (B = 0)")
    width = max(12, *(len(row.estimator) for row in metrics.rows)) + 2
    lines.append(f"{'Estimator':<{width}}{'Bias':>9}{'VAR':>9}{'MSE':>9}{'RMSE':>7}{'CP':>7}{'Failed':>8}")
    for row in metrics.rows:
        failed = sum(row.failures.values())
        lines.append(
            f"{row.estimator:<{width}}"
            f"{_cell(row.bias, 4, 9)}{_cell(row.variance, 4, 9)}{_cell(row.mse, 4, 9)}"
            f"{_cell(row.relative_mse, 2, 7)}{_cell(row.coverage, 2, 7)}{failed:>8d}"
        )
    return "\n".join(lines) + "\n"


def _metrics_row(metrics: ScenarioMetrics, row: EstimatorMetrics) -> Dict[str, Any]:
    return {
        "scenario": metrics.scenario,
        "outcome": metrics.outcome_kind.value,
        "true_delta": metrics.true_delta,
        "estimator": row.estimator,
        "replicates": row.replicates,
        "bias": row.bias,
        "bias_se": row.bias_se,
        "var": row.variance,
        "var_se": row.variance_se,
        "mse": row.mse,
        "mse_se": row.mse_se,
        "relative_mse": row.relative_mse,
        "relative_mse_se": row.relative_mse_se,
        "coverage": np.nan if row.coverage is None else row.coverage,
        "coverage_se": np.nan if row.coverage_se is None else row.coverage_se,
        "coverage_replicates": row.coverage_replicates,
        "failures": sum(row.failures.values()),
        "boot_B": metrics.boot_B,
        "seed": metrics.seed,
    }


def metrics_to_frame(results: Sequence[ScenarioMetrics]) -> pd.DataFrame:
    """One row per (scenario, estimator), in the order given."""
    rows = [_metrics_row(metrics, row) for metrics in results for row in metrics.rows]
    return pd.DataFrame(rows, columns=list(_METRIC_COLUMNS))


_METRIC_COLUMNS = (
    "scenario", "outcome", "true_delta", "estimator", "replicates", "bias", "bias_se", "var", "var_se",
    "mse", "mse_se", "relative_mse", "relative_mse_se", "coverage", "coverage_se", "coverage_replicates",
    "failures", "boot_B", "seed",
)


# --- analysis report ---------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorReport:
    estimate: EffectEstimate
    bootstrap: Optional[BootstrapResult] = None
    variance_ratio: Optional[float] = None

    @property
    def name(self) -> str:
        return self.estimate.label or self.estimate.estimator_kind.value

    def to_dict(self) -> Dict[str, Any]:
        payload = self.estimate.to_dict()
        payload["bootstrap"] = None if self.bootstrap is None else self.bootstrap.to_dict()
        payload["variance_ratio"] = self.variance_ratio
        return payload


@dataclass(frozen=True)
class AnalysisReport:
    """
    Result of analysing one dataset with several estimators.

    Variance ratios are V_unadjusted / V_estimator from bootstrap variances;
    the unadjusted row is exactly 1.
    """

    study_id: str
    n_subjects: int
    n_visits: int
    outcome_kind: str
    visit_labels: Sequence[str]
    dropout: DropoutSummary
    estimates: Sequence[EstimatorReport]
    seed: int
    boot_B: int
    level: float
    failures: Dict[str, str] = field(default_factory=dict)
    notes: Sequence[str] = ()
    timings: Optional[Dict[str, float]] = None

    @property
    def glmm_structures(self) -> Dict[str, Dict[str, Any]]:
        """Per-structure GLMM results when single-structure fits were requested."""
        structures = {}
        for entry in self.estimates:
            base, _, structure = entry.name.partition(":")
            if base == "glmm" and structure:
                structures[structure] = {
                    "converged": entry.estimate.converged,
                    "delta": entry.estimate.delta,
                    "variance_ratio": entry.variance_ratio,
                }
        for name, message in self.failures.items():
            base, _, structure = name.partition(":")
            if base == "glmm" and structure:
                structures[structure] = {"converged": False, "delta": None, "variance_ratio": None,
                                         "error": message}
        return structures

    @property
    def glmm_best(self) -> Optional[str]:
        """Convergent structure with the largest variance ratio."""
        candidates = [
            (info["variance_ratio"], name)
            for name, info in self.glmm_structures.items()
            if info["converged"] and info["variance_ratio"] is not None
        ]
        if not candidates:
            return None
        return max(candidates, key=lambda item: item[0])[1]

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "study_id": self.study_id,
            "data": {
                "n_subjects": self.n_subjects,
                "n_visits": self.n_visits,
                "outcome": self.outcome_kind,
                "visit_labels": list(self.visit_labels),
                "dropout": self.dropout.to_dict(),
            },
            "inference": {"boot_B": self.boot_B, "seed": self.seed, "level": self.level},
            "estimates": [entry.to_dict() for entry in self.estimates],
            "variance_ratios": {entry.name: entry.variance_ratio for entry in self.estimates},
            "failures": dict(self.failures),
            "notes": list(self.notes),
            "metadata": {
                "package": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pandas": pd.__version__,
            },
        }
        if self.glmm_structures:
            payload["glmm_structures"] = self.glmm_structures
            payload["glmm_best"] = self.glmm_best
        if self.timings is not None:
            payload["timings"] = {name: round(seconds, 3) for name, seconds in self.timings.items()}
        return payload

    def to_json(self) -> str:
        return to_json(self.to_dict())

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for entry in self.estimates:
            estimate, boot = entry.estimate, entry.bootstrap
            rows.append({
                "study_id": self.study_id,
                "estimator": entry.name,
                "delta": estimate.delta,
                "mean_control": estimate.arm_means[0],
                "mean_treated": estimate.arm_means[1],
                "se": np.nan if boot is None else boot.standard_error,
                "variance": np.nan if boot is None else boot.variance,
                "ci_lower": np.nan if boot is None else boot.interval.lower,
                "ci_upper": np.nan if boot is None else boot.interval.upper,
                "level": self.level,
                "interval": "" if boot is None else boot.interval.fallback_used,
                "variance_ratio": np.nan if entry.variance_ratio is None else entry.variance_ratio,
                "covariance_structure": estimate.covariance_structure_used or "",
                "converged": estimate.converged,
                "n_used": estimate.n_used,
                "boot_retained": 0 if boot is None else boot.retained,
                "boot_excluded": 0 if boot is None else boot.excluded,
            })
        return pd.DataFrame(rows)


def variance_ratios(entries: Sequence[EstimatorReport]) -> List[EstimatorReport]:
    """Fill variance ratios against the unadjusted entry when it has a bootstrap variance."""
    reference = next((e for e in entries if e.name == REFERENCE_ESTIMATOR and e.bootstrap is not None), None)
    filled = []
    for entry in entries:
        ratio = None
        if entry.name == REFERENCE_ESTIMATOR and entry.bootstrap is not None:
            ratio = 1.0
        elif reference is not None and entry.bootstrap is not None and entry.bootstrap.variance > 0:
            ratio = reference.bootstrap.variance / entry.bootstrap.variance  # type: ignore[union-attr]
        filled.append(EstimatorReport(entry.estimate, entry.bootstrap, ratio))
    return filled


def build_analysis_report(
    study_id: str,
    ds: TrialDataset,
    entries: Sequence[EstimatorReport],
    seed: int,
    boot_B: int,
    level: float,
    failures: Optional[Dict[str, str]] = None,
    notes: Sequence[str] = (),
    timings: Optional[Dict[str, float]] = None,
) -> AnalysisReport:
    return AnalysisReport(
        study_id=study_id,
        n_subjects=ds.n_subjects,
        n_visits=ds.n_visits,
        outcome_kind=ds.outcome_kind.value,
        visit_labels=ds.visit_labels,
        dropout=dropout_summary(ds),
        estimates=variance_ratios(entries),
        seed=seed,
        boot_B=boot_B,
        level=level,
        failures=dict(failures or {}),
        notes=tuple(notes),
        timings=timings,
    )


def format_analysis_table(report: AnalysisReport) -> str:
    lines = [
        f"Study {report.study_id}: N={report.n_subjects}, K={report.n_visits}, {report.outcome_kind} outcome, "
        f"final-visit missing {report.dropout.overall[-1]:.1%}",
        f"{'Estimator':<22}{'Delta':>10}{'SE':>9}{'Lower':>10}{'Upper':>10}{'V ratio':>9}",
    ]
    for entry in report.estimates:
        boot = entry.bootstrap
        lines.append(
            f"{entry.name:<22}{_cell(entry.estimate.delta, 4, 10)}"
            f"{_cell(None if boot is None else boot.standard_error, 4, 9)}"
            f"{_cell(None if boot is None else boot.interval.lower, 4, 10)}"
            f"{_cell(None if boot is None else boot.interval.upper, 4, 10)}"
            f"{_cell(entry.variance_ratio, 2, 9)}"
        )
    for name, message in report.failures.items():
        lines.append(f"{name:<22}failed: {message}")
    lines.extend(f"note: {note}" for note in report.notes)
    return "\n".join(lines) + "\n"


# --- cross-study comparison ------------------------------------------------------------


def load_report(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"cannot read analysis report {path}: {exc}") from None
    if not isinstance(payload, dict):
        raise SchemaMismatch(f"{path} is not an analysis report")
    return payload


def variance_ratio_frame(reports: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """
    One row per study and estimator with V_unadjusted / V_estimator.

    A study whose adjusted estimators all have ratios above 1 is flagged
    'adjusted dominant'. Rows are sorted by study ID, keeping estimator order.

    Raises:
        SchemaMismatch: If a report has another schema version or lacks fields
    """
    rows = []
    for report in reports:
        version = report.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise SchemaMismatch(
                f"report {report.get('study_id', '?')!r} has schema_version {version}, "
                f"expected {REPORT_SCHEMA_VERSION}"
            )
        if "study_id" not in report or "variance_ratios" not in report:
            raise SchemaMismatch("analysis report lacks study_id or variance_ratios")
        ratios = report["variance_ratios"]
        adjusted = [value for name, value in ratios.items() if name != REFERENCE_ESTIMATOR]
        dominant = bool(adjusted) and all(value is not None and value > 1.0 for value in adjusted)
        for name, value in ratios.items():
            rows.append({
                "study_id": str(report["study_id"]),
                "estimator": name,
                "variance_ratio": np.nan if value is None else float(value),
                "flag": DOMINANT_FLAG if dominant else "",
            })
    frame = pd.DataFrame(rows, columns=["study_id", "estimator", "variance_ratio", "flag"])
    return frame.sort_values("study_id", kind="stable").reset_index(drop=True)
