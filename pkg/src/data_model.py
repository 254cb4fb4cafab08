"""
Trial data representation, structural validation and CSV ingestion/export.

A trial dataset holds N participants with M fully observed baseline
covariates, a binary arm indicator and K post-baseline outcomes subject to
monotone dropout. Outcomes are stored as an (N, K) float array with NaN for
missing values; the "visit t observed" flags are derived from it, so an
outcome is present exactly when its flag is set.
"""

import math
from dataclasses import InitVar, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy import linalg

from .errors import (
    InvalidParams,
    MalformedFile,
    MixedArmSubject,
    NonMonotoneMissingness,
    RankDeficientDesign,
)

RANK_TOLERANCE = 1e-10
RESERVED_COLUMNS = ("subject_id", "arm", "visit", "outcome")
WIDE_OUTCOME_PREFIX = "y_"


class OutcomeKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class CovariateKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"
    ORDINAL = "ordinal"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class CovariateSpec:
    """
    Schema entry for one baseline covariate.

    Categorical covariates require their levels; the first level is the
    dropped reference cell. Ordinal covariates with levels are scored
    0..L-1 in level order, without levels the raw numeric value is the score.
    Binary covariates are 0/1 unless two levels are given.
    """

    name: str
    kind: CovariateKind
    levels: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CovariateKind(self.kind))
        object.__setattr__(self, "levels", tuple(str(level) for level in self.levels))
        if self.kind is CovariateKind.CATEGORICAL and len(self.levels) < 2:
            raise InvalidParams(f"categorical covariate {self.name!r} needs at least 2 levels")
        if self.kind is CovariateKind.BINARY and self.levels and len(self.levels) != 2:
            raise InvalidParams(f"binary covariate {self.name!r} takes exactly 2 levels")
        if len(set(self.levels)) != len(self.levels):
            raise InvalidParams(f"covariate {self.name!r} has duplicate levels")

    def code(self, token: str) -> float:
        """Convert a CSV cell into the stored numeric code."""
        token = token.strip()
        if self.levels:
            if token not in self.levels:
                raise MalformedFile(
                    f"value {token!r} of covariate {self.name!r} is not one of {list(self.levels)}"
                )
            return float(self.levels.index(token))
        value = _parse_float(token, f"covariate {self.name!r}")
        if self.kind is CovariateKind.BINARY and value not in (0.0, 1.0):
            raise MalformedFile(f"binary covariate {self.name!r} has value {token!r}")
        return value

    def decode(self, value: float) -> str:
        """Convert a stored code back into its CSV representation."""
        if self.levels:
            return self.levels[int(value)]
        return format_float(value)


Schema = Tuple[CovariateSpec, ...]


@dataclass(frozen=True)
class ParticipantRecord:
    """One participant's data vector (X, A, Y, R)."""

    subject_id: str
    baseline: Tuple[float, ...]
    arm: int
    outcomes: Tuple[Optional[float], ...]

    @property
    def observed(self) -> Tuple[bool, ...]:
        return tuple(value is not None for value in self.outcomes)


@dataclass(frozen=True)
class TrialDataset:
    """
    Immutable N-subject, K-visit trial dataset.

    Arrays are copied and marked read-only on construction, so instances can
    be shared across workers without synchronization.
    """

    subject_ids: Tuple[str, ...]
    arms: np.ndarray
    baseline: np.ndarray
    outcomes: np.ndarray
    outcome_kind: OutcomeKind
    visit_labels: Tuple[str, ...]
    schema: Schema
    discarded_by_coercion: int = 0
    check_rank: InitVar[bool] = True

    def __post_init__(self, check_rank: bool) -> None:
        arms = np.array(self.arms, dtype=np.int8).reshape(-1)
        outcomes = np.array(self.outcomes, dtype=np.float64)
        n = arms.shape[0]
        baseline = np.array(self.baseline, dtype=np.float64).reshape(n, len(self.schema))
        if outcomes.ndim != 2 or outcomes.shape[0] != n:
            raise InvalidParams(f"outcomes must have shape (N, K), got {outcomes.shape}")
        for array in (arms, baseline, outcomes):
            array.setflags(write=False)
        object.__setattr__(self, "arms", arms)
        object.__setattr__(self, "baseline", baseline)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        object.__setattr__(self, "visit_labels", tuple(str(v) for v in self.visit_labels))
        object.__setattr__(self, "schema", tuple(self.schema))
        self.validate()
        if check_rank:
            encode_design(self)

    def validate(self) -> None:
        """Check shapes, arms, outcome codes and monotone missingness."""
        n, k = self.outcomes.shape
        if len(self.subject_ids) != n:
            raise InvalidParams("subject_ids length does not match the number of records")
        if len(self.visit_labels) != k:
            raise InvalidParams(f"{len(self.visit_labels)} visit labels for {k} outcome columns")
        if k < 1:
            raise InvalidParams("at least one post-baseline visit is required")
        if not np.isin(self.arms, (0, 1)).all():
            raise InvalidParams("arm indicators must be 0 or 1")
        if not np.isfinite(self.baseline).all():
            raise InvalidParams("baseline covariates must be fully observed and finite")
        if np.isinf(self.outcomes).any():
            raise InvalidParams("outcomes must be finite or missing")
        for j, spec in enumerate(self.schema):
            if spec.levels:
                codes = self.baseline[:, j]
                if ((codes < 0) | (codes >= len(spec.levels)) | (codes != np.floor(codes))).any():
                    raise InvalidParams(f"covariate {spec.name!r} holds invalid level codes")
        observed = self.observed
        # a False followed by a True anywhere in the row breaks monotonicity
        violations = ~observed[:, :-1] & observed[:, 1:]
        if violations.any():
            row, col = np.argwhere(violations)[0]
            raise NonMonotoneMissingness(self.subject_ids[row], self.visit_labels[col + 1])
        if self.outcome_kind is OutcomeKind.BINARY:
            values = self.outcomes[observed]
            if not np.isin(values, (0.0, 1.0)).all():
                raise InvalidParams("binary datasets may only contain outcomes 0 and 1")

    @property
    def n_subjects(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_visits(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_covariates(self) -> int:
        return len(self.schema)

    @property
    def observed(self) -> np.ndarray:
        """(N, K) flags: outcome at visit t observed."""
        return ~np.isnan(self.outcomes)

    @property
    def covariate_names(self) -> Tuple[str, ...]:
        return tuple(spec.name for spec in self.schema)

    @property
    def records(self) -> List[ParticipantRecord]:
        records = []
        for i in range(self.n_subjects):
            outcomes = tuple(None if math.isnan(v) else float(v) for v in self.outcomes[i])
            records.append(ParticipantRecord(
                subject_id=self.subject_ids[i],
                baseline=tuple(float(v) for v in self.baseline[i]),
                arm=int(self.arms[i]),
                outcomes=outcomes,
            ))
        return records

    @classmethod
    def from_records(
        cls,
        records: Sequence[ParticipantRecord],
        outcome_kind: Union[OutcomeKind, str],
        visit_labels: Sequence[str],
        schema: Sequence[CovariateSpec],
        check_rank: bool = True,
    ) -> "TrialDataset":
        """Build a dataset from participant records."""
        k = len(visit_labels)
        m = len(schema)
        if any(len(r.outcomes) != k or len(r.baseline) != m for r in records):
            raise InvalidParams("all records must share K outcomes and M covariates")
        outcomes = np.array(
            [[np.nan if v is None else v for v in r.outcomes] for r in records], dtype=np.float64
        ).reshape(len(records), k)
        return cls(
            subject_ids=tuple(r.subject_id for r in records),
            arms=np.array([r.arm for r in records]),
            baseline=np.array([r.baseline for r in records], dtype=np.float64).reshape(len(records), m),
            outcomes=outcomes,
            outcome_kind=outcome_kind,
            visit_labels=tuple(visit_labels),
            schema=tuple(schema),
            check_rank=check_rank,
        )

    def take(self, indices: Sequence[int], relabel: bool = False) -> "TrialDataset":
        """
        Subset (or resample with repetition) subjects by position.

        Args:
            indices: Row positions, repetitions allowed
            relabel: Assign fresh sequential subject ids (needed when
                the result may be written to disk)

        Returns:
            New dataset; the design rank is not re-checked
        """
        indices = np.asarray(indices, dtype=np.intp)
        if relabel:
            width = max(4, len(str(len(indices))))
            ids = tuple(f"S{j + 1:0{width}d}" for j in range(len(indices)))
        else:
            ids = tuple(self.subject_ids[i] for i in indices)
        return TrialDataset(
            subject_ids=ids,
            arms=self.arms[indices],
            baseline=self.baseline[indices],
            outcomes=self.outcomes[indices],
            outcome_kind=self.outcome_kind,
            visit_labels=self.visit_labels,
            schema=self.schema,
            check_rank=False,
        )

    def with_outcomes(self, outcomes: np.ndarray, outcome_kind: Optional[OutcomeKind] = None) -> "TrialDataset":
        """Same subjects and baseline with a replaced outcome matrix."""
        return TrialDataset(
            subject_ids=self.subject_ids,
            arms=self.arms,
            baseline=self.baseline,
            outcomes=outcomes,
            outcome_kind=outcome_kind or self.outcome_kind,
            visit_labels=self.visit_labels,
            schema=self.schema,
            check_rank=False,
        )

    def with_arms(self, arms: np.ndarray) -> "TrialDataset":
        """Same subjects with replaced arm assignments."""
        return TrialDataset(
            subject_ids=self.subject_ids,
            arms=arms,
            baseline=self.baseline,
            outcomes=self.outcomes,
            outcome_kind=self.outcome_kind,
            visit_labels=self.visit_labels,
            schema=self.schema,
            check_rank=False,
        )

    def __repr__(self) -> str:
        return (f"TrialDataset(N={self.n_subjects}, K={self.n_visits}, M={self.n_covariates}, "
                f"outcome={self.outcome_kind.value})")


@dataclass(frozen=True)
class EncodedDesign:
    """Baseline design matrix (1, encoded X)."""

    matrix: np.ndarray
    columns: Tuple[str, ...]
    reference_levels: Dict[str, str] = field(default_factory=dict)

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class DropoutSummary:
    """Per-visit missing fractions, overall and per arm."""

    visit_labels: Tuple[str, ...]
    overall: np.ndarray
    by_arm: Dict[int, np.ndarray]

    def to_dict(self) -> dict:
        return {
            "visit_labels": list(self.visit_labels),
            "overall": [float(v) for v in self.overall],
            "by_arm": {str(arm): [float(v) for v in values] for arm, values in self.by_arm.items()},
        }


def format_float(value: float) -> str:
    """17 significant digits; empty string for missing."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return format(float(value), ".17g")


def _parse_float(token: str, what: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedFile(f"{what}: cannot parse {token!r} as a number") from None
    if not math.isfinite(value):
        raise MalformedFile(f"{what}: non-finite value {token!r}")
    return value


def _parse_arm(token: str, subject_id: str) -> int:
    value = _parse_float(token, f"arm of subject {subject_id!r}")
    if value not in (0.0, 1.0):
        raise MalformedFile(f"arm of subject {subject_id!r} must be 0 or 1, got {token!r}")
    return int(value)


def encode_design(ds: TrialDataset) -> EncodedDesign:
    """
    Encode baseline covariates into a design matrix with intercept.

    Categorical covariates are expanded to indicators for every level but
    the first; ordinal covariates enter as numeric scores.

    Raises:
        RankDeficientDesign: If a pivoted QR finds rank below the column count
    """
    blocks = [np.ones((ds.n_subjects, 1))]
    columns = ["intercept"]
    references = {}
    for j, spec in enumerate(ds.schema):
        values = ds.baseline[:, j]
        if spec.kind is CovariateKind.CATEGORICAL:
            codes = values.astype(np.intp)
            indicators = (codes[:, None] == np.arange(1, len(spec.levels))[None, :]).astype(np.float64)
            blocks.append(indicators)
            columns.extend(f"{spec.name}[{level}]" for level in spec.levels[1:])
            references[spec.name] = spec.levels[0]
        else:
            blocks.append(values[:, None])
            columns.append(spec.name)
    matrix = np.hstack(blocks)
    rank = design_rank(matrix)
    if rank < matrix.shape[1]:
        raise RankDeficientDesign(rank, columns)
    matrix.setflags(write=False)
    return EncodedDesign(matrix=matrix, columns=tuple(columns), reference_levels=references)


def design_rank(matrix: np.ndarray, tolerance: float = RANK_TOLERANCE) -> int:
    """Numerical column rank from a pivoted QR, relative to the largest pivot."""
    if matrix.shape[0] == 0:
        return 0
    r = linalg.qr(matrix, mode="r", pivoting=True)[0]
    diagonal = np.abs(np.diag(r))
    if diagonal.size == 0 or diagonal[0] == 0.0:
        return 0
    return int(np.sum(diagonal > tolerance * diagonal[0]))


def dropout_summary(ds: TrialDataset) -> DropoutSummary:
    """
    Per-visit missing fractions overall and within each non-empty arm.

    Returns:
        DropoutSummary whose fractions are nondecreasing across visits
    """
    missing = ~ds.observed
    by_arm = {}
    for arm in (0, 1):
        mask = ds.arms == arm
        if mask.any():
            by_arm[arm] = missing[mask].mean(axis=0)
    overall = missing.mean(axis=0) if ds.n_subjects else np.zeros(ds.n_visits)
    return DropoutSummary(visit_labels=ds.visit_labels, overall=overall, by_arm=by_arm)


# --- schema handling ----------------------------------------------------------


def parse_schema_spec(text: str) -> Schema:
    """
    Parse a compact schema description.

    Format: comma-separated ``name:kind[:level1|level2|...]`` entries, e.g.
    ``age:continuous,sex:binary,region:categorical:north|south|west``.
    """
    specs = []
    for entry in filter(None, (part.strip() for part in text.split(","))):
        parts = entry.split(":")
        if len(parts) not in (2, 3):
            raise InvalidParams(f"cannot parse covariate entry {entry!r}")
        try:
            kind = CovariateKind(parts[1].strip())
        except ValueError:
            raise InvalidParams(f"unknown covariate kind {parts[1]!r} in {entry!r}") from None
        levels = tuple(level.strip() for level in parts[2].split("|")) if len(parts) == 3 else ()
        specs.append(CovariateSpec(parts[0].strip(), kind, levels))
    return tuple(specs)


def _is_numeric(values: Iterable[str]) -> bool:
    try:
        for value in values:
            float(value)
    except ValueError:
        return False
    return True


def infer_schema(frame: pd.DataFrame, layout: str = "wide") -> Schema:
    """
    Infer a covariate schema from non-reserved columns.

    Numeric columns holding only 0/1 become binary, other numeric columns
    continuous, non-numeric columns categorical with levels in sorted order.
    """
    specs = []
    for column in frame.columns:
        if column in RESERVED_COLUMNS or (layout == "wide" and column.startswith(WIDE_OUTCOME_PREFIX)):
            continue
        values = [v.strip() for v in frame[column].astype(str) if v.strip() != ""]
        if _is_numeric(values):
            numbers = {float(v) for v in values}
            kind = CovariateKind.BINARY if numbers <= {0.0, 1.0} else CovariateKind.CONTINUOUS
            specs.append(CovariateSpec(column, kind))
        else:
            specs.append(CovariateSpec(column, CovariateKind.CATEGORICAL, tuple(sorted(set(values)))))
    logger.debug(f"Inferred schema: {[(s.name, s.kind.value) for s in specs]}")
    return tuple(specs)


# --- CSV ingestion / export --------------------------------------------------------


def read_frame(path: Union[str, Path]) -> pd.DataFrame:
    """Read a CSV as strings with empty cells preserved as ''."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise MalformedFile(f"file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise MalformedFile(f"cannot parse {path}: {exc}") from None
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def load_csv(
    path: Union[str, Path],
    schema: Optional[Sequence[CovariateSpec]] = None,
    layout: str = "wide",
    outcome_kind: Optional[Union[OutcomeKind, str]] = None,
    coerce_monotone: bool = False,
) -> TrialDataset:
    """
    Load and validate a trial dataset from CSV.

    Args:
        path: CSV file
        schema: Covariate schema; inferred from the columns when omitted
        layout: 'long' (one row per subject-visit) or 'wide' (one row per subject)
        outcome_kind: 'continuous' or 'binary'; inferred when omitted
        coerce_monotone: Censor everything after the first missing visit
            instead of rejecting intermittent missingness

    Returns:
        Validated TrialDataset

    Raises:
        MalformedFile, NonMonotoneMissingness, MixedArmSubject, RankDeficientDesign
    """
    frame = read_frame(path)
    if schema is None:
        schema = infer_schema(frame, layout)
    schema = tuple(schema)
    if layout == "wide":
        ids, arms, baseline, outcomes, labels = _parse_wide(frame, schema)
    elif layout == "long":
        ids, arms, baseline, outcomes, labels = _parse_long(frame, schema)
    else:
        raise InvalidParams(f"unknown layout {layout!r} (expected 'long' or 'wide')")

    observed = ~np.isnan(outcomes)
    gaps = ~observed[:, :-1] & observed[:, 1:]
    discarded = 0
    if gaps.any():
        if not coerce_monotone:
            row, col = np.argwhere(gaps)[0]
            raise NonMonotoneMissingness(ids[row], labels[col + 1])
        # keep only the leading run of observed visits
        keep = np.cumprod(observed, axis=1).astype(bool)
        discarded = int(np.sum(observed & ~keep))
        outcomes = np.where(keep, outcomes, np.nan)
        logger.warning(f"Coerced monotone missingness: discarded {discarded} observed values")

    if outcome_kind is None:
        values = outcomes[~np.isnan(outcomes)]
        outcome_kind = OutcomeKind.BINARY if values.size and np.isin(values, (0.0, 1.0)).all() else OutcomeKind.CONTINUOUS
        logger.debug(f"Inferred outcome kind: {outcome_kind.value}")
    outcome_kind = OutcomeKind(outcome_kind)
    if outcome_kind is OutcomeKind.BINARY:
        values = outcomes[~np.isnan(outcomes)]
        if not np.isin(values, (0.0, 1.0)).all():
            raise MalformedFile(f"{path}: binary outcome column contains values other than 0/1")

    ds = TrialDataset(
        subject_ids=ids,
        arms=arms,
        baseline=baseline,
        outcomes=outcomes,
        outcome_kind=outcome_kind,
        visit_labels=labels,
        schema=schema,
        discarded_by_coercion=discarded,
    )
    logger.info(f"Loaded {ds!r} from {path}")
    return ds


def _require_columns(frame: pd.DataFrame, columns: Sequence[str]) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise MalformedFile(f"missing required columns: {', '.join(missing)}")


def _code_baseline(rows: Sequence[Dict[str, str]], schema: Schema, ids: Sequence[str]) -> np.ndarray:
    baseline = np.empty((len(rows), len(schema)))
    for i, row in enumerate(rows):
        for j, spec in enumerate(schema):
            token = row[spec.name].strip()
            if token == "":
                raise MalformedFile(f"subject {ids[i]!r} is missing baseline covariate {spec.name!r}")
            baseline[i, j] = spec.code(token)
    return baseline


def _parse_outcome(token: str, subject_id: str) -> float:
    token = token.strip()
    if token == "":
        return np.nan
    return _parse_float(token, f"outcome of subject {subject_id!r}")


def _parse_wide(frame: pd.DataFrame, schema: Schema):
    _require_columns(frame, ("subject_id", "arm") + tuple(s.name for s in schema))
    outcome_columns = [c for c in frame.columns if c.startswith(WIDE_OUTCOME_PREFIX)]
    if not outcome_columns:
        raise MalformedFile(f"wide layout needs outcome columns named {WIDE_OUTCOME_PREFIX}<visit>")
    labels = tuple(c[len(WIDE_OUTCOME_PREFIX):] for c in outcome_columns)

    ids: List[str] = []
    arms: Dict[str, int] = {}
    rows = []
    for row in frame.to_dict("records"):
        subject = row["subject_id"].strip()
        arm = _parse_arm(row["arm"], subject)
        if subject in arms:
            if arms[subject] != arm:
                raise MixedArmSubject(subject)
            raise MalformedFile(f"subject {subject!r} appears on more than one row of a wide file")
        arms[subject] = arm
        ids.append(subject)
        rows.append(row)
    outcomes = np.array(
        [[_parse_outcome(row[c], row["subject_id"].strip()) for c in outcome_columns] for row in rows],
        dtype=np.float64,
    ).reshape(len(rows), len(outcome_columns))
    baseline = _code_baseline(rows, schema, ids)
    return tuple(ids), np.array([arms[s] for s in ids]), baseline, outcomes, labels


def _visit_order(labels: Sequence[str]) -> Tuple[str, ...]:
    unique = list(dict.fromkeys(labels))
    if _is_numeric(unique):
        unique.sort(key=float)
    return tuple(unique)


def _parse_long(frame: pd.DataFrame, schema: Schema):
    _require_columns(frame, RESERVED_COLUMNS + tuple(s.name for s in schema))
    frame = frame.assign(
        subject_id=frame["subject_id"].str.strip(),
        visit=frame["visit"].str.strip(),
    )
    labels = _visit_order(frame["visit"].tolist())
    position = {label: t for t, label in enumerate(labels)}
    ids = list(dict.fromkeys(frame["subject_id"].tolist()))
    index = {subject: i for i, subject in enumerate(ids)}

    outcomes = np.full((len(ids), len(labels)), np.nan)
    seen = np.zeros_like(outcomes, dtype=bool)
    arms: Dict[str, int] = {}
    first_rows: Dict[str, Dict[str, str]] = {}
    names = [s.name for s in schema]
    for row in frame.to_dict("records"):
        subject = row["subject_id"]
        arm = _parse_arm(row["arm"], subject)
        if subject in arms and arms[subject] != arm:
            raise MixedArmSubject(subject)
        arms[subject] = arm
        if subject in first_rows:
            previous = first_rows[subject]
            changed = [n for n in names if previous[n].strip() != row[n].strip()]
            if changed:
                raise MalformedFile(f"subject {subject!r} has inconsistent baseline values for {changed}")
        else:
            first_rows[subject] = row
        i, t = index[subject], position[row["visit"]]
        if seen[i, t]:
            raise MalformedFile(f"subject {subject!r} has more than one row for visit {row['visit']!r}")
        seen[i, t] = True
        outcomes[i, t] = _parse_outcome(row["outcome"], subject)

    baseline = _code_baseline([first_rows[s] for s in ids], schema, ids)
    return tuple(ids), np.array([arms[s] for s in ids]), baseline, outcomes, labels


def save_csv(ds: TrialDataset, path: Union[str, Path], layout: str = "wide") -> None:
    """
    Write a dataset to CSV; floats carry 17 significant digits, missing
    outcomes are empty cells.
    """
    covariates = {
        spec.name: [spec.decode(v) for v in ds.baseline[:, j]] for j, spec in enumerate(ds.schema)
    }
    arms = [str(int(a)) for a in ds.arms]
    if layout == "wide":
        data = {"subject_id": list(ds.subject_ids), "arm": arms}
        data.update(covariates)
        for t, label in enumerate(ds.visit_labels):
            data[f"{WIDE_OUTCOME_PREFIX}{label}"] = [format_float(v) for v in ds.outcomes[:, t]]
        frame = pd.DataFrame(data)
    elif layout == "long":
        rows = []
        for i, subject in enumerate(ds.subject_ids):
            for t, label in enumerate(ds.visit_labels):
                row = {"subject_id": subject, "arm": arms[i], "visit": label,
                       "outcome": format_float(ds.outcomes[i, t])}
                row.update({name: values[i] for name, values in covariates.items()})
                rows.append(row)
        frame = pd.DataFrame(rows, columns=list(RESERVED_COLUMNS) + list(covariates))
    else:
        raise InvalidParams(f"unknown layout {layout!r} (expected 'long' or 'wide')")
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    logger.debug(f"Saved {ds!r} to {path} ({layout} layout)")
