"""
Exception hierarchy shared by every module.

Input problems (bad files, bad configuration, incompatible requests) derive
from InputError; numerical failures (singular systems, non-convergence,
empty risk sets) derive from NumericalError. The CLI maps the two families
to exit codes 1 and 2.
"""

from typing import Any, Optional, Sequence


class TrialAnalysisError(Exception):
    """Base class for all toolkit errors."""


class InputError(TrialAnalysisError, ValueError):
    """Invalid input data, options or configuration."""

    exit_code = 1


class NumericalError(TrialAnalysisError, ArithmeticError):
    """A numerical procedure could not produce a usable result."""

    exit_code = 2


# --- input errors -----------------------------------------------------------


class MalformedFile(InputError):
    """A data or report file could not be parsed."""


class NonMonotoneMissingness(InputError):
    """An outcome is observed after a missing visit."""

    def __init__(self, subject_id: str, visit: str):
        self.subject_id = subject_id
        self.visit = visit
        super().__init__(
            f"subject {subject_id!r} has an observed outcome at visit {visit!r} "
            f"after a missing visit (monotone dropout required)"
        )


class MixedArmSubject(InputError):
    """A subject appears with two different arm assignments."""

    def __init__(self, subject_id: str):
        self.subject_id = subject_id
        super().__init__(f"subject {subject_id!r} appears in both arms")


class RankDeficientDesign(InputError):
    """The baseline design (1, X) is not of full column rank."""

    def __init__(self, rank: int, columns: Sequence[str]):
        self.rank = rank
        self.columns = tuple(columns)
        super().__init__(
            f"baseline design has rank {rank} < {len(self.columns)} columns "
            f"({', '.join(self.columns)})"
        )


class IncompatibleOutcome(InputError):
    """The estimator does not support the dataset's outcome kind."""


class EmptyArm(InputError):
    """An arm has no subject observed at the final visit."""

    def __init__(self, arm: int):
        self.arm = arm
        super().__init__(f"arm {arm} has no subject observed at the final visit")


class InvalidParams(InputError):
    """Generator, effect or dropout parameters are out of range."""


class ConfigError(InputError):
    """A scenario configuration value is missing or invalid."""

    def __init__(self, message: str, section: Optional[str] = None, field: Optional[str] = None):
        self.section = section
        self.field = field
        where = ""
        if section is not None:
            where = f"[{section}]" + (f" {field}" if field else "") + ": "
        super().__init__(where + message)


class SchemaMismatch(InputError):
    """Report files disagree on schema version or layout."""


# --- numerical errors -------------------------------------------------------


class SingularSystem(NumericalError):
    """A linear system or covariance matrix is numerically singular."""


class SeparationDetected(NumericalError):
    """A logistic fit diverged (coefficient magnitude hit the cap)."""


class NotConverged(NumericalError):
    """An iterative fit stopped before meeting its tolerance."""

    def __init__(self, message: str, diagnostics: Any = None):
        self.diagnostics = diagnostics
        super().__init__(message)


class AllStructuresFailed(NumericalError):
    """No working covariance structure in the ladder converged."""

    def __init__(self, attempts: Sequence[str]):
        self.attempts = tuple(attempts)
        super().__init__(f"no working structure converged (tried: {', '.join(self.attempts)})")


class InsufficientRiskSet(NumericalError):
    """Too few subjects contribute to a working-model fit."""

    def __init__(self, arm: Optional[int], step: str, count: int, required: int):
        self.arm = arm
        self.step = step
        self.count = count
        self.required = required
        arm_text = "both arms" if arm is None else f"arm {arm}"
        super().__init__(
            f"{step} fit for {arm_text} has {count} contributing subjects, needs {required}"
        )


class TooManyFailures(NumericalError):
    """Too many bootstrap or jackknife replicates failed."""

    def __init__(self, failed: int, total: int):
        self.failed = failed
        self.total = total
        super().__init__(f"{failed} of {total} replicates failed")


class DegenerateReplicates(NumericalError):
    """All bootstrap replicates are identical."""


class CalibrationOutOfRange(NumericalError):
    """A dropout target cannot be reached by the hazard model."""

    def __init__(self, arm: int, visit: int, target: float, reachable: tuple):
        self.arm = arm
        self.visit = visit
        self.target = target
        self.reachable = reachable
        super().__init__(
            f"dropout target {target:.4f} at visit {visit} in arm {arm} is outside "
            f"the reachable range [{reachable[0]:.4f}, {reachable[1]:.4f}]"
        )
