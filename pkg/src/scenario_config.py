"""
Scenario configuration files.

A scenario file is INI-style text read with configparser. It names a
source population, the outcome kinds to study, effect profiles and dropout
mechanisms; every (outcome, effect, dropout) combination becomes one
simulated scenario. Layout (schema_version 1):

    [scenario]      name, schema_version, n, outcomes, effects, dropouts,
                    replicates, boot_B, seed, level, estimators.<outcome>
    [source]        kind = synthetic | file, plus generator parameters or
                    path/layout/baseline_column, responder_threshold
    [effect.NAME]   kind = zero | beneficial, continuous = shifts,
                    binary = flip probabilities
    [dropout.NAME]  kind = none | mcar | mar, targets (mcar),
                    control/treated (mar), slope[.<outcome>]
    [calibration]   <outcome>.<effect>.<dropout>.<control|treated> = intercepts
"""

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from loguru import logger

from .data_model import OutcomeKind, load_csv, parse_schema_spec
from .errors import ConfigError, InputError
from .estimators import EstimatorSpec, default_estimators
from .simulation import (
    DropoutKind,
    DropoutMechanism,
    EffectProfile,
    GeneratorParams,
    Scenario,
    SourcePopulation,
    calibrate_mar_intercepts,
    synthesize_source,
)

SCHEMA_VERSION = 1
ARMS = ("control", "treated")


@dataclass(frozen=True)
class EffectSection:
    name: str
    continuous: EffectProfile
    binary: EffectProfile

    def for_outcome(self, outcome_kind: OutcomeKind) -> EffectProfile:
        return self.continuous if outcome_kind is OutcomeKind.CONTINUOUS else self.binary


@dataclass(frozen=True)
class DropoutSection:
    name: str
    mechanisms: Dict[OutcomeKind, DropoutMechanism]


@dataclass(frozen=True)
class SourceSection:
    kind: str
    seed: int = 0
    params: GeneratorParams = GeneratorParams()
    path: Optional[Path] = None
    layout: str = "wide"
    schema: Optional[str] = None
    baseline_column: Optional[str] = "hba1c_baseline"
    responder_threshold: float = 7.0


@dataclass(frozen=True)
class ScenarioFile:
    """Parsed and validated scenario configuration."""

    name: str
    path: Path
    n: int
    outcomes: Tuple[OutcomeKind, ...]
    effects: Tuple[EffectSection, ...]
    dropouts: Tuple[DropoutSection, ...]
    source: SourceSection
    replicates: int = 1000
    boot_B: int = 1000
    seed: int = 0
    level: float = 0.95
    estimators: Dict[OutcomeKind, Tuple[EstimatorSpec, ...]] = field(default_factory=dict)
    calibration: Dict[str, Tuple[float, ...]] = field(default_factory=dict)
    calibration_seed: int = 0

    def combinations(self) -> List[Tuple[OutcomeKind, EffectSection, DropoutSection]]:
        return [(o, e, d) for o in self.outcomes for e in self.effects for d in self.dropouts]

    def estimators_for(self, outcome_kind: OutcomeKind) -> Tuple[EstimatorSpec, ...]:
        return self.estimators.get(outcome_kind) or default_estimators(outcome_kind)

    def load_source(self) -> SourcePopulation:
        """Continuous-outcome source population."""
        source = self.source
        if source.kind == "synthetic":
            population = synthesize_source(source.params, source.seed)
        else:
            assert source.path is not None
            schema = parse_schema_spec(source.schema) if source.schema else None
            ds = load_csv(source.path, schema=schema, layout=source.layout, outcome_kind=OutcomeKind.CONTINUOUS)
            population = SourcePopulation.from_dataset(
                ds, source.baseline_column, source.responder_threshold,
                provenance={"kind": "file", "path": str(source.path)},
            )
        return SourcePopulation(
            dataset=population.dataset,
            provenance=population.provenance,
            baseline_column=population.baseline_column,
            threshold=source.responder_threshold,
        )

    def scenario_names(self) -> List[str]:
        return [f"{o.value}/{e.name}/{d.name}" for o, e, d in self.combinations()]

    def build_scenarios(self, calibrate_missing: bool = True, only: Optional[str] = None) -> List[Scenario]:
        """
        Materialize every (outcome, effect, dropout) combination, or just the
        one named by `only`.

        MAR intercepts come from the [calibration] section; missing entries
        are calibrated on the fly when calibrate_missing is set.

        Raises:
            ConfigError: If `only` names no combination
        """
        if only is not None and only not in self.scenario_names():
            raise ConfigError(f"unknown scenario {only!r} (known: {', '.join(self.scenario_names())})")
        continuous = self.load_source()
        sources = {OutcomeKind.CONTINUOUS: continuous}
        if OutcomeKind.BINARY in self.outcomes:
            sources[OutcomeKind.BINARY] = continuous.to_binary()
        scenarios = []
        for outcome, effect_section, dropout_section in self.combinations():
            source = sources[outcome]
            effect = effect_section.for_outcome(outcome)
            dropout = dropout_section.mechanisms[outcome]
            name = f"{outcome.value}/{effect_section.name}/{dropout_section.name}"
            if only is not None and name != only:
                continue
            if dropout.kind is DropoutKind.MAR and dropout.intercepts is None:
                key = calibration_key(outcome, effect_section.name, dropout_section.name)
                stored = [self.calibration.get(f"{key}.{arm}") for arm in ARMS]
                if all(row is not None for row in stored):
                    dropout = dropout.with_intercepts(stored)
                elif calibrate_missing:
                    logger.warning(f"No stored MAR calibration for {name}; calibrating now")
                    dropout = dropout.with_intercepts(
                        calibrate_mar_intercepts(source, effect, dropout, seed=self.calibration_seed)
                    )
            scenarios.append(Scenario(name=name, source=source, n=self.n, effect=effect, dropout=dropout))
        return scenarios


def calibration_key(outcome: OutcomeKind, effect: str, dropout: str) -> str:
    return f"{outcome.value}.{effect}.{dropout}"


# --- parsing helpers -------------------------------------------------------------


def _text(section: configparser.SectionProxy, key: str, default: Optional[str] = None) -> str:
    value = section.get(key, fallback=default)
    if value is None or value.strip() == "":
        raise ConfigError("required value is missing", section.name, key)
    return value.strip()


def _int(section: configparser.SectionProxy, key: str, default: Optional[int] = None) -> int:
    raw = section.get(key, fallback=None)
    if raw is None:
        if default is None:
            raise ConfigError("required value is missing", section.name, key)
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", section.name, key) from None


def _float(section: configparser.SectionProxy, key: str, default: Optional[float] = None) -> float:
    raw = section.get(key, fallback=None)
    if raw is None:
        if default is None:
            raise ConfigError("required value is missing", section.name, key)
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}", section.name, key) from None


def _list(section: configparser.SectionProxy, key: str, default: Optional[Sequence[str]] = None) -> Tuple[str, ...]:
    raw = section.get(key, fallback=None)
    if raw is None:
        if default is None:
            raise ConfigError("required value is missing", section.name, key)
        return tuple(default)
    return tuple(item.strip() for item in raw.split(",") if item.strip())


def _floats(section: configparser.SectionProxy, key: str, default: Optional[Sequence[float]] = None) -> Tuple[float, ...]:
    raw = section.get(key, fallback=None)
    if raw is None:
        if default is None:
            raise ConfigError("required value is missing", section.name, key)
        return tuple(default)
    try:
        return tuple(float(item) for item in raw.split(",") if item.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {raw!r}", section.name, key) from None


def _section(parser: configparser.ConfigParser, name: str) -> configparser.SectionProxy:
    if not parser.has_section(name):
        raise ConfigError(f"section [{name}] is missing")
    return parser[name]


def _parse_source(parser: configparser.ConfigParser, base: Path) -> SourceSection:
    section = _section(parser, "source")
    kind = _text(section, "kind", "synthetic")
    threshold = _float(section, "responder_threshold", 7.0)
    if kind == "file":
        path = Path(_text(section, "path"))
        if not path.is_absolute():
            path = base / path
        layout = _text(section, "layout", "wide")
        if layout not in ("wide", "long"):
            raise ConfigError(f"unknown layout {layout!r}", "source", "layout")
        baseline = section.get("baseline_column", fallback=None)
        return SourceSection(
            kind="file", path=path, layout=layout, schema=section.get("schema", fallback=None),
            baseline_column=baseline.strip() if baseline else None, responder_threshold=threshold,
        )
    if kind != "synthetic":
        raise ConfigError(f"unknown source kind {kind!r} (synthetic or file)", "source", "kind")

    known = {spec.name for spec in fields(GeneratorParams)} | {"kind", "seed", "responder_threshold"}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown generator parameter {unknown[0]!r}", "source", unknown[0])
    defaults = GeneratorParams()
    values = {}
    for spec in fields(GeneratorParams):
        if spec.name not in section:
            continue
        default = getattr(defaults, spec.name)
        if spec.name == "visit_labels":
            values[spec.name] = _list(section, spec.name)
        elif spec.name == "covariate_correlation":
            flat = _floats(section, spec.name)
            if len(flat) != 16:
                raise ConfigError("expected 16 entries (a 4 x 4 matrix)", "source", spec.name)
            values[spec.name] = tuple(tuple(flat[i * 4:(i + 1) * 4]) for i in range(4))
        elif isinstance(default, tuple):
            values[spec.name] = _floats(section, spec.name)
        elif isinstance(default, int):
            values[spec.name] = _int(section, spec.name)
        else:
            values[spec.name] = _float(section, spec.name)
    params = GeneratorParams(**values)
    try:
        params.validate()
    except InputError as exc:
        raise ConfigError(str(exc), "source") from None
    return SourceSection(kind="synthetic", seed=_int(section, "seed", 0), params=params,
                         responder_threshold=threshold)


def _parse_effect(parser: configparser.ConfigParser, name: str) -> EffectSection:
    section = _section(parser, f"effect.{name}")
    kind = _text(section, "kind", "beneficial")
    if kind == "zero":
        return EffectSection(name, EffectProfile.zero(), EffectProfile.zero())
    if kind != "beneficial":
        raise ConfigError(f"unknown effect kind {kind!r} (zero or beneficial)", section.name, "kind")
    try:
        continuous = EffectProfile.continuous(_floats(section, "continuous", (1.0, 1.5, 2.0)))
        binary = EffectProfile.binary(_floats(section, "binary", (0.2, 0.25, 0.3)))
    except InputError as exc:
        raise ConfigError(str(exc), section.name) from None
    return EffectSection(name, continuous, binary)


def _parse_dropout(parser: configparser.ConfigParser, name: str, outcomes: Sequence[OutcomeKind]) -> DropoutSection:
    section = _section(parser, f"dropout.{name}")
    kind = _text(section, "kind")
    mechanisms = {}
    try:
        for outcome in outcomes:
            if kind == "none":
                mechanisms[outcome] = DropoutMechanism.none()
            elif kind == "mcar":
                mechanisms[outcome] = DropoutMechanism.mcar(_floats(section, "targets"))
            elif kind == "mar":
                slope = _float(section, f"slope.{outcome.value}", _float(section, "slope", 0.5))
                mechanisms[outcome] = DropoutMechanism.mar(
                    _floats(section, "control"), _floats(section, "treated"), slope=slope
                )
            else:
                raise ConfigError(f"unknown dropout kind {kind!r} (none, mcar or mar)", section.name, "kind")
    except ConfigError:
        raise
    except InputError as exc:
        raise ConfigError(str(exc), section.name) from None
    return DropoutSection(name, mechanisms)


def load_scenario_file(path: Union[str, Path]) -> ScenarioFile:
    """
    Read and validate a scenario file.

    Raises:
        ConfigError: Naming the offending section and field (or line)
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}") from None
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        where = f" (line {line})" if line else ""
        raise ConfigError(f"cannot parse {path}{where}: {exc.message}") from None

    scenario = _section(parser, "scenario")
    version = _int(scenario, "schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})",
                          "scenario", "schema_version")
    try:
        outcomes = tuple(OutcomeKind(o) for o in _list(scenario, "outcomes", ("continuous",)))
    except ValueError as exc:
        raise ConfigError(str(exc), "scenario", "outcomes") from None

    n = _int(scenario, "n", 380)
    replicates = _int(scenario, "replicates", 1000)
    boot_B = _int(scenario, "boot_B", 1000)
    level = _float(scenario, "level", 0.95)
    if n < 1:
        raise ConfigError("trial size must be positive", "scenario", "n")
    if replicates < 0:
        raise ConfigError("replicates must be non-negative", "scenario", "replicates")
    if boot_B < 0:
        raise ConfigError("boot_B must be non-negative", "scenario", "boot_B")
    if not 0.0 < level < 1.0:
        raise ConfigError("level must lie in (0, 1)", "scenario", "level")

    estimators = {}
    for outcome in outcomes:
        key = f"estimators.{outcome.value}"
        if key in scenario:
            try:
                specs = tuple(EstimatorSpec(name) for name in _list(scenario, key))
            except InputError as exc:
                raise ConfigError(str(exc), "scenario", key) from None
            for spec in specs:
                if not spec.supports(outcome):
                    raise ConfigError(f"{spec.name} does not support {outcome.value} outcomes", "scenario", key)
            estimators[outcome] = specs

    source = _parse_source(parser, path.parent)
    if source.kind == "file" and OutcomeKind.BINARY in outcomes and source.baseline_column is None:
        raise ConfigError("binary outcomes need a baseline column", "source", "baseline_column")
    effects = tuple(_parse_effect(parser, name) for name in _list(scenario, "effects"))
    dropouts = tuple(_parse_dropout(parser, name, outcomes) for name in _list(scenario, "dropouts"))

    calibration: Dict[str, Tuple[float, ...]] = {}
    calibration_seed = _int(scenario, "seed", 0)
    if parser.has_section("calibration"):
        section = parser["calibration"]
        calibration_seed = _int(section, "seed", calibration_seed)
        for key in section:
            if key != "seed":
                calibration[key] = _floats(section, key)

    config = ScenarioFile(
        name=_text(scenario, "name", path.stem),
        path=path,
        n=n,
        outcomes=outcomes,
        effects=effects,
        dropouts=dropouts,
        source=source,
        replicates=replicates,
        boot_B=boot_B,
        seed=_int(scenario, "seed", 0),
        level=level,
        estimators=estimators,
        calibration=calibration,
        calibration_seed=calibration_seed,
    )
    logger.debug(f"Loaded scenario file {path}: {len(config.combinations())} combinations")
    return config


def render_calibration(config: ScenarioFile) -> str:
    """Calibrate every MAR combination and render a [calibration] section."""
    lines = ["[calibration]", f"seed = {config.calibration_seed}"]
    continuous = config.load_source()
    sources = {OutcomeKind.CONTINUOUS: continuous}
    if OutcomeKind.BINARY in config.outcomes:
        sources[OutcomeKind.BINARY] = continuous.to_binary()
    for outcome, effect_section, dropout_section in config.combinations():
        dropout = dropout_section.mechanisms[outcome]
        if dropout.kind is not DropoutKind.MAR:
            continue
        rows = calibrate_mar_intercepts(
            sources[outcome], effect_section.for_outcome(outcome), dropout, seed=config.calibration_seed
        )
        key = calibration_key(outcome, effect_section.name, dropout_section.name)
        for arm, row in zip(ARMS, rows):
            lines.append(f"{key}.{arm} = " + ", ".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"
