"""
Shared dataset builders for the test suite.
"""

from typing import Callable

import numpy as np
import pytest


def build_trial(
    n: int = 200,
    k: int = 3,
    seed: int = 0,
    outcome_kind: str = "continuous",
    covariates: bool = True,
    dropout: float = 0.0,
    effect: float = 0.5,
):
    """
    Small synthetic trial.

    Outcomes depend on age, sex and arm with AR(1)-style visit noise;
    dropout is MCAR with the given per-visit hazard (monotone).
    """
    from src.data_model import CovariateSpec, TrialDataset

    rng = np.random.default_rng(seed)
    arms = rng.integers(0, 2, size=n)
    arms[:2] = (0, 1)
    age = rng.normal(50.0, 10.0, size=n)
    sex = rng.integers(0, 2, size=n).astype(np.float64)
    noise = np.empty((n, k))
    noise[:, 0] = rng.normal(size=n)
    for t in range(1, k):
        noise[:, t] = 0.6 * noise[:, t - 1] + 0.8 * rng.normal(size=n)
    signal = 0.04 * (age - 50.0)[:, None] + 0.5 * sex[:, None] if covariates else np.zeros((n, 1))
    trend = effect * arms[:, None] * (np.arange(1, k + 1) / k)[None, :]
    latent = signal + trend + noise
    if outcome_kind == "binary":
        outcomes = (latent > 0.2).astype(np.float64)
    else:
        outcomes = latent

    if dropout > 0:
        hazards = rng.random((n, k)) < dropout
        hazards[:4] = False
        observed = np.cumprod(~hazards, axis=1).astype(bool)
        outcomes = np.where(observed, outcomes, np.nan)

    if covariates:
        schema = (CovariateSpec("age", "continuous"), CovariateSpec("sex", "binary"))
        baseline = np.column_stack([age, sex])
    else:
        schema = ()
        baseline = np.empty((n, 0))
    return TrialDataset(
        subject_ids=tuple(f"P{i:04d}" for i in range(n)),
        arms=arms,
        baseline=baseline,
        outcomes=outcomes,
        outcome_kind=outcome_kind,
        visit_labels=tuple(str(4 * (t + 1)) for t in range(k)),
        schema=schema,
    )


@pytest.fixture
def trial_factory() -> Callable:
    return build_trial


@pytest.fixture
def continuous_trial():
    return build_trial(n=200, k=3, seed=1, dropout=0.08)


@pytest.fixture
def binary_trial():
    return build_trial(n=300, k=3, seed=2, outcome_kind="binary", dropout=0.05)


@pytest.fixture
def small_scenario_file(tmp_path):
    """Scenario file with a small synthetic source and stored-free MAR dropout."""
    path = tmp_path / "small.cfg"
    path.write_text(
        """
[scenario]
schema_version = 1
name = small
n = 120
outcomes = continuous, binary
effects = zero, beneficial
dropouts = mcar, mar
replicates = 3
boot_B = 0
seed = 11

[source]
kind = synthetic
seed = 5
n_source = 150

[effect.zero]
kind = zero

[effect.beneficial]
kind = beneficial
continuous = 1.0, 1.5, 2.0
binary = 0.2, 0.25, 0.3

[dropout.mcar]
kind = mcar
targets = 0.05, 0.10, 0.15

[dropout.mar]
kind = mar
control = 0.10, 0.15, 0.20
treated = 0.05, 0.10, 0.15
slope.continuous = 0.5
slope.binary = -1.0
""",
        encoding="utf-8",
    )
    return path
