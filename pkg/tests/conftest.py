import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trial_adjust.glm import TrialData, WorkingModelSpec, build_design, fit_firth, fit_mle

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# filled in by tests/test_acceptance.py; one line per acceptance criterion
ACCEPTANCE_LINES = {}


def _criterion_order(key):
    match = re.search(r"(\d+)(\w*)", key)
    return (int(match.group(1)), match.group(2)) if match else (0, key)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=_criterion_order):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def random_trial(rng, n, q, k=2, link="logit", effect=0.5, scale=0.6):
    """Small random trial with at least two subjects per arm."""
    arm = np.concatenate([np.arange(1, k + 1).repeat(2), rng.integers(1, k + 1, n - 2 * k)])
    rng.shuffle(arm)
    w = rng.normal(size=(n, q))
    eta = -0.3 + effect * (arm - 1) + w @ np.full(q, scale / max(q, 1) ** 0.5)
    if link == "logit":
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    else:
        y = rng.poisson(np.exp(eta)).astype(float)
    return TrialData(y=y, arm=arm, w=w, k=k)


def fitted_pair(data, mode="pooled", covariates=None):
    design = build_design(data, WorkingModelSpec(mode=mode, covariates=covariates))
    return design, fit_mle(design, data.y), fit_firth(design, data.y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def separated_logit(rng, n=None):
    """Completely separated data on one standardised covariate.

    Sorted normal draws are split at a random cut, the upper part is shifted
    up by one unit and the result is standardised; outcomes are 1 above the
    cut.
    """
    n = n or int(rng.integers(6, 41))
    cut = int(rng.integers(2, n - 1))
    x = np.sort(rng.normal(size=n))
    x[cut:] += 1.0
    x = (x - x.mean()) / x.std()
    y = (np.arange(n) >= cut).astype(float)
    return x, y


# --- shared Monte-Carlo runs ----------------------------------------------------------

# replicate counts used by the acceptance suite; the second experiment runs in
# the permitted fast mode
EXPERIMENT_ONE_REPS = 10_000
EXPERIMENT_TWO_REPS = 2_000


def _run(name, reps):
    from trial_adjust.simulation import (
        default_threads, preset, run_experiment, summarize_experiment,
    )
    cfg = preset(name, reps=reps)
    records = run_experiment(cfg, threads=default_threads())
    return cfg, records, summarize_experiment(records, cfg)


@pytest.fixture(scope="session")
def experiment_one():
    """``(config, records, summary)`` for the pooled-model experiment."""
    return _run("experiment-1", EXPERIMENT_ONE_REPS)


@pytest.fixture(scope="session")
def experiment_two():
    """``(config, records, summary)`` for the stratified-model experiment."""
    return _run("experiment-2", EXPERIMENT_TWO_REPS)
