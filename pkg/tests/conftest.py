"""Shared fixtures and the acceptance-summary reporting hook."""

import numpy as np
import pytest

from oslsel.drm_core import BasisSpec, OslsDataset

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"[criterion {number:2d}] {status} - {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


def make_gaussian_instance(
    seed: int = 7,
    n_per_class: int = 150,
    m: int = 300,
    pi_true=(0.3, 0.25),
) -> OslsDataset:
    """Two trained 2-d Gaussian classes plus a novel third in the test mix."""
    rng = np.random.default_rng(seed)
    mu = {0: np.array([0.0, 0.0]), 1: np.array([1.0, 0.0]), 2: np.array([0.0, 1.0])}
    train_x = np.vstack(
        [rng.normal(mu[0], 1, (n_per_class, 2)), rng.normal(mu[1], 1, (n_per_class, 2))]
    )
    train_y = np.concatenate([np.zeros(n_per_class, int), np.ones(n_per_class, int)])
    pi_true = np.asarray(pi_true)
    comps = rng.choice([0, 1, 2], size=m, p=[1 - pi_true.sum(), *pi_true])
    test_x = np.vstack([rng.normal(mu[c], 1, 2) for c in comps])
    return OslsDataset(train_x, train_y, test_x, k_known=2)


@pytest.fixture(scope="session")
def gaussian_instance() -> OslsDataset:
    return make_gaussian_instance()


@pytest.fixture(scope="session")
def gaussian_fit(gaussian_instance):
    from oslsel.em_estimator import EmConfig, fit

    return fit(
        gaussian_instance,
        BasisSpec.identity(2),
        EmConfig(n_starts=3, tol=1e-9, max_iter=4000, seed=0),
    )
