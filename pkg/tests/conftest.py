import time

import numpy as np
import pytest

from nmfrisk.cohort import filter_min_support, split_train_validation
from nmfrisk.divergence import divergence_table
from nmfrisk.rwc import rwc_ensemble
from nmfrisk.scoring import ReferenceDistribution, feature_coefficients, normalize_score, raw_scores
from nmfrisk.synth import STANDARD_CONFIG, generate

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class StandardRun:
    """Standard synthetic cohort pushed through selection and scoring once."""

    def __init__(self, seed=0):
        t = time.perf_counter()
        self.diagnosed, self.undiagnosed, self.truth = generate(STANDARD_CONFIG)
        filtered = filter_min_support(self.diagnosed, 5)
        self.split = split_train_validation(filtered, 20, seed)
        self.train = self.split.training
        self.weights = rwc_ensemble(self.train, STANDARD_CONFIG.n_components, 40, seed)
        self.divs = divergence_table(self.diagnosed, self.undiagnosed, self.weights.selected_codes())
        coef = feature_coefficients(self.weights, self.divs)
        self.train_scores = normalize_score(raw_scores(self.train, self.divs.covariates, coef))
        self.undiag_scores = normalize_score(raw_scores(self.undiagnosed, self.divs.covariates, coef))
        self.reference = ReferenceDistribution(self.train_scores)
        self.build_seconds = time.perf_counter() - t


@pytest.fixture(scope="session")
def standard_run():
    return StandardRun()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
