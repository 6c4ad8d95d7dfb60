from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fieldcal.adacalib import AdaCalibModel, TrainConfig
from fieldcal.data import FieldSpec, RateCurve, SyntheticSpec, generate_synthetic

CURVE = RateCurve("logit_normal", {"mean": -1.5, "std": 1.0})


def biased_data(seed=0, counts=(2000, 2000, 2000), biases=(2.0, 0.5, 1.0), noise_std=0.2, feature_dim=0):
    fields = tuple(FieldSpec(f"z{i + 1}", n, CURVE, b) for i, (n, b) in enumerate(zip(counts, biases)))
    return generate_synthetic(SyntheticSpec(fields, noise_seed=seed, noise_std=noise_std, feature_dim=feature_dim))


@pytest.fixture(scope="session")
def small_data():
    return biased_data(0)[0]


@pytest.fixture(scope="session")
def fitted_model(small_data):
    """A model trained with default settings, shared by read-only tests."""
    return AdaCalibModel(TrainConfig(seed=0)).fit(small_data)


@pytest.fixture(scope="session")
def fitted_noaux(small_data):
    return AdaCalibModel(TrainConfig(seed=1, aux_enabled=False)).fit(small_data)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one (criterion, passed, detail) entry per acceptance test, echoed in the terminal summary
ACCEPTANCE_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
