from __future__ import annotations

import warnings

import numpy as np
import pytest

from emeq.market import make_problem


@pytest.fixture(autouse=True)
def _quiet_growth_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*growth certificate.*")
        yield


@pytest.fixture
def merton_spec():
    return make_problem(
        {
            "family": "RDUT",
            "mu": 0.2,
            "sigma": 0.3,
            "alpha": 1.0,
            "w": "identity",
            "T": 1,
            "n_steps": 200,
            "seed": 7,
        }
    )


@pytest.fixture
def mv_spec():
    return make_problem(
        {
            "family": "NonlinearExpectation",
            "instance": "mean_variance",
            "mu": 0.2,
            "sigma": 0.3,
            "gamma": 1.0,
            "T": 1,
            "n_steps": 200,
        }
    )


@pytest.fixture
def mes_spec():
    return make_problem(
        {
            "family": "MeanES",
            "mu": 0.2,
            "sigma": 0.3,
            "gamma": 0.5,
            "alpha0": 0.05,
            "floor": 0,
            "T": 1,
            "n_steps": 200,
        }
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
