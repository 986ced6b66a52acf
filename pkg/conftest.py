import os

import numpy as np
import pytest

from conetest.models.dataset import ColumnRoles, Dataset, IndividualData, load_csv
from conetest.models.mixed_model import CovarianceLayout, LmmSpec, ParamVector, simulate

ROOT = os.path.dirname(os.path.abspath(__file__))
DATA_DIR = os.path.join(ROOT, "data")
CONFIG_DIR = os.path.join(ROOT, "configs")


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture
def config_dir():
    return CONFIG_DIR


@pytest.fixture
def summary_path():
    def path(name):
        return os.path.join(DATA_DIR, "summaries", name)

    return path


@pytest.fixture(scope="session")
def orthodont():
    roles = ColumnRoles(
        group="Subject", response="distance", covariates=("age",), categorical={"Sex": "Male"}
    )
    return load_csv(os.path.join(DATA_DIR, "orthodont.csv"), roles)


@pytest.fixture
def slope_spec():
    """Correlated random intercept and slope on t"""
    return LmmSpec(("1", "t"), ("1", "t"), CovarianceLayout.full(2))


@pytest.fixture
def slope_theta():
    return ParamVector(np.array([5.0, 7.0]), (np.array([[0.64, 0.4], [0.4, 1.0]]),), 1.44)


def _time_design(n, timepoints):
    times = np.linspace(0.0, 1.0, timepoints)
    individuals = [
        IndividualData(id=f"s{i + 1}", responses=np.zeros(timepoints), covariates=times)
        for i in range(n)
    ]
    return Dataset(individuals, ("t",))


@pytest.fixture(scope="session")
def simulated():
    """40 individuals with 6 time points from the correlated slope model"""
    spec = LmmSpec(("1", "t"), ("1", "t"), CovarianceLayout.full(2))
    theta = ParamVector(np.array([5.0, 7.0]), (np.array([[0.64, 0.4], [0.4, 1.0]]),), 1.44)
    return simulate(spec, theta, _time_design(40, 6), seed=11)


@pytest.fixture
def time_design():
    """Factory for designs with `timepoints` equally spaced times in [0, 1]"""
    return _time_design
