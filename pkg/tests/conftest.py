import math

import numpy as np
import pytest

import conic
from model import Scenario


@pytest.fixture
def backend():
    return conic.make_backend('clarabel')


@pytest.fixture
def single_user():
    """Energy-limited single user: optimum 2 ln 3 nats at P = E_th / D1 = 2"""
    return Scenario(gains=(1.0,), deadlines=(2.0,), energy_budget=4.0, power_budget=3.0)


@pytest.fixture
def two_users():
    return Scenario(gains=(1.0, 0.5), deadlines=(1.0, 2.0), energy_budget=4.0, power_budget=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def closed_form_single_user(scenario):
    g, D1 = scenario.gains[0], scenario.deadlines[0]
    return D1 * math.log1p(g * min(scenario.power_budget, scenario.energy_budget / D1))
