# -*- coding: utf-8 -*-

import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest

from cfdglib.envsuite import POINTMASS, make_env
from cfdglib.rlcore import AgentConfig, init_agent


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pointmass():
    return make_env(POINTMASS)


@pytest.fixture
def small_agent_config():
    return AgentConfig(hidden_width=16, hidden_depth=2)


@pytest.fixture
def small_agent(pointmass, small_agent_config):
    return init_agent(pointmass.state_dim, pointmass.action_dim, small_agent_config, np.random.default_rng(7))
