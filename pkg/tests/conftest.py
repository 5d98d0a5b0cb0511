"""Shared fixtures: the canonical scenario pipeline is built once per session."""
import sys
from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parents[1]
CANONICAL = REPO / "scenarios" / "canonical.toml"

from dhgmpc.scenario import (load_scenario, prepare_case, synthesize_terminal_pair,
                             make_controller)
from dhgmpc.simulation import run_closed_loop


@pytest.fixture(scope="session")
def canonical_scenario():
    return load_scenario(CANONICAL)


@pytest.fixture(scope="session")
def case(canonical_scenario):
    return prepare_case(canonical_scenario)


@pytest.fixture(scope="session")
def ingredients(case):
    return synthesize_terminal_pair(case)


def _run(case, ingredients, variant):
    mpc = case.scenario.mpc
    controller = make_controller(case, ingredients, variant)
    return run_closed_loop(case.plant, controller, case.initial_state(),
                           mpc.n_sim, mpc.k_step, mpc.dt_s,
                           case.steady_states["I"].d, case.steady_states["II"].d)


@pytest.fixture(scope="session")
def run_mpc1(case, ingredients):
    return _run(case, ingredients, "mpc1")


@pytest.fixture(scope="session")
def run_mpc1_repeat(case, ingredients):
    return _run(case, ingredients, "mpc1")


@pytest.fixture(scope="session")
def run_mpc2(case, ingredients):
    return _run(case, ingredients, "mpc2")
