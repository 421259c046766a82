"""Shared fixtures: the 14-bus reference case and a small three-bus toy grid"""
from pathlib import Path

import pytest

from scopfsampler.netmodel import dispatch_box, load_case, nominal_dispatch, parse_case
from scopfsampler.powerflow import SolverOptions
from scopfsampler.severity import PenaltyParams, PriorParams, ScoringContext

ROOT = Path(__file__).resolve().parent.parent
CASE14_PATH = ROOT / "data" / "case14.m"
CASE57_PATH = ROOT / "data" / "case57.m"

TOY_CASE = """function mpc = toy3
mpc.version = '2';
mpc.baseMVA = 100;
%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
    1   3   0   0   0   0   1   1.0 0   0   1   1.1 0.9;
    2   2   0   0   0   0   1   1.0 0   0   1   1.1 0.9;
    3   1   50  20  0   0   1   1.0 0   0   1   1.1 0.9;
];
%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin
mpc.gen = [
    1   10  0   100 -100    1.0 100 1   200 0;
    2   40  0   100 -100    1.0 100 1   100 10;
];
mpc.branch = [
    1   2   0.01    0.1 0.02    0   0   0   0   0   1   -360    360;
    1   3   0.01    0.1 0.02    0   0   0   0   0   1   -360    360;
    2   3   0.01    0.1 0.02    0   0   0   0   0   1   -360    360;
];
mpc.gencost = [
    2   0   0   3   {c2}  {c1}  0;
    2   0   0   3   {c2}  {c1}  0;
];
"""

def toy_case_text(c2: float = 0.01, c1: float = 20.0) -> str:
    return TOY_CASE.format(c2=c2, c1=c1)

@pytest.fixture(scope="session")
def case14():
    return load_case(CASE14_PATH)

@pytest.fixture(scope="session")
def case57():
    return load_case(CASE57_PATH)

@pytest.fixture(scope="session")
def case14_box(case14):
    return dispatch_box(case14)

@pytest.fixture(scope="session")
def case14_dispatch(case14, case14_box):
    """Case-file setpoints moved strictly inside the box"""
    return case14_box.nudge_inside(nominal_dispatch(case14))

@pytest.fixture(scope="session")
def toy():
    return parse_case(toy_case_text())

@pytest.fixture(scope="session")
def toy_box(toy):
    return dispatch_box(toy)

@pytest.fixture(scope="session")
def toy_dispatch(toy, toy_box):
    return toy_box.nudge_inside(nominal_dispatch(toy))

@pytest.fixture(scope="session")
def make_toy():
    """Toy grid with chosen generator cost coefficients"""
    def make(c2: float = 0.01, c1: float = 20.0):
        return parse_case(toy_case_text(c2, c1))
    return make

@pytest.fixture
def toy_context(toy, toy_box):
    return ScoringContext(
        network=toy,
        box=toy_box,
        solver=SolverOptions(),
        penalty=PenaltyParams(),
        prior=PriorParams(),
    )

@pytest.fixture
def toy_case_file(tmp_path):
    path = tmp_path / "toy3.m"
    path.write_text(toy_case_text(), encoding="utf-8")
    return path
