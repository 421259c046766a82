"""Unit tests for severity scoring, the prior and the population potentials"""
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import norm

from scopfsampler.exceptions import SingularJacobianError
from scopfsampler.netmodel import Dispatch, parse_case, to_unconstrained
from scopfsampler.powerflow import PowerFlowSolution, SolverOptions, solve_powerflow
from scopfsampler.severity import (
    DEFAULT_PRIOR_MEAN,
    PenaltyParams,
    PriorParams,
    ScoringContext,
    SeverityReport,
    contingency_potential,
    dispatch_potential,
    economic_cost,
    hinge_violation,
    log_prior,
    risk_adjusted_severity,
    severity,
)

ONE_GEN_CASE = """
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0 0 0 0 1 1 0 0 1 1.06 0.94;
    2 1 0 0 0 0 1 1 0 0 1 1.06 0.94;
];
mpc.gen = [1 0 0 100 -100 1.0 100 1 300 0];
mpc.branch = [1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360];
mpc.gencost = [2 0 0 3 {c2} {c1} {c0}];
"""

def solution_at(slack_p: float, vm=(1.0, 1.0), q_g=(0.0,), converged=True, residual=0.0):
    return PowerFlowSolution(
        v=np.array(vm, dtype=float),
        theta=np.zeros(len(vm)),
        q_g=np.array(q_g, dtype=float),
        slack_p=slack_p,
        slack_q=float(q_g[0]),
        residual_norm=residual,
        converged=converged,
        iterations=1,
        mismatch=np.array([residual]),
    )

def one_gen(c2, c1, c0):
    # costs are given per MW; divide so the per-unit coefficients are (c2, c1, c0)
    return parse_case(ONE_GEN_CASE.format(c2=c2 / 1e4, c1=c1 / 100, c0=c0))

@pytest.mark.parametrize("x, expected", [(5, 0.0), (12, 200.0), (-1, 100.0)])
def test_hinge_violation(x, expected):
    assert hinge_violation(x, 0, 10, 100) == pytest.approx(expected)

def test_hinge_violation_vectorized():
    np.testing.assert_allclose(hinge_violation(np.array([5.0, 12.0, -1.0]), 0, 10, 100), [0.0, 200.0, 100.0])

@pytest.mark.parametrize("cost, p, expected", [((0, 0, 5), 0.0, 5.0), ((1, 10, 0), 2.0, 24.0)])
def test_economic_cost(cost, p, expected):
    """Test the quadratic generation cost at the solved slack output"""
    network = one_gen(*cost)
    dispatch = Dispatch(p_g=[], v_g=[1.0])
    assert economic_cost(network, dispatch, solution_at(p)) == pytest.approx(expected)

def test_interior_point_scores_cost_only():
    """Test that S equals the economic cost when every limit holds"""
    network = one_gen(1, 10, 0)
    dispatch = Dispatch(p_g=[], v_g=[1.0])
    report = severity(network, dispatch, [10.0], solution_at(2.0))
    assert report.severity == report.economic_cost == pytest.approx(24.0)
    assert not report.violated
    assert report.log_prior is None

def test_low_voltage_contributes_hinge():
    """Test that |V| = 0.90 against [0.94, 1.06] adds L * 0.04"""
    network = one_gen(0, 0, 0)
    dispatch = Dispatch(p_g=[], v_g=[1.0])
    report = severity(network, dispatch, [10.0], solution_at(0.5, vm=(1.0, 0.90)))
    assert report.violations["bus_v:2"] == pytest.approx(4.0)
    assert report.severity == pytest.approx(4.0)
    assert set(report.violations) == {"gen_p:1#0", "gen_q:1#0", "bus_v:1", "bus_v:2", "residual"}

def test_nonconverged_adds_residual_penalty():
    network = one_gen(0, 0, 0)
    dispatch = Dispatch(p_g=[], v_g=[1.0])
    report = severity(network, dispatch, [10.0], solution_at(0.5, converged=False, residual=0.02),
                      PenaltyParams(L=100.0, L_res=50.0))
    assert report.violations["residual"] == pytest.approx(1.0)
    assert not report.converged

def test_slack_generator_limit_uses_solved_output():
    network = one_gen(0, 0, 0)
    dispatch = Dispatch(p_g=[], v_g=[1.0])
    report = severity(network, dispatch, [10.0], solution_at(3.5))
    # Pmax = 3.0 p.u.
    assert report.violations["gen_p:1#0"] == pytest.approx(50.0)

def test_log_prior_closed_forms():
    half_log_2pi = 0.5 * np.log(2 * np.pi)
    assert log_prior(np.full(20, DEFAULT_PRIOR_MEAN)) == pytest.approx(-20 * half_log_2pi, abs=1e-4)
    assert log_prior(np.full(20, DEFAULT_PRIOR_MEAN)) == pytest.approx(-18.3787, abs=1e-4)
    assert log_prior([DEFAULT_PRIOR_MEAN + 1.0]) == pytest.approx(-1.41894, abs=1e-5)

def test_default_prior_failure_probability():
    """Test that each line fails (y <= 0) with probability 5% under the default prior"""
    prior = PriorParams()
    assert norm.cdf(0.0, loc=prior.mu0, scale=prior.sigma0) == pytest.approx(0.05, abs=1e-4)

def test_per_line_prior_parameters():
    prior = PriorParams(mu0=(1.0, 2.0), sigma0=1.0)
    assert log_prior([1.0, 2.0], prior) == pytest.approx(2 * norm.logpdf(0.0))
    with pytest.raises(ValueError):
        prior.mean(3)
    with pytest.raises(ValueError):
        PriorParams(sigma0=0.0)

def test_risk_adjusted_severity():
    report = SeverityReport(economic_cost=100.0, violations={}, severity=100.0, converged=True)
    assert risk_adjusted_severity(report, -18.3787) == pytest.approx(81.6213)
    assert risk_adjusted_severity(report, 0.0) == 100.0
    assert risk_adjusted_severity(report, -1.0) > risk_adjusted_severity(report, -2.0)
    filled = report.with_prior(-2.0)
    assert filled.risk_adjusted == pytest.approx(98.0)
    assert filled.log_prior == -2.0

def test_dispatch_potential_of_one(toy_context, toy_dispatch):
    """Test U_x on small populations: one member, duplicates, permutations"""
    z = to_unconstrained(toy_dispatch, toy_context.box)
    y1 = np.array([2.0, 1.0, 3.0])
    y2 = np.array([0.5, 2.5, 1.5])
    single = dispatch_potential(toy_context, [y1], z)
    direct = severity(toy_context.network, toy_dispatch, y1, solve_powerflow(toy_context.network, toy_dispatch, y1))
    assert single == pytest.approx(direct.severity, rel=1e-9)
    assert dispatch_potential(toy_context, [y1, y1], z) == pytest.approx(single, rel=1e-12)
    assert dispatch_potential(toy_context, [y1, y2], z) == pytest.approx(
        dispatch_potential(toy_context, [y2, y1], z), rel=1e-12
    )

def test_dispatch_potential_counts_solves(toy_context, toy_dispatch):
    z = to_unconstrained(toy_dispatch, toy_context.box)
    population = [np.full(3, 2.0), np.full(3, 3.0), np.full(3, 4.0)]
    value, grad = dispatch_potential(toy_context, population, z, with_gradient=True)
    assert toy_context.counter.count == 3
    assert grad.shape == z.shape
    assert np.isfinite(value)

def test_contingency_potential_properties(toy_context, toy_dispatch, toy_box):
    """Test U_y on small populations: one member, growth, permutations"""
    y = np.array([1.0, 2.0, 0.5])
    other = replace(toy_dispatch, v_g=np.array([1.05, 0.95]))
    report = toy_context.score(toy_dispatch, y)
    assert contingency_potential(toy_context, [toy_dispatch], y) == pytest.approx(-report.risk_adjusted, rel=1e-12)
    grown = contingency_potential(toy_context, [toy_dispatch, other], y)
    assert grown >= contingency_potential(toy_context, [toy_dispatch], y)
    assert grown == pytest.approx(contingency_potential(toy_context, [other, toy_dispatch], y), rel=1e-12)

def test_contingency_potential_gradient(toy_context, toy_dispatch):
    """Test dU_y/dy against central differences"""
    y = np.array([1.0, 2.0, 0.5])
    _, grad = contingency_potential(toy_context, [toy_dispatch], y, with_gradient=True)
    h = 1e-5
    expected = [
        (contingency_potential(toy_context, [toy_dispatch], y + h * e)
         - contingency_potential(toy_context, [toy_dispatch], y - h * e)) / (2 * h)
        for e in np.eye(3)
    ]
    np.testing.assert_allclose(grad, expected, rtol=1e-4, atol=1e-4)

def test_empty_populations_are_rejected(toy_context, toy_dispatch):
    with pytest.raises(ValueError):
        dispatch_potential(toy_context, [], np.zeros(toy_context.box.dimension))
    with pytest.raises(ValueError):
        contingency_potential(toy_context, [], np.zeros(3))

def test_first_failing_member_stops_the_population(toy, toy_box, toy_dispatch):
    """Test that a solver error is raised before the remaining members are solved"""
    context = ScoringContext(network=toy, box=toy_box, solver=SolverOptions(jacobian_regularization=0.0))
    islanded = np.array([10.0, -1000.0, -1000.0])
    intact = np.full(3, 10.0)
    z = to_unconstrained(toy_dispatch, toy_box)
    with pytest.raises(SingularJacobianError):
        dispatch_potential(context, [islanded, intact, intact], z)
    assert context.counter.count == 1
    with pytest.raises(SingularJacobianError):
        contingency_potential(context, [toy_dispatch, toy_dispatch], islanded)
    assert context.counter.count == 2
