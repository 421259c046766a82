"""End-to-end comparison of SMC and adversarial optimization on the 14-bus case.

These runs spend tens of thousands of power-flow solves each; select them with
``pytest -m slow``.
"""
import numpy as np
import pytest
from scipy.special import expit

from scopfsampler.scopf import SmcConfig, adversarial_opt, predict_contingencies, smc_scopf
from scopfsampler.stresstest import failure_mode_comparison, stress_test

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
SAMPLES = 10_000

def desk_config(seed: int) -> SmcConfig:
    return SmcConfig(n_x=10, n_y=10, N=10, K=30, seed=seed)

def branch_index(network, label: str) -> int:
    return next(k for k in range(network.n_branches) if network.branch_label(k) == label)

@pytest.fixture(scope="module")
def runs(case14):
    """SMC and baseline results per seed, each stress tested against the same prior draws"""
    outcomes = {}
    for seed in SEEDS:
        config = desk_config(seed)
        smc = smc_scopf(case14, config)
        baseline = adversarial_opt(case14, config)
        outcomes[seed] = {
            "smc": smc,
            "baseline": baseline,
            "smc_stress": stress_test(case14, smc.best_dispatch, SAMPLES, predicted=smc.contingencies, seed=seed),
            "baseline_stress": stress_test(
                case14, baseline.best_dispatch, SAMPLES, predicted=baseline.contingencies, seed=seed
            ),
        }
    return outcomes

def test_equal_solve_budgets(runs):
    for seed in SEEDS:
        assert runs[seed]["smc"].solves == runs[seed]["baseline"].solves == 62_100

def test_baseline_coverage_is_poor(runs):
    """Test that the optimized contingency set misses a visible share of prior samples"""
    for seed in SEEDS:
        assert runs[seed]["baseline_stress"].coverage_exceedance > 0.01

def test_smc_coverage_beats_baseline(runs):
    better = [
        runs[seed]["smc_stress"].coverage_exceedance < runs[seed]["baseline_stress"].coverage_exceedance
        for seed in SEEDS
    ]
    tight = [runs[seed]["smc_stress"].coverage_exceedance < 0.005 for seed in SEEDS]
    assert all(better)
    assert sum(tight) >= 2

def test_smc_failure_rate_beats_baseline(runs):
    for seed in SEEDS:
        assert runs[seed]["smc_stress"].failure_rate < runs[seed]["baseline_stress"].failure_rate

def test_worst_predicted_contingency_cuts_the_condenser_line(runs, case14):
    """Test that SMC's riskiest contingency removes the line feeding bus 8"""
    k = branch_index(case14, "7-8")
    hits = 0
    for seed in SEEDS:
        smc = runs[seed]["smc"]
        hits += expit(smc.contingencies[smc.worst_index][k]) < 0.1
    assert hits >= 2

def test_baseline_contingencies_collapse(runs):
    """Test that descent drives every attacker to nearly the same severity"""
    for seed in SEEDS:
        severities = np.array([report.severity for report in runs[seed]["baseline"].reports])
        assert np.ptp(severities) / np.mean(severities) < 0.05

def test_contingency_chains_keep_moving(runs):
    """Test that the adapted steps keep the contingency population mixing after the first round"""
    for seed in SEEDS:
        history = runs[seed]["smc"].history
        assert all(summary.accept_rate_y > 0.1 for summary in history[1:])

def test_failure_modes_favor_smc(runs):
    for seed in SEEDS:
        rows = failure_mode_comparison(runs[seed]["baseline_stress"], runs[seed]["smc_stress"])
        by_count = {row.outage_count: row for row in rows}
        for count in (1, 2, 3):
            row = by_count.get(count)
            if row is None:
                continue
            # undefined: SMC has no failures at this count
            assert row.undefined or row.ratio > 1.0

def test_prediction_finds_the_condenser_line(case14, case14_dispatch):
    k = branch_index(case14, "7-8")
    hits = 0
    for seed in range(10):
        prediction = predict_contingencies(case14, case14_dispatch, n_y=10, K=30, seed=seed)
        assert prediction.chains.acceptance_rate > 0.1
        hits += expit(prediction.contingencies[0][k]) < 0.1
    assert hits > 5
