"""Unit tests for stress testing and failure-mode comparison"""
import numpy as np
import pytest

from scopfsampler.exceptions import ReportMismatchError
from scopfsampler.severity import PenaltyParams, PriorParams
from scopfsampler.stresstest import (
    QUANTILE_LEVELS,
    StressReport,
    failure_mode_comparison,
    impaired_lines,
    outage_count,
    sample_contingencies,
    severity_histogram,
    stress_test,
)

def make_report(histogram, samples=100, seed=0):
    failures = sum(histogram.values())
    return StressReport(
        samples=samples, seed=seed, failures=failures,
        failure_rate=failures / samples, outage_histogram=histogram,
    )

def test_outage_count():
    """Test the impairment threshold sigma(y) < 0.9"""
    assert outage_count(np.full(5, 10.0)) == 0
    y = np.full(5, 10.0)
    y[2] = -5.0
    assert outage_count(y) == 1
    assert outage_count([2.0]) == 1
    assert outage_count([2.3]) == 0
    with pytest.raises(ValueError):
        outage_count([0.0], threshold=1.0)

def test_impaired_lines_labels(toy):
    labels = impaired_lines(toy, [10.0, -5.0, 10.0])
    assert labels == ["1-3@0.007"]

def test_degenerate_prior_on_feasible_dispatch(toy, toy_dispatch):
    """Test that a prior concentrated on intact lines produces no failures"""
    prior = PriorParams(mu0=10.0, sigma0=1e-9)
    report = stress_test(toy, toy_dispatch, 50, prior=prior, seed=3, threads=1)
    assert report.failures == 0
    assert report.failure_rate == 0.0
    assert report.outage_histogram == {}
    assert len(report.severity_quantiles) == len(QUANTILE_LEVELS)
    assert report.severity_quantiles[0] == pytest.approx(report.severity_quantiles[-1], rel=1e-9)

def test_stress_test_is_deterministic(toy, toy_dispatch):
    """Test that the same seed gives the same report, threads or not"""
    first = stress_test(toy, toy_dispatch, 40, seed=8, threads=1)
    second = stress_test(toy, toy_dispatch, 40, seed=8, threads=3)
    assert first.model_dump() == second.model_dump()
    assert first.sample_rows() == second.sample_rows()

def test_failures_are_binned_by_outage_count(toy, toy_dispatch):
    report = stress_test(toy, toy_dispatch, 200, prior=PriorParams(mu0=0.5), seed=1, threads=1)
    assert sum(report.outage_histogram.values()) == report.failures
    assert report.failures == sum(r.failed for r in report.records)
    assert report.failure_rate == pytest.approx(report.failures / 200)

def test_failure_classification_ignores_the_penalty_weight(toy, toy_dispatch):
    """Test that the same draws fail under L = 1 and L = 1000; only severities scale"""
    prior = PriorParams(mu0=-3.0)
    light = stress_test(toy, toy_dispatch, 100, prior=prior, penalty=PenaltyParams(L=1.0), seed=5, threads=1)
    heavy = stress_test(toy, toy_dispatch, 100, prior=prior, penalty=PenaltyParams(L=1000.0), seed=5, threads=1)
    assert light.failures > 0
    assert [r.failed for r in light.records] == [r.failed for r in heavy.records]
    assert light.outage_histogram == heavy.outage_histogram
    assert light.failure_rate == heavy.failure_rate
    assert max(r.severity for r in heavy.records) > max(r.severity for r in light.records)

def test_coverage_exceedance_uses_strict_comparison(toy, toy_dispatch):
    """Test coverage against a predicted set taken from the stress draws themselves"""
    prior = PriorParams()
    draws = sample_contingencies(toy.n_branches, 30, prior, seed=2)
    report = stress_test(toy, toy_dispatch, 30, prior=prior, predicted=draws, seed=2, threads=1)
    assert report.coverage_exceedance == 0.0
    assert report.predicted_max_severity == pytest.approx(max(r.severity for r in report.records))

    weakest = min(report.records, key=lambda r: r.severity)
    report = stress_test(toy, toy_dispatch, 30, prior=prior, predicted=[draws[weakest.sample]], seed=2, threads=1)
    strictly_worse = sum(r.severity > weakest.severity for r in report.records)
    assert report.coverage_exceedance == pytest.approx(strictly_worse / 30)

def test_quantiles_follow_linear_interpolation(toy, toy_dispatch):
    report = stress_test(toy, toy_dispatch, 25, seed=6, threads=1)
    severities = np.array([r.severity for r in report.records])
    np.testing.assert_allclose(report.severity_quantiles, np.quantile(severities, QUANTILE_LEVELS))

def test_report_json_excludes_records(toy, toy_dispatch):
    report = stress_test(toy, toy_dispatch, 5, seed=0, threads=1)
    data = report.model_dump(mode="json")
    assert "records" not in data
    assert data["schema_version"] == "1.0"
    assert StressReport.model_validate(data).failures == report.failures

def test_severity_histogram_counts_every_sample(toy, toy_dispatch):
    report = stress_test(toy, toy_dispatch, 20, seed=4, threads=1)
    rows = severity_histogram(report, bins=5)
    assert len(rows) == 5
    assert sum(count for _, _, count in rows) == 20

def test_sample_count_must_be_positive(toy, toy_dispatch):
    with pytest.raises(ValueError):
        stress_test(toy, toy_dispatch, 0)

def test_identical_reports_compare_to_one():
    report = make_report({1: 4, 2: 6})
    rows = failure_mode_comparison(report, report)
    assert [row.ratio for row in rows] == [1.0, 1.0]
    assert not any(row.undefined for row in rows)

def test_zero_denominator_is_flagged():
    rows = failure_mode_comparison(make_report({1: 3, 2: 1}), make_report({}))
    assert all(row.undefined and row.ratio is None for row in rows)
    assert [row.failures_a for row in rows] == [3, 1]

def test_ratio_direction():
    rows = failure_mode_comparison(make_report({1: 9}), make_report({1: 3}))
    assert rows[0].ratio == pytest.approx(3.0)

@pytest.mark.parametrize("other", [make_report({}, samples=50), make_report({}, seed=1)])
def test_mismatched_reports_are_rejected(other):
    with pytest.raises(ReportMismatchError) as exc_info:
        failure_mode_comparison(make_report({}), other)
    assert exc_info.value.exit_code == 2
