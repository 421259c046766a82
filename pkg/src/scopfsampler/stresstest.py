"""Monte-Carlo stress testing of a dispatch against prior-sampled contingencies."""
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from scopfsampler.exceptions import ReportMismatchError, SolverError
from scopfsampler.netmodel import Dispatch, Network, dispatch_box
from scopfsampler.powerflow import ContingencyLike, SolverOptions
from scopfsampler.severity import PenaltyParams, PriorParams, ScoringContext
from scopfsampler.streams import Stream, stream_rng
from scopfsampler.utils import get_logger

logger = get_logger("scopfsampler.stresstest")

SCHEMA_VERSION = "1.0"
QUANTILE_LEVELS = (0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0)
DEFAULT_THRESHOLD = 0.9

def _y(contingency: ContingencyLike) -> np.ndarray:
    return np.asarray(getattr(contingency, "y", contingency), dtype=np.float64)

def outage_count(contingency: ContingencyLike, threshold: float = DEFAULT_THRESHOLD) -> int:
    """Lines carrying less than ``threshold`` of their rated admittance"""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return int(np.count_nonzero(expit(_y(contingency)) < threshold))

def impaired_lines(network: Network, contingency: ContingencyLike, threshold: float = DEFAULT_THRESHOLD) -> List[str]:
    """Labels ("from-to" bus ids) of the impaired lines, with their remaining strength"""
    strength = expit(_y(contingency))
    return [
        f"{network.branch_label(k)}@{strength[k]:.3f}"
        for k in np.flatnonzero(strength < threshold)
    ]

class SampleRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample: int
    outage_count: int
    severity: float
    failed: bool
    converged: bool
    reason: str = ""

SAMPLE_HEADER = ("sample", "outage_count", "severity", "failed", "converged")

class StressReport(BaseModel):
    """Aggregate of a stress test; per-sample records are kept in memory only"""
    model_config = ConfigDict(frozen=True)

    schema_version: str = SCHEMA_VERSION
    samples: int = Field(..., ge=1)
    seed: int
    failures: int = Field(..., ge=0)
    failure_rate: float = Field(..., ge=0.0, le=1.0)
    nonconverged: int = 0
    solver_errors: int = 0
    severity_quantiles: List[float] = Field(default_factory=list)
    outage_histogram: Dict[int, int] = Field(default_factory=dict)
    coverage_exceedance: Optional[float] = None
    predicted_max_severity: Optional[float] = None
    threshold: float = DEFAULT_THRESHOLD
    prior: PriorParams = Field(default_factory=PriorParams)
    records: List[SampleRecord] = Field(default_factory=list, exclude=True)

    def sample_rows(self) -> List[list]:
        return [
            [r.sample, r.outage_count, r.severity, int(r.failed), int(r.converged)]
            for r in self.records
        ]

def sample_contingencies(n_lines: int, samples: int, prior: PriorParams, seed: int) -> List[np.ndarray]:
    """The i.i.d. prior draws a stress test with this seed evaluates, in sample order"""
    return [prior.sample(n_lines, stream_rng(seed, chain=j, stream=Stream.STRESS)) for j in range(samples)]

def _evaluate_sample(context: ScoringContext, dispatch: Dispatch, j: int, y: np.ndarray, threshold: float) -> SampleRecord:
    outages = outage_count(y, threshold)
    try:
        report = context.score(dispatch, y)
    except SolverError as e:
        return SampleRecord(
            sample=j, outage_count=outages, severity=float("nan"),
            failed=True, converged=False, reason=f"solver-error: {e.detail}",
        )
    hinge = any(value > 0 for key, value in report.violations.items() if key != "residual")
    failed = hinge or not report.converged
    reason = "violation" if hinge else ("nonconverged" if not report.converged else "")
    return SampleRecord(
        sample=j, outage_count=outages, severity=report.severity,
        failed=failed, converged=report.converged, reason=reason,
    )

def stress_test(
    network: Network,
    dispatch: Dispatch,
    samples: int,
    prior: Optional[PriorParams] = None,
    predicted: Optional[Sequence[ContingencyLike]] = None,
    seed: int = 0,
    solver: Optional[SolverOptions] = None,
    penalty: Optional[PenaltyParams] = None,
    threshold: float = DEFAULT_THRESHOLD,
    threads: Optional[int] = None,
) -> StressReport:
    """Score ``samples`` prior contingencies against a fixed dispatch.

    A sample fails on any positive hinge violation or a non-converged solve;
    a solver error also counts as a failure but the sample is left out of
    the severity quantiles and the coverage statistic.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    prior = prior or PriorParams()
    context = ScoringContext(
        network=network,
        box=dispatch_box(network),
        solver=solver or SolverOptions(),
        penalty=penalty or PenaltyParams(),
        prior=prior,
    )
    draws = sample_contingencies(network.n_branches, samples, prior, seed)

    def evaluate(item: Tuple[int, np.ndarray]) -> SampleRecord:
        return _evaluate_sample(context, dispatch, item[0], item[1], threshold)

    logger.info(f"Stress testing with {samples} sampled contingencies (seed {seed})", extra={"phase": "stress"})
    if threads == 1:
        records = [evaluate(item) for item in enumerate(draws)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            records = list(executor.map(evaluate, enumerate(draws)))

    failures = sum(r.failed for r in records)
    nonconverged = sum(not r.converged and not r.reason.startswith("solver-error") for r in records)
    solver_errors = sum(r.reason.startswith("solver-error") for r in records)
    if nonconverged:
        logger.warning(f"{nonconverged} of {samples} sampled contingencies did not converge", extra={"phase": "stress"})
    if solver_errors:
        logger.warning(f"{solver_errors} of {samples} samples raised solver errors", extra={"phase": "stress"})

    histogram: Dict[int, int] = {}
    for r in records:
        if r.failed:
            histogram[r.outage_count] = histogram.get(r.outage_count, 0) + 1

    severities = np.array([r.severity for r in records if np.isfinite(r.severity)])
    quantiles = (
        np.quantile(severities, QUANTILE_LEVELS, method="linear").tolist() if severities.size else []
    )

    coverage = predicted_max = None
    if predicted is not None:
        if len(predicted) == 0:
            raise ValueError("predicted contingency set must not be empty")
        predicted_max = max(context.score(dispatch, _y(y)).severity for y in predicted)
        coverage = float(np.count_nonzero(severities > predicted_max) / severities.size) if severities.size else 0.0

    report = StressReport(
        samples=samples,
        seed=seed,
        failures=failures,
        failure_rate=failures / samples,
        nonconverged=nonconverged,
        solver_errors=solver_errors,
        severity_quantiles=quantiles,
        outage_histogram=dict(sorted(histogram.items())),
        coverage_exceedance=coverage,
        predicted_max_severity=predicted_max,
        threshold=threshold,
        prior=prior,
        records=records,
    )
    logger.info(
        f"Failure rate {report.failure_rate:.4f}"
        + (f", coverage exceedance {coverage:.4f}" if coverage is not None else ""),
        extra={"phase": "stress"},
    )
    return report

def severity_histogram(report: StressReport, bins: int = 50) -> List[Tuple[float, float, int]]:
    """(left edge, right edge, count) rows over the finite sample severities"""
    severities = np.array([r.severity for r in report.records if np.isfinite(r.severity)])
    if severities.size == 0:
        return []
    counts, edges = np.histogram(severities, bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]

class OutageComparisonRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    outage_count: int
    failures_a: int
    failures_b: int
    ratio: Optional[float]
    undefined: bool

def failure_mode_comparison(report_a: StressReport, report_b: StressReport) -> List[OutageComparisonRow]:
    """failures_a / failures_b per outage count; rows with failures_b == 0 are flagged undefined"""
    if report_a.samples != report_b.samples:
        raise ReportMismatchError(
            f"reports use different sample counts ({report_a.samples} vs {report_b.samples})"
        )
    if report_a.seed != report_b.seed:
        raise ReportMismatchError(f"reports use different prior seeds ({report_a.seed} vs {report_b.seed})")
    rows = []
    for count in sorted(set(report_a.outage_histogram) | set(report_b.outage_histogram)):
        a = report_a.outage_histogram.get(count, 0)
        b = report_b.outage_histogram.get(count, 0)
        rows.append(OutageComparisonRow(
            outage_count=count,
            failures_a=a,
            failures_b=b,
            ratio=a / b if b else None,
            undefined=b == 0,
        ))
    return rows
