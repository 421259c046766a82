"""Severity of a (dispatch, contingency) pair and the population potentials.

S(x, y) is the economic cost of the operating point plus L-weighted hinge
violations of generator, load and bus-voltage limits; a non-converged solve
adds ``L_res * residual_norm``.  The risk-adjusted severity adds the log
prior density of the contingency.
"""
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.stats import norm

from scopfsampler.exceptions import ScopfError
from scopfsampler.netmodel import (
    Dispatch,
    DispatchBox,
    Network,
    from_unconstrained,
)
from scopfsampler.powerflow import (
    ContingencyLike,
    ObservableGradient,
    Observables,
    PowerFlowSolution,
    SolverOptions,
    grad_scalar,
    line_strengths,
    observe,
    solve_powerflow,
)
from scopfsampler.utils import get_logger

logger = get_logger("scopfsampler.severity")

# P(y_i <= 0) = 5% for a unit-variance Gaussian prior
DEFAULT_PRIOR_MEAN = 1.6449

class PriorParams(BaseModel):
    """I.i.d. Gaussian prior on line strengths; either field may be a per-line vector"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    mu0: Union[float, Tuple[float, ...]] = DEFAULT_PRIOR_MEAN
    sigma0: Union[float, Tuple[float, ...]] = 1.0

    @field_validator("sigma0")
    @classmethod
    def _positive(cls, value):
        if np.any(np.asarray(value, dtype=np.float64) <= 0):
            raise ValueError("sigma0 must be > 0")
        return value

    def mean(self, n_lines: int) -> np.ndarray:
        return _per_line(self.mu0, n_lines, "mu0")

    def std(self, n_lines: int) -> np.ndarray:
        return _per_line(self.sigma0, n_lines, "sigma0")

    def sample(self, n_lines: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean(n_lines) + self.std(n_lines) * rng.standard_normal(n_lines)

def _per_line(value, n_lines: int, name: str) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        return np.full(n_lines, float(array))
    if array.shape != (n_lines,):
        raise ValueError(f"{name} has {array.size} entries for {n_lines} lines")
    return array

class PenaltyParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    L: float = Field(100.0, gt=0, description="hinge penalty coefficient")
    L_res: Optional[float] = Field(None, ge=0, description="non-convergence coefficient, defaults to L")

    @property
    def residual_coefficient(self) -> float:
        return self.L if self.L_res is None else self.L_res

class SeverityReport(BaseModel):
    """Score of one (dispatch, contingency) pair.

    ``severity`` is ``economic_cost + sum(violations.values())``; the prior
    fields stay ``None`` until ``with_prior`` fills them.
    """
    model_config = ConfigDict(frozen=True)

    economic_cost: float
    violations: Dict[str, float]
    severity: float
    log_prior: Optional[float] = None
    risk_adjusted: Optional[float] = None
    converged: bool

    def with_prior(self, log_prior: float) -> "SeverityReport":
        return self.model_copy(update={
            "log_prior": float(log_prior),
            "risk_adjusted": risk_adjusted_severity(self, log_prior),
        })

    @property
    def total_violation(self) -> float:
        return float(sum(self.violations.values()))

    @property
    def violated(self) -> bool:
        """Any positive hinge term, the residual term included"""
        return any(value > 0 for value in self.violations.values())

def hinge_violation(x, lo, hi, L: float):
    """L * ([x - hi]+ + [lo - x]+), elementwise for arrays"""
    value = L * (np.maximum(np.subtract(x, hi), 0.0) + np.maximum(np.subtract(lo, x), 0.0))
    return float(value) if np.ndim(value) == 0 else value

def _hinge_slope(x, lo, hi, L: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return L * ((x > hi).astype(np.float64) - (x < lo).astype(np.float64))

def _quadratic(cost: Tuple[float, float, float], p: float) -> float:
    c2, c1, c0 = cost
    return c2 * p * p + c1 * p + c0

def _quadratic_slope(cost: Tuple[float, float, float], p: float) -> float:
    c2, c1, _ = cost
    return 2.0 * c2 * p + c1

def _generator_outputs(network: Network, dispatch: Dispatch, slack_p: float) -> np.ndarray:
    """Real output of every generator, the slack one taken from the solved state"""
    p = np.empty(len(network.generators))
    p[list(network.dispatched_generators)] = dispatch.p_g
    p[network.slack_generator] = slack_p
    return p

def economic_cost(network: Network, dispatch: Dispatch, solution: PowerFlowSolution) -> float:
    """Generation cost, slack generator at its solved output, plus dispatchable-load cost"""
    p = _generator_outputs(network, dispatch, solution.slack_p)
    total = sum(_quadratic(gen.cost, p[g]) for g, gen in enumerate(network.generators))
    for j, l in enumerate(network.dispatchable_loads):
        total += _quadratic(network.loads[l].cost, dispatch.p_l[j])
    return float(total)

class SeverityFunctional:
    """S(x, y) as a function of the solved observables, with its partial derivatives"""

    def __init__(self, network: Network, penalty: PenaltyParams):
        self.network = network
        self.penalty = penalty

    @cached_property
    def _labels(self) -> Dict[str, List[str]]:
        net = self.network
        bus_id = [bus.id for bus in net.buses]
        return {
            "gen_p": [f"gen_p:{bus_id[gen.bus]}#{g}" for g, gen in enumerate(net.generators)],
            "gen_q": [f"gen_q:{bus_id[gen.bus]}#{g}" for g, gen in enumerate(net.generators)],
            "load_p": [f"load_p:{bus_id[net.loads[l].bus]}" for l in net.dispatchable_loads],
            "load_q": [f"load_q:{bus_id[net.loads[l].bus]}" for l in net.dispatchable_loads],
            "bus_v": [f"bus_v:{bus.id}" for bus in net.buses],
        }

    @cached_property
    def _limits(self) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        net = self.network
        loads = [net.loads[l] for l in net.dispatchable_loads]
        return {
            "gen_p": (np.array([g.pmin for g in net.generators]), np.array([g.pmax for g in net.generators])),
            "gen_q": (np.array([g.qmin for g in net.generators]), np.array([g.qmax for g in net.generators])),
            "load_p": (np.array([ld.pmin for ld in loads]), np.array([ld.pmax for ld in loads])),
            "load_q": (np.array([ld.qmin for ld in loads]), np.array([ld.qmax for ld in loads])),
            "bus_v": (np.array([b.vmin for b in net.buses]), np.array([b.vmax for b in net.buses])),
        }

    def terms(self, observables: Observables) -> Tuple[float, Dict[str, float], ObservableGradient]:
        """Economic cost, per-constraint violations and the gradient of their sum"""
        net = self.network
        L = self.penalty.L
        dispatch = Dispatch.from_flat(observables.dispatch, (
            len(net.dispatched_generators), len(net.generator_buses), len(net.dispatchable_loads)))
        p_gen = _generator_outputs(net, dispatch, observables.slack_p)

        grad_dispatch = np.zeros_like(observables.dispatch)
        n_pg, n_vg, n_l = dispatch.sizes
        grad_p_gen = np.array([_quadratic_slope(gen.cost, p_gen[g]) for g, gen in enumerate(net.generators)])
        cost = sum(_quadratic(gen.cost, p_gen[g]) for g, gen in enumerate(net.generators))
        load_offset = n_pg + n_vg
        for j, l in enumerate(net.dispatchable_loads):
            cost += _quadratic(net.loads[l].cost, dispatch.p_l[j])
            grad_dispatch[load_offset + j] += _quadratic_slope(net.loads[l].cost, dispatch.p_l[j])

        values = {
            "gen_p": p_gen,
            "gen_q": observables.q_g,
            "load_p": dispatch.p_l,
            "load_q": dispatch.q_l,
            "bus_v": observables.vm,
        }
        violations: Dict[str, float] = {}
        slopes: Dict[str, np.ndarray] = {}
        for kind, x in values.items():
            lo, hi = self._limits[kind]
            hinge = np.atleast_1d(hinge_violation(x, lo, hi, L))
            violations.update(zip(self._labels[kind], (float(v) for v in hinge)))
            slopes[kind] = _hinge_slope(x, lo, hi, L)

        grad_p_gen = grad_p_gen + slopes["gen_p"]
        dispatched = list(net.dispatched_generators)
        grad_dispatch[:n_pg] += grad_p_gen[dispatched]
        grad_dispatch[load_offset:load_offset + n_l] += slopes["load_p"]
        grad_dispatch[load_offset + n_l:] += slopes["load_q"]

        residual_weight = 0.0 if observables.converged else self.penalty.residual_coefficient
        violations["residual"] = residual_weight * observables.residual_norm

        gradient = ObservableGradient(
            vm=slopes["bus_v"],
            slack_p=float(grad_p_gen[net.slack_generator]),
            q_g=slopes["gen_q"],
            dispatch=grad_dispatch,
            residual=residual_weight,
        )
        return float(cost), violations, gradient

    def evaluate(self, observables: Observables) -> Tuple[float, ObservableGradient]:
        cost, violations, gradient = self.terms(observables)
        return cost + sum(violations.values()), gradient

    def report(self, observables: Observables) -> SeverityReport:
        cost, violations, _ = self.terms(observables)
        return SeverityReport(
            economic_cost=cost,
            violations=violations,
            severity=cost + sum(violations.values()),
            converged=observables.converged,
        )

def severity(
    network: Network,
    dispatch: Dispatch,
    contingency: ContingencyLike,
    solution: PowerFlowSolution,
    penalty: Optional[PenaltyParams] = None,
) -> SeverityReport:
    line_strengths(network, contingency)
    return SeverityFunctional(network, penalty or PenaltyParams()).report(observe(dispatch, solution))

def log_prior(contingency: ContingencyLike, prior: Optional[PriorParams] = None) -> float:
    """Sum of per-line Gaussian log densities"""
    prior = prior or PriorParams()
    y = _as_vector(contingency)
    return float(np.sum(norm.logpdf(y, loc=prior.mean(y.size), scale=prior.std(y.size))))

def log_prior_grad(contingency: ContingencyLike, prior: Optional[PriorParams] = None) -> np.ndarray:
    prior = prior or PriorParams()
    y = _as_vector(contingency)
    return -(y - prior.mean(y.size)) / prior.std(y.size) ** 2

def _as_vector(contingency: ContingencyLike) -> np.ndarray:
    y = getattr(contingency, "y", contingency)
    return np.atleast_1d(np.asarray(y, dtype=np.float64))

def risk_adjusted_severity(report: SeverityReport, log_prior: float) -> float:
    return float(report.severity + log_prior)

# ------------------------------------------------------------------
# Population potentials
# ------------------------------------------------------------------

class SolveCounter:
    """Thread-safe count of power-flow solves"""

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    def increment(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0

@dataclass(frozen=True, eq=False)
class ScoringContext:
    """Everything needed to score pairs: the grid, the box and the scoring parameters"""
    network: Network
    box: DispatchBox
    solver: SolverOptions = field(default_factory=SolverOptions)
    penalty: PenaltyParams = field(default_factory=PenaltyParams)
    prior: PriorParams = field(default_factory=PriorParams)
    counter: SolveCounter = field(default_factory=SolveCounter)

    @cached_property
    def functional(self) -> SeverityFunctional:
        return SeverityFunctional(self.network, self.penalty)

    def solve(self, dispatch: Dispatch, y: np.ndarray) -> PowerFlowSolution:
        self.counter.increment()
        return solve_powerflow(self.network, dispatch, y, self.solver)

    def score(self, dispatch: Dispatch, y: np.ndarray) -> SeverityReport:
        """Full report with prior fields; one solve"""
        solution = self.solve(dispatch, y)
        return self.report(dispatch, y, solution)

    def report(self, dispatch: Dispatch, y: np.ndarray, solution: PowerFlowSolution) -> SeverityReport:
        report = self.functional.report(observe(dispatch, solution))
        return report.with_prior(log_prior(y, self.prior))

    def evaluate(self, dispatch: Dispatch, y: np.ndarray) -> Tuple[float, PowerFlowSolution]:
        """S(x, y) and the solution it was scored on; one solve"""
        solution = self.solve(dispatch, y)
        return self.functional.evaluate(observe(dispatch, solution))[0], solution

    def gradient(
        self, dispatch: Dispatch, y: np.ndarray, solution: PowerFlowSolution
    ) -> Tuple[np.ndarray, np.ndarray]:
        """dS/dz and dS/dy at an already solved pair; no extra solve"""
        return grad_scalar(self.network, dispatch, y, solution, self.functional, self.box, self.solver)

def _evaluate_members(evaluate, members: Sequence) -> List:
    """Evaluate members in index order; the first error stops the population"""
    results = []
    for i, member in enumerate(members):
        try:
            results.append(evaluate(member))
        except ScopfError:
            logger.debug(f"Population member {i} of {len(members)} failed; skipping the rest")
            raise
    return results

def dispatch_potential(
    context: ScoringContext,
    contingencies: Sequence[np.ndarray],
    z: np.ndarray,
    with_gradient: bool = False,
) -> Union[float, Tuple[float, np.ndarray]]:
    """U_x(z): mean severity of from_unconstrained(z) over the contingency population"""
    if len(contingencies) == 0:
        raise ValueError("contingency population must not be empty")
    dispatch = from_unconstrained(z, context.box)

    def member(y):
        value, solution = context.evaluate(dispatch, y)
        return value, (context.gradient(dispatch, y, solution)[0] if with_gradient else None)

    results = _evaluate_members(member, contingencies)
    value = float(np.mean([r[0] for r in results]))
    if not with_gradient:
        return value
    return value, np.mean([r[1] for r in results], axis=0)

def contingency_potential(
    context: ScoringContext,
    dispatches: Sequence[Dispatch],
    y: np.ndarray,
    with_gradient: bool = False,
) -> Union[float, Tuple[float, np.ndarray]]:
    """U_y(y) = -min over dispatches of S_r(x, y).

    The gradient is taken through the minimizing dispatch, the lowest index
    on exact ties.
    """
    if len(dispatches) == 0:
        raise ValueError("dispatch population must not be empty")
    y = np.asarray(y, dtype=np.float64)
    results = _evaluate_members(lambda d: context.evaluate(d, y), dispatches)
    severities = np.array([r[0] for r in results])
    best = int(np.argmin(severities))
    value = -(float(severities[best]) + log_prior(y, context.prior))
    if not with_gradient:
        return value
    _, grad_y = context.gradient(dispatches[best], y, results[best][1])
    return value, -(grad_y + log_prior_grad(y, context.prior))
