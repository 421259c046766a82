"""SCOPF drivers: SMC attack/defend sampling, contingency prediction and the
adversarial-optimization baseline.

Both population drivers run on an ``AdversarialGame``: a dispatcher
minimizing U_x over unconstrained dispatch coordinates z and an attacker
minimizing U_y over line strengths y.  ``PowerGridGame`` is the game defined
by a grid; the drivers themselves never touch power flow.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from scopfsampler.exceptions import BudgetMismatchError
from scopfsampler.netmodel import (
    Dispatch,
    Network,
    dispatch_box,
    from_unconstrained,
    sample_uniform,
    to_unconstrained,
)
from scopfsampler.powerflow import SolverOptions
from scopfsampler.sampler import ChainStats, MalaConfig, PopulationResult, run_population
from scopfsampler.severity import (
    PenaltyParams,
    PriorParams,
    ScoringContext,
    SeverityReport,
    contingency_potential,
    dispatch_potential,
)
from scopfsampler.streams import Stream, derive_seed, stream_rng
from scopfsampler.stresstest import impaired_lines
from scopfsampler.utils import get_logger

logger = get_logger("scopfsampler.scopf")

SCHEMA_VERSION = "1.0"

class SmcConfig(BaseModel):
    """Population sizes, rounds (N), substeps (K) and step sizes for both drivers"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_x: int = Field(10, ge=1)
    n_y: int = Field(10, ge=1)
    N: int = Field(10, ge=0, description="alternating rounds")
    K: int = Field(30, ge=0, description="substeps per round and phase")
    tau_x: float = Field(1e-5, gt=0, description="initial dispatch MALA step")
    tau_y: float = Field(1e-3, gt=0, description="initial contingency MALA step")
    target_acceptance: Optional[float] = Field(
        0.574, gt=0, lt=1, description="acceptance the MALA steps are tuned toward; None keeps them fixed"
    )
    adapt_fraction: float = Field(0.5, ge=0, le=1, description="share of each round's K steps that tune tau")
    step_x: Optional[float] = Field(None, gt=0, description="baseline dispatch step, defaults to tau_x")
    step_y: Optional[float] = Field(None, gt=0, description="baseline contingency step, defaults to tau_y")
    max_step: float = Field(1.0, gt=0, description="largest norm of one baseline update")
    seed: int = Field(0, ge=0)
    threads: Optional[int] = Field(None, ge=1)
    solver: SolverOptions = Field(default_factory=SolverOptions)
    penalty: PenaltyParams = Field(default_factory=PenaltyParams)
    prior: PriorParams = Field(default_factory=PriorParams)

    @property
    def baseline_steps(self) -> Tuple[float, float]:
        return (
            self.tau_x if self.step_x is None else self.step_x,
            self.tau_y if self.step_y is None else self.step_y,
        )

    @property
    def adapt_steps(self) -> int:
        return int(self.adapt_fraction * self.K)

# ------------------------------------------------------------------
# Budget ledger
# ------------------------------------------------------------------

@dataclass(frozen=True)
class BudgetLedger:
    """Power-flow solves implied by a config.

    Every evaluation of U_x costs n_y solves and every evaluation of U_y costs
    n_x.  Each of the n_x (resp. n_y) members is evaluated K + 1 times per
    round: once at its starting point and once per substep.  The final
    selection scores all n_x * n_y pairs once.

    The baseline ascends each contingency against the single best dispatch,
    one solve per evaluation, so it takes ``ascent_steps`` steps to spend the
    same n_x * (K + 1) solves per contingency.
    """
    n_x: int
    n_y: int
    rounds: int
    substeps: int

    @property
    def per_round(self) -> int:
        if self.substeps == 0:
            return 0
        return 2 * self.n_x * self.n_y * (self.substeps + 1)

    @property
    def ascent_steps(self) -> int:
        if self.substeps == 0:
            return 0
        return self.n_x * (self.substeps + 1) - 1

    @property
    def final_selection(self) -> int:
        return self.n_x * self.n_y

    @property
    def total(self) -> int:
        return self.per_round * self.rounds + self.final_selection

    def to_dict(self) -> Dict[str, int]:
        return {
            "n_x": self.n_x,
            "n_y": self.n_y,
            "rounds": self.rounds,
            "substeps": self.substeps,
            "per_round": self.per_round,
            "final_selection": self.final_selection,
            "total": self.total,
        }

def equal_budget(config: SmcConfig) -> BudgetLedger:
    return BudgetLedger(n_x=config.n_x, n_y=config.n_y, rounds=config.N, substeps=config.K)

# ------------------------------------------------------------------
# Games
# ------------------------------------------------------------------

class AdversarialGame(Protocol):
    """A dispatcher/attacker pair of population potentials"""

    def initial_dispatches(self, n: int, seed: int) -> List[np.ndarray]:
        ...

    def initial_contingencies(self, n: int, seed: int) -> List[np.ndarray]:
        ...

    def dispatch_potential(self, contingencies: Sequence[np.ndarray], z: np.ndarray, with_gradient: bool = False):
        ...

    def contingency_potential(self, dispatches: Sequence[np.ndarray], y: np.ndarray, with_gradient: bool = False):
        ...

    def score_pairs(self, dispatches: Sequence[np.ndarray], contingencies: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[List[Any]]]:
        """Severity matrix (dispatch x contingency) plus a per-pair detail object"""
        ...

    @property
    def solves(self) -> int:
        ...

class PowerGridGame:
    """The SCOPF game on a grid: U_x is mean severity, U_y is -min risk-adjusted severity"""

    def __init__(self, context: ScoringContext, threads: Optional[int] = None):
        self.context = context
        self.threads = threads

    @classmethod
    def from_network(cls, network: Network, config: SmcConfig) -> "PowerGridGame":
        context = ScoringContext(
            network=network,
            box=dispatch_box(network),
            solver=config.solver,
            penalty=config.penalty,
            prior=config.prior,
        )
        return cls(context, threads=config.threads)

    def initial_dispatches(self, n: int, seed: int) -> List[np.ndarray]:
        box = self.context.box
        return [
            to_unconstrained(sample_uniform(box, stream_rng(seed, chain=i, stream=Stream.DISPATCH_INIT)), box)
            for i in range(n)
        ]

    def initial_contingencies(self, n: int, seed: int) -> List[np.ndarray]:
        n_lines = self.context.network.n_branches
        return [
            self.context.prior.sample(n_lines, stream_rng(seed, chain=j, stream=Stream.CONTINGENCY_INIT))
            for j in range(n)
        ]

    def dispatch_potential(self, contingencies, z, with_gradient=False):
        return dispatch_potential(self.context, contingencies, z, with_gradient)

    def contingency_potential(self, dispatches, y, with_gradient=False):
        box = self.context.box
        return contingency_potential(
            self.context, [from_unconstrained(z, box) for z in dispatches], y, with_gradient
        )

    def score_pairs(self, dispatches, contingencies) -> Tuple[np.ndarray, List[List[SeverityReport]]]:
        box = self.context.box

        def row(z: np.ndarray) -> List[SeverityReport]:
            d = from_unconstrained(z, box)
            return [self.context.score(d, y) for y in contingencies]

        reports = _ordered_map(row, dispatches, self.threads)
        matrix = np.array([[r.severity for r in rep] for rep in reports])
        return matrix, reports

    @property
    def solves(self) -> int:
        return self.context.counter.count

def _ordered_map(fn: Callable, items: Sequence, threads: Optional[int]) -> List:
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, items))

# ------------------------------------------------------------------
# Results
# ------------------------------------------------------------------

@dataclass(frozen=True)
class RoundSummary:
    round: int
    mean_ux: float
    min_ux: float
    max_ux: float
    max_sr: float
    accept_rate_x: float
    accept_rate_y: float
    tau_x: float
    tau_y: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "round": self.round,
            "mean_ux": self.mean_ux,
            "min_ux": self.min_ux,
            "max_ux": self.max_ux,
            "max_sr": self.max_sr,
            "accept_rate_x": self.accept_rate_x,
            "accept_rate_y": self.accept_rate_y,
            "tau_x": self.tau_x,
            "tau_y": self.tau_y,
        }

HISTORY_HEADER = (
    "round", "mean_ux", "min_ux", "max_ux", "max_sr", "accept_rate_x", "accept_rate_y", "tau_x", "tau_y",
)

@dataclass(frozen=True, eq=False)
class GameOutcome:
    """What a driver returns for any game"""
    dispatches: List[np.ndarray]
    contingencies: List[np.ndarray]
    severity: np.ndarray
    details: List[List[Any]]
    best_index: int
    history: List[RoundSummary]
    ledger: BudgetLedger
    solves: int
    last_contingency_chains: Optional[PopulationResult] = None

    @property
    def best(self) -> np.ndarray:
        return self.dispatches[self.best_index]

    @property
    def dispatch_potentials(self) -> np.ndarray:
        """U_x of every final dispatch against the final contingency set"""
        return self.severity.mean(axis=1)

@dataclass(frozen=True, eq=False)
class ScopfResult:
    method: str
    seed: int
    best_dispatch: Dispatch
    contingencies: List[np.ndarray]
    reports: List[SeverityReport]
    history: List[RoundSummary]
    ledger: BudgetLedger
    solves: int
    dispatch_potentials: List[float]
    impaired_lines: List[str]
    wall_time: float = 0.0
    contingency_chains: Optional[PopulationResult] = None

    @property
    def worst_index(self) -> int:
        """Predicted contingency with the highest risk-adjusted severity against x*"""
        return int(np.argmax([r.risk_adjusted for r in self.reports]))

    def to_dict(self) -> Dict[str, Any]:
        # wall_time stays out so reruns serialize identically
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "seed": self.seed,
            "best_dispatch": self.best_dispatch.to_dict(),
            "contingencies": [
                {"y": y.tolist(), "report": report.model_dump()}
                for y, report in zip(self.contingencies, self.reports)
            ],
            "worst_contingency": self.worst_index if self.reports else None,
            "impaired_lines": self.impaired_lines,
            "dispatch_potentials": self.dispatch_potentials,
            "history": [summary.to_dict() for summary in self.history],
            "budget": self.ledger.to_dict(),
            "solves": self.solves,
        }

# ------------------------------------------------------------------
# Drivers on a game
# ------------------------------------------------------------------

def _negated(potential: Callable, population: Sequence[np.ndarray]) -> Callable:
    """log density e^{-U}: (value, grad) of -U"""
    def log_density(state: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = potential(population, state, True)
        return -value, -grad
    return log_density

def _chain_values(population: PopulationResult) -> np.ndarray:
    values = [chain.final_log_density for chain in population.chains]
    return np.array([np.nan if v is None else v for v in values], dtype=np.float64)

def _summarize(
    round_: int, ux: np.ndarray, sr: np.ndarray, rate_x: float, rate_y: float, tau_x: float, tau_y: float
) -> RoundSummary:
    finite_ux, finite_sr = ux[np.isfinite(ux)], sr[np.isfinite(sr)]
    return RoundSummary(
        round=round_,
        mean_ux=float(finite_ux.mean()) if finite_ux.size else float("nan"),
        min_ux=float(finite_ux.min()) if finite_ux.size else float("nan"),
        max_ux=float(finite_ux.max()) if finite_ux.size else float("nan"),
        max_sr=float(finite_sr.max()) if finite_sr.size else float("nan"),
        accept_rate_x=rate_x,
        accept_rate_y=rate_y,
        tau_x=tau_x,
        tau_y=tau_y,
    )

def _finish(
    game: AdversarialGame,
    dispatches: List[np.ndarray],
    contingencies: List[np.ndarray],
    history: List[RoundSummary],
    ledger: BudgetLedger,
    start_solves: int,
    chains: Optional[PopulationResult] = None,
) -> GameOutcome:
    severity, details = game.score_pairs(dispatches, contingencies)
    # argmin returns the lowest index on ties
    best = int(np.argmin(severity.mean(axis=1)))
    solves = game.solves - start_solves
    if solves != ledger.total:
        logger.error(f"Solve count {solves} differs from the ledger total {ledger.total}")
        raise BudgetMismatchError(f"performed {solves} power-flow solves, ledger expects {ledger.total}")
    logger.debug(f"Budget check passed: {solves} solves")
    return GameOutcome(
        dispatches=list(dispatches),
        contingencies=list(contingencies),
        severity=severity,
        details=details,
        best_index=best,
        history=history,
        ledger=ledger,
        solves=solves,
        last_contingency_chains=chains,
    )

def _mala_config(config: SmcConfig, seed: int, step_size: float) -> MalaConfig:
    return MalaConfig(
        step_size=step_size,
        steps=config.K,
        seed=seed,
        target_acceptance=config.target_acceptance,
        adapt_steps=config.adapt_steps,
    )

def _typical_step(population: PopulationResult) -> float:
    """Geometric mean of the chains' step sizes"""
    return float(np.exp(np.mean(np.log(population.step_sizes))))

def run_smc(game: AdversarialGame, config: SmcConfig) -> GameOutcome:
    """Alternate MALA over dispatches (target e^{-U_x}) and contingencies (target e^{-U_y}).

    Chain i of either population keeps the step size it adapted to in one
    round as its starting step in the next.
    """
    ledger = equal_budget(config)
    start_solves = game.solves
    dispatches = game.initial_dispatches(config.n_x, config.seed)
    contingencies = game.initial_contingencies(config.n_y, config.seed)
    steps_x = [config.tau_x] * config.n_x
    steps_y = [config.tau_y] * config.n_y
    history: List[RoundSummary] = []
    chains_y: Optional[PopulationResult] = None

    for i in range(1, config.N + 1):
        x_config = _mala_config(config, derive_seed(config.seed, i, "dispatch"), config.tau_x)
        chains_x = run_population(
            dispatches, _negated(game.dispatch_potential, contingencies), x_config,
            threads=config.threads, step_sizes=steps_x,
        )
        dispatches = chains_x.states
        steps_x = chains_x.step_sizes

        y_config = _mala_config(config, derive_seed(config.seed, i, "contingency"), config.tau_y)
        chains_y = run_population(
            contingencies, _negated(game.contingency_potential, dispatches), y_config,
            threads=config.threads, step_sizes=steps_y,
        )
        contingencies = chains_y.states
        steps_y = chains_y.step_sizes

        summary = _summarize(
            i, -_chain_values(chains_x), _chain_values(chains_y),
            chains_x.acceptance_rate, chains_y.acceptance_rate,
            _typical_step(chains_x), _typical_step(chains_y),
        )
        history.append(summary)
        if config.K > 0 and summary.accept_rate_x == 0.0 and summary.accept_rate_y == 0.0:
            logger.warning("No MALA move accepted in either population", extra={"phase": "smc", "round": i})
        logger.info(
            f"mean U_x {summary.mean_ux:.4f}, max S_r {summary.max_sr:.4f}, "
            f"acceptance {summary.accept_rate_x:.2f}/{summary.accept_rate_y:.2f}, "
            f"tau {summary.tau_x:.3g}/{summary.tau_y:.3g}",
            extra={"phase": "smc", "round": i},
        )

    return _finish(game, dispatches, contingencies, history, ledger, start_solves, chains_y)

def _descend(
    potential: Callable, x0: np.ndarray, step: float, steps: int, max_step: Optional[float] = None
) -> Tuple[np.ndarray, float]:
    """Fixed-step gradient descent; ``steps`` gradient evaluations then one value evaluation.

    An update longer than ``max_step`` is shortened to that length.
    """
    x = np.asarray(x0, dtype=np.float64)
    if steps == 0:
        return x, float("nan")
    for _ in range(steps):
        _, grad = potential(x, True)
        if not np.all(np.isfinite(grad)):
            continue
        update = step * grad
        norm = float(np.linalg.norm(update))
        if max_step is not None and norm > max_step:
            update *= max_step / norm
        x = x - update
    return x, float(potential(x, False))

def _best_member(values: np.ndarray) -> int:
    """Lowest finite value, lowest index on ties"""
    return int(np.argmin(np.where(np.isfinite(values), values, np.inf)))

def run_adversarial(game: AdversarialGame, config: SmcConfig) -> GameOutcome:
    """Alternating deterministic gradient steps.

    Dispatches descend U_x against the contingency population; every
    contingency then ascends its risk-adjusted severity against the best
    dispatch of the round.  The contingency phase spends the ledger's
    n_x * (K + 1) solves per contingency as ``ascent_steps`` single-dispatch
    steps.
    """
    ledger = equal_budget(config)
    start_solves = game.solves
    step_x, step_y = config.baseline_steps
    dispatches = game.initial_dispatches(config.n_x, config.seed)
    contingencies = game.initial_contingencies(config.n_y, config.seed)
    history: List[RoundSummary] = []
    moved = 1.0 if config.K > 0 else 0.0

    for i in range(1, config.N + 1):
        frozen_y = list(contingencies)
        results = _ordered_map(
            lambda z: _descend(
                lambda s, g: game.dispatch_potential(frozen_y, s, g), z, step_x, config.K, config.max_step
            ),
            dispatches, config.threads,
        )
        dispatches = [r[0] for r in results]
        ux = np.array([r[1] for r in results])

        best = [dispatches[_best_member(ux)]]
        results = _ordered_map(
            lambda y: _descend(
                lambda s, g: game.contingency_potential(best, s, g), y, step_y, ledger.ascent_steps, config.max_step
            ),
            contingencies, config.threads,
        )
        contingencies = [r[0] for r in results]
        sr = -np.array([r[1] for r in results])

        summary = _summarize(i, ux, sr, moved, moved, step_x, step_y)
        history.append(summary)
        logger.info(
            f"mean U_x {summary.mean_ux:.4f}, max S_r {summary.max_sr:.4f}",
            extra={"phase": "baseline", "round": i},
        )

    return _finish(game, dispatches, contingencies, history, ledger, start_solves)

# ------------------------------------------------------------------
# Grid-level entry points
# ------------------------------------------------------------------

def _grid_result(method: str, game: PowerGridGame, config: SmcConfig, outcome: GameOutcome, wall_time: float) -> ScopfResult:
    context = game.context
    reports = outcome.details[outcome.best_index]
    worst = int(np.argmax([r.risk_adjusted for r in reports]))
    impaired = impaired_lines(context.network, outcome.contingencies[worst])
    logger.info(f"{method} finished in {wall_time:.1f}s; worst predicted contingency impairs {impaired or 'no lines'}")
    return ScopfResult(
        method=method,
        seed=config.seed,
        best_dispatch=from_unconstrained(outcome.best, context.box),
        contingencies=outcome.contingencies,
        reports=reports,
        history=outcome.history,
        ledger=outcome.ledger,
        solves=outcome.solves,
        dispatch_potentials=outcome.dispatch_potentials.tolist(),
        impaired_lines=impaired,
        wall_time=wall_time,
        contingency_chains=outcome.last_contingency_chains,
    )

def smc_scopf(network: Network, config: Optional[SmcConfig] = None) -> ScopfResult:
    config = config or SmcConfig()
    game = PowerGridGame.from_network(network, config)
    start = time.perf_counter()
    outcome = run_smc(game, config)
    return _grid_result("smc", game, config, outcome, time.perf_counter() - start)

def adversarial_opt(network: Network, config: Optional[SmcConfig] = None) -> ScopfResult:
    config = config or SmcConfig()
    game = PowerGridGame.from_network(network, config)
    start = time.perf_counter()
    outcome = run_adversarial(game, config)
    return _grid_result("adversarial", game, config, outcome, time.perf_counter() - start)

# ------------------------------------------------------------------
# Contingency prediction
# ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ContingencyPrediction:
    """Predicted contingencies sorted by descending risk-adjusted severity"""
    dispatch: Dispatch
    contingencies: List[np.ndarray]
    reports: List[SeverityReport]
    chains: PopulationResult
    seed: int
    solves: int
    impaired_lines: List[str] = field(default_factory=list)

    @property
    def stats(self) -> List[ChainStats]:
        return self.chains.stats

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "method": "attack",
            "seed": self.seed,
            "dispatch": self.dispatch.to_dict(),
            "contingencies": [
                {"y": y.tolist(), "report": report.model_dump()}
                for y, report in zip(self.contingencies, self.reports)
            ],
            "impaired_lines": self.impaired_lines,
            "acceptance_rate": self.chains.acceptance_rate,
            "step_sizes": self.chains.step_sizes,
            "solves": self.solves,
        }

def predict_contingencies(
    network: Network,
    dispatch: Dispatch,
    n_y: int = 10,
    K: int = 30,
    tau: float = 1e-3,
    seed: int = 0,
    target_acceptance: Optional[float] = 0.574,
    adapt_fraction: float = 0.5,
    solver: Optional[SolverOptions] = None,
    penalty: Optional[PenaltyParams] = None,
    prior: Optional[PriorParams] = None,
    threads: Optional[int] = None,
) -> ContingencyPrediction:
    """Sample y from p(y | x), proportional to p0(y) exp(S(x, y)), starting from prior draws.

    ``tau`` is the initial step; the first ``adapt_fraction`` of the K steps
    tune each chain's step toward ``target_acceptance`` (None keeps it fixed).
    """
    if n_y < 1:
        raise ValueError("n_y must be >= 1")
    context = ScoringContext(
        network=network,
        box=dispatch_box(network),
        solver=solver or SolverOptions(),
        penalty=penalty or PenaltyParams(),
        prior=prior or PriorParams(),
    )
    initial = [
        context.prior.sample(network.n_branches, stream_rng(seed, chain=j, stream=Stream.PREDICTION_INIT))
        for j in range(n_y)
    ]

    def log_density(y: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = contingency_potential(context, [dispatch], y, with_gradient=True)
        return -value, -grad

    config = MalaConfig(
        step_size=tau,
        steps=K,
        seed=derive_seed(seed, "predict"),
        target_acceptance=target_acceptance,
        adapt_steps=int(adapt_fraction * K),
    )
    chains = run_population(initial, log_density, config, threads=threads)
    reports = _ordered_map(lambda y: context.score(dispatch, y), chains.states, threads)
    order = sorted(range(n_y), key=lambda j: (-reports[j].risk_adjusted, j))
    contingencies = [chains.states[j] for j in order]
    reports = [reports[j] for j in order]
    impaired = impaired_lines(network, contingencies[0])
    logger.info(
        f"Predicted {n_y} contingencies; top S_r {reports[0].risk_adjusted:.4f} impairs {impaired or 'no lines'}"
        f", acceptance {chains.acceptance_rate:.2f}",
        extra={"phase": "attack"},
    )
    return ContingencyPrediction(
        dispatch=dispatch,
        contingencies=contingencies,
        reports=reports,
        chains=chains,
        seed=seed,
        solves=context.counter.count,
        impaired_lines=impaired,
    )
