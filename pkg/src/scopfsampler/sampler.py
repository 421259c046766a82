"""Metropolis-adjusted Langevin sampling over unnormalized log densities."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from scopfsampler.streams import Stream, stream_rng
from scopfsampler.utils import get_logger

logger = get_logger("scopfsampler.sampler")

@runtime_checkable
class LogDensity(Protocol):
    """state -> (log p up to an additive constant, grad log p)"""

    def __call__(self, state: np.ndarray) -> Tuple[float, np.ndarray]:
        ...

class MalaConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    step_size: float = Field(..., gt=0, description="tau")
    steps: int = Field(..., ge=0, description="K")
    seed: int = Field(0, ge=0)
    target_acceptance: Optional[float] = Field(None, gt=0, lt=1)
    adapt_steps: int = Field(0, ge=0, description="leading steps that tune tau")
    adaptation_rate: float = Field(1.0, gt=0)

@dataclass
class ChainStats:
    accepted: int = 0
    proposed: int = 0

    def __post_init__(self):
        if not 0 <= self.accepted <= self.proposed:
            raise ValueError("need 0 <= accepted <= proposed")

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    @classmethod
    def combine(cls, stats: Sequence["ChainStats"]) -> "ChainStats":
        return cls(sum(s.accepted for s in stats), sum(s.proposed for s in stats))

class StepResult(NamedTuple):
    state: np.ndarray
    accepted: bool
    log_density: float
    gradient: np.ndarray
    log_alpha: float

@dataclass(frozen=True, eq=False)
class ChainResult:
    initial: np.ndarray
    final: np.ndarray
    trace: np.ndarray
    stats: ChainStats
    log_densities: np.ndarray
    accepted: np.ndarray
    final_log_density: Optional[float] = None
    step_size: Optional[float] = None

    @property
    def best(self) -> np.ndarray:
        """Highest-log-density state in the trace (the initial state when the trace is empty)"""
        if len(self.trace) == 0:
            return self.initial
        return self.trace[int(np.argmax(self.log_densities))]

    @property
    def mean(self) -> np.ndarray:
        if len(self.trace) == 0:
            return self.initial
        return self.trace.mean(axis=0)

@dataclass(frozen=True, eq=False)
class PopulationResult:
    chains: List[ChainResult] = field(default_factory=list)

    @property
    def states(self) -> List[np.ndarray]:
        return [chain.final for chain in self.chains]

    @property
    def stats(self) -> List[ChainStats]:
        return [chain.stats for chain in self.chains]

    @property
    def acceptance_rate(self) -> float:
        return ChainStats.combine(self.stats).acceptance_rate

    @property
    def step_sizes(self) -> List[Optional[float]]:
        return [chain.step_size for chain in self.chains]

def log_acceptance_ratio(
    current: np.ndarray,
    proposal: np.ndarray,
    log_p_current: float,
    grad_current: np.ndarray,
    log_p_proposal: float,
    grad_proposal: np.ndarray,
    step_size: float,
) -> float:
    """log of the Metropolis-Hastings ratio for the Langevin proposal"""
    forward = proposal - current - step_size * grad_current
    backward = current - proposal - step_size * grad_proposal
    return float(
        log_p_proposal - log_p_current
        - (backward @ backward - forward @ forward) / (4.0 * step_size)
    )

def _finite(log_p: float, grad: np.ndarray) -> bool:
    return bool(np.isfinite(log_p) and np.all(np.isfinite(grad)))

def mala_step(
    state: np.ndarray,
    target: LogDensity,
    step_size: float,
    rng: np.random.Generator,
    current: Optional[Tuple[float, np.ndarray]] = None,
) -> StepResult:
    """One proposal plus accept/reject.

    ``current`` carries (log p, grad log p) at ``state`` so a chain evaluates
    the target once per step.  A proposal where the target is not finite is
    rejected.
    """
    state = np.asarray(state, dtype=np.float64)
    log_p, grad = current if current is not None else target(state)
    if not _finite(log_p, grad):
        raise ValueError("target log density is not finite at the current state")

    noise = np.sqrt(2.0 * step_size) * rng.standard_normal(state.shape)
    proposal = state + step_size * grad + noise
    with np.errstate(all="ignore"):
        log_p_new, grad_new = target(proposal)
        log_alpha = (
            log_acceptance_ratio(state, proposal, log_p, grad, log_p_new, grad_new, step_size)
            if _finite(log_p_new, grad_new) else -np.inf
        )
    u = rng.random()
    if not np.isnan(log_alpha) and u < np.exp(min(0.0, log_alpha)):
        return StepResult(proposal, True, float(log_p_new), np.asarray(grad_new), log_alpha)
    return StepResult(state, False, float(log_p), grad, log_alpha)

def adapt_step_size(step_size: float, log_alpha: float, target: float, rate: float = 1.0) -> float:
    """Multiplicative step control toward a target acceptance probability.

    The step grows after a likely proposal and shrinks after an unlikely one;
    a non-finite proposal counts as acceptance probability 0.
    """
    alpha = 0.0 if np.isnan(log_alpha) else float(np.exp(min(0.0, log_alpha)))
    return float(step_size * np.exp(rate * (alpha - target)))

def mala_chain(
    x0: np.ndarray,
    target: LogDensity,
    config: MalaConfig,
    chain: int = 0,
    stream: Stream = Stream.MALA,
    step_size: Optional[float] = None,
) -> ChainResult:
    """K sequential MALA steps; step k of chain c draws from stream (seed, c, k).

    With ``target_acceptance`` set, the first ``adapt_steps`` steps tune the
    step size and the remaining steps run with it frozen.  ``step_size``
    overrides the configured initial step.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    K = config.steps
    tau = config.step_size if step_size is None else float(step_size)
    if K == 0:
        return ChainResult(
            initial=x0, final=x0, trace=np.empty((0, x0.size)), stats=ChainStats(),
            log_densities=np.empty(0), accepted=np.zeros(0, dtype=bool), step_size=tau,
        )

    current = target(x0)
    state = x0
    trace = np.empty((K, x0.size))
    log_densities = np.empty(K)
    accepted = np.zeros(K, dtype=bool)
    for step in range(K):
        rng = stream_rng(config.seed, chain=chain, step=step, stream=stream)
        result = mala_step(state, target, tau, rng, current=current)
        if config.target_acceptance is not None and step < config.adapt_steps:
            tau = adapt_step_size(tau, result.log_alpha, config.target_acceptance, config.adaptation_rate)
        state = result.state
        current = (result.log_density, result.gradient)
        trace[step] = state
        log_densities[step] = result.log_density
        accepted[step] = result.accepted

    stats = ChainStats(accepted=int(accepted.sum()), proposed=K)
    logger.debug(f"Chain {chain}: accepted {stats.accepted}/{stats.proposed}, tau={tau:.3g}")
    return ChainResult(
        initial=x0, final=state, trace=trace, stats=stats,
        log_densities=log_densities, accepted=accepted, final_log_density=float(current[0]),
        step_size=tau,
    )

def run_population(
    states: Sequence[np.ndarray],
    target: LogDensity,
    config: MalaConfig,
    threads: Optional[int] = None,
    stream: Stream = Stream.MALA,
    step_sizes: Optional[Sequence[float]] = None,
) -> PopulationResult:
    """Evolve every state as its own chain; chain i uses RNG coordinates (seed, i)

    ``step_sizes`` gives each chain its own initial step, e.g. the steps a
    previous round adapted to.
    """
    if len(states) == 0:
        raise ValueError("population must not be empty")
    if step_sizes is not None and len(step_sizes) != len(states):
        raise ValueError("need one step size per chain")

    def run(indexed: Tuple[int, np.ndarray]) -> ChainResult:
        i, x0 = indexed
        tau = None if step_sizes is None else step_sizes[i]
        return mala_chain(x0, target, config, chain=i, stream=stream, step_size=tau)

    if threads == 1 or len(states) == 1:
        chains = [run(item) for item in enumerate(states)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            chains = list(executor.map(run, enumerate(states)))
    return PopulationResult(chains=chains)

TRACE_HEADER = ("chain", "step", "accepted", "log_density")

def trace_rows(chains: Sequence[ChainResult]) -> Tuple[List[str], List[list]]:
    """Header and rows of the trace dump: one row per chain step"""
    width = max((chain.initial.size for chain in chains), default=0)
    header = list(TRACE_HEADER) + [f"x{i}" for i in range(width)]
    rows = []
    for c, chain in enumerate(chains):
        for step in range(len(chain.trace)):
            rows.append(
                [c, step, int(chain.accepted[step]), float(chain.log_densities[step])]
                + chain.trace[step].tolist()
            )
    return header, rows

# ------------------------------------------------------------------
# Two-well demonstration density
# ------------------------------------------------------------------

QUARTIC_MINIMA = (-0.544, 0.919)

def quartic_potential(x):
    """U(x) = x^4 - 0.5 x^3 - x^2"""
    return x ** 4 - 0.5 * x ** 3 - x ** 2

def quartic_potential_grad(x):
    return 4.0 * x ** 3 - 1.5 * x ** 2 - 2.0 * x

def quartic_log_density(state: np.ndarray) -> Tuple[float, np.ndarray]:
    """log p = -U for a one-element state"""
    state = np.asarray(state, dtype=np.float64)
    x = state[0]
    return float(-quartic_potential(x)), np.array([-quartic_potential_grad(x)])
