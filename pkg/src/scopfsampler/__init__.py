__version__ = "0.1.0"

from .netmodel import (
    Network,
    NetworkOptions,
    Dispatch,
    DispatchBox,
    parse_case,
    load_case,
    dispatch_box,
    nominal_dispatch,
    to_unconstrained,
    from_unconstrained,
)
from .powerflow import (
    Contingency,
    PowerFlowSolution,
    SolverOptions,
    assemble_ybus,
    solve_powerflow,
    grad_scalar,
    finite_difference_grad,
)
from .severity import (
    PriorParams,
    PenaltyParams,
    SeverityReport,
    ScoringContext,
    hinge_violation,
    economic_cost,
    severity,
    log_prior,
    risk_adjusted_severity,
    dispatch_potential,
    contingency_potential,
)
from .sampler import LogDensity, MalaConfig, ChainStats, adapt_step_size, mala_step, mala_chain, run_population
from .scopf import (
    SmcConfig,
    ScopfResult,
    BudgetLedger,
    predict_contingencies,
    smc_scopf,
    adversarial_opt,
    equal_budget,
)
from .stresstest import StressReport, outage_count, stress_test, failure_mode_comparison
from .reports import Manifest, emit_reports
from .cli import run
from .exceptions import (
    ScopfError,
    ConfigurationError,
    ReportMismatchError,
    CaseParseError,
    SolverError,
    SingularJacobianError,
    DispatchBoundsError,
    BudgetMismatchError,
    OutputError,
)

__all__ = [
    # Grid model
    "Network",
    "NetworkOptions",
    "Dispatch",
    "DispatchBox",
    "parse_case",
    "load_case",
    "dispatch_box",
    "nominal_dispatch",
    "to_unconstrained",
    "from_unconstrained",

    # Power flow
    "Contingency",
    "PowerFlowSolution",
    "SolverOptions",
    "assemble_ybus",
    "solve_powerflow",
    "grad_scalar",
    "finite_difference_grad",

    # Severity
    "PriorParams",
    "PenaltyParams",
    "SeverityReport",
    "ScoringContext",
    "hinge_violation",
    "economic_cost",
    "severity",
    "log_prior",
    "risk_adjusted_severity",
    "dispatch_potential",
    "contingency_potential",

    # Sampling
    "LogDensity",
    "MalaConfig",
    "ChainStats",
    "mala_step",
    "mala_chain",
    "adapt_step_size",
    "run_population",

    # Drivers
    "SmcConfig",
    "ScopfResult",
    "BudgetLedger",
    "predict_contingencies",
    "smc_scopf",
    "adversarial_opt",
    "equal_budget",

    # Stress testing
    "StressReport",
    "outage_count",
    "stress_test",
    "failure_mode_comparison",

    # Reports and CLI
    "Manifest",
    "emit_reports",
    "run",

    # Exceptions
    "ScopfError",
    "ConfigurationError",
    "ReportMismatchError",
    "CaseParseError",
    "SolverError",
    "SingularJacobianError",
    "DispatchBoundsError",
    "BudgetMismatchError",
    "OutputError",
]
