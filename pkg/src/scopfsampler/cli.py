"""Command-line entry point.

    scopfsampler solve    --config run.toml     SMC prediction + mitigation
    scopfsampler baseline --config run.toml     adversarial optimization
    scopfsampler attack   --config run.toml     predict contingencies for one dispatch
    scopfsampler stress   --config run.toml     Monte-Carlo stress test of one dispatch
    scopfsampler compare  A.json B.json         failure-mode comparison of two stress reports

Every command writes its reports plus ``manifest.json`` into the output
directory.  Failures print one ``error[<category>]: <detail>`` line to stderr
and exit with the category's code.
"""
import argparse
import logging
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from scopfsampler.exceptions import ConfigurationError, ScopfError
from scopfsampler.netmodel import Dispatch, Network, NetworkOptions, dispatch_box, load_case, nominal_dispatch
from scopfsampler.powerflow import SolverOptions
from scopfsampler.reports import Manifest, emit_reports
from scopfsampler.scopf import SmcConfig, adversarial_opt, predict_contingencies, smc_scopf
from scopfsampler.severity import PenaltyParams, PriorParams
from scopfsampler.stresstest import DEFAULT_THRESHOLD, StressReport, failure_mode_comparison, stress_test
from scopfsampler.utils import get_env_var, get_logger, json_loads, setup_logging

logger = get_logger("scopfsampler.cli")

# ------------------------------------------------------------------
# Configuration
# ------------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

class SmcSection(_Section):
    n_x: int = Field(10, ge=1)
    n_y: int = Field(10, ge=1)
    N: int = Field(10, ge=0)
    K: int = Field(30, ge=0)
    tau_x: float = Field(1e-5, gt=0)
    tau_y: float = Field(1e-3, gt=0)
    target_acceptance: Optional[float] = Field(0.574, gt=0, lt=1)
    adapt_fraction: float = Field(0.5, ge=0, le=1)
    step_x: Optional[float] = Field(None, gt=0)
    step_y: Optional[float] = Field(None, gt=0)
    max_step: float = Field(1.0, gt=0)

class AttackConfig(_Section):
    n_y: int = Field(10, ge=1)
    K: int = Field(30, ge=0)
    tau: float = Field(1e-3, gt=0)
    target_acceptance: Optional[float] = Field(0.574, gt=0, lt=1)
    adapt_fraction: float = Field(0.5, ge=0, le=1)
    dispatch_path: Optional[Path] = None

class StressConfig(_Section):
    samples: int = Field(10_000, ge=1)
    threshold: float = Field(DEFAULT_THRESHOLD, gt=0, lt=1)
    dispatch_path: Optional[Path] = None

class RunConfig(_Section):
    case_path: Path
    seed: int = Field(0, ge=0)
    output_dir: Path = Path("out")
    threads: Optional[int] = Field(None, ge=1)
    network: NetworkOptions = Field(default_factory=NetworkOptions)
    solver: SolverOptions = Field(default_factory=SolverOptions)
    prior: PriorParams = Field(default_factory=PriorParams)
    penalty: PenaltyParams = Field(default_factory=PenaltyParams)
    smc: SmcSection = Field(default_factory=SmcSection)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    stress: StressConfig = Field(default_factory=StressConfig)

    @property
    def workers(self) -> int:
        return self.threads or os.cpu_count() or 1

    def smc_config(self) -> SmcConfig:
        return SmcConfig(
            **self.smc.model_dump(),
            seed=self.seed,
            threads=self.workers,
            solver=self.solver,
            penalty=self.penalty,
            prior=self.prior,
        )

def _validation_detail(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "<root>"
    return f"{location}: {first['msg']}"

def _resolve(base: Path, value: Optional[Path]) -> Optional[Path]:
    if value is None or value.is_absolute():
        return value
    return base / value

def load_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read, validate and resolve a TOML run configuration; relative paths follow the file"""
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e.strerror or e}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"config {path} is not valid TOML: {e}")

    overrides = overrides or {}
    for key in ("seed", "output_dir", "threads"):
        if overrides.get(key) is not None:
            raw[key] = overrides[key]
    if overrides.get("samples") is not None:
        raw.setdefault("stress", {})["samples"] = overrides["samples"]

    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"config {path}: {_validation_detail(e)}")

    base = path.parent
    output_dir = config.output_dir if overrides.get("output_dir") is not None else _resolve(base, config.output_dir)
    return config.model_copy(update={
        "case_path": _resolve(base, config.case_path),
        "output_dir": output_dir,
        "attack": config.attack.model_copy(update={"dispatch_path": _resolve(base, config.attack.dispatch_path)}),
        "stress": config.stress.model_copy(update={"dispatch_path": _resolve(base, config.stress.dispatch_path)}),
    })

def _read_json(path: Path) -> Any:
    try:
        return json_loads(path.read_bytes())
    except OSError as e:
        raise ConfigurationError(f"cannot read {path}: {e.strerror or e}")
    except ValueError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}")

def load_assessed_dispatch(network: Network, path: Optional[Path]) -> Tuple[Dispatch, Optional[List[np.ndarray]]]:
    """The dispatch to attack or stress, plus the contingency set predicted with it.

    Without a path this is the case's own setpoint moved inside the box.
    """
    box = dispatch_box(network)
    if path is None:
        logger.info("Assessing the case-file dispatch (nudged inside the box)")
        return box.nudge_inside(nominal_dispatch(network)), None

    data = _read_json(path)
    raw = (data.get("best_dispatch") or data.get("dispatch")) if isinstance(data, dict) else None
    if raw is None:
        raise ConfigurationError(f"{path} holds no dispatch (expected a solve, baseline or attack result)")
    try:
        dispatch = Dispatch.from_dict(raw)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"{path}: malformed dispatch ({e})")
    if dispatch.sizes != box.sizes or len(dispatch.q_l) != len(dispatch.p_l):
        raise ConfigurationError(f"{path}: dispatch layout {dispatch.sizes} does not match the case {box.sizes}")
    predicted = [np.asarray(entry["y"], dtype=np.float64) for entry in data.get("contingencies", [])]
    logger.info(f"Assessing the dispatch from {path}")
    return dispatch, predicted or None

# ------------------------------------------------------------------
# Commands
# ------------------------------------------------------------------

@dataclass
class Command:
    name: str
    handler: Callable[[argparse.Namespace, Optional[RunConfig]], Manifest]
    help: str = ""
    needs_config: bool = True

class CommandRegistry:
    def __init__(self):
        self.commands: Dict[str, Command] = {}

    def command(self, name: str, help: str = "", needs_config: bool = True):
        def decorator(handler):
            if name in self.commands:
                raise ValueError(f"Command already registered: {name}")
            self.commands[name] = Command(name, handler, help, needs_config)
            return handler
        return decorator

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog="scopfsampler", description="SCOPF by adversarial sampling")
        parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
        subparsers = parser.add_subparsers(dest="command", required=True)
        for command in self.commands.values():
            sub = subparsers.add_parser(command.name, help=command.help)
            if command.needs_config:
                sub.add_argument("--config", required=True, type=Path, help="TOML run configuration")
                sub.add_argument("--seed", type=int, default=None)
                sub.add_argument("--threads", type=int, default=None)
                sub.add_argument("--samples", type=int, default=None, help="stress sample count M")
            sub.add_argument("--out", type=Path, default=None, help="output directory")
            if command.name == "compare":
                sub.add_argument("report_a", type=Path, help="stress.json of the first run")
                sub.add_argument("report_b", type=Path, help="stress.json of the second run")
        return parser

commands = CommandRegistry()

@commands.command("solve", help="SMC contingency prediction and mitigation")
def solve(args: argparse.Namespace, config: RunConfig) -> Manifest:
    network = load_case(config.case_path, config.network)
    result = smc_scopf(network, config.smc_config())
    return emit_reports(result, config.output_dir)

@commands.command("baseline", help="adversarial-optimization baseline")
def baseline(args: argparse.Namespace, config: RunConfig) -> Manifest:
    network = load_case(config.case_path, config.network)
    result = adversarial_opt(network, config.smc_config())
    return emit_reports(result, config.output_dir)

@commands.command("attack", help="predict high-risk contingencies for a dispatch")
def attack(args: argparse.Namespace, config: RunConfig) -> Manifest:
    network = load_case(config.case_path, config.network)
    dispatch, _ = load_assessed_dispatch(network, config.attack.dispatch_path)
    prediction = predict_contingencies(
        network, dispatch,
        n_y=config.attack.n_y, K=config.attack.K, tau=config.attack.tau, seed=config.seed,
        target_acceptance=config.attack.target_acceptance, adapt_fraction=config.attack.adapt_fraction,
        solver=config.solver, penalty=config.penalty, prior=config.prior, threads=config.workers,
    )
    return emit_reports(prediction, config.output_dir)

@commands.command("stress", help="Monte-Carlo stress test of a dispatch")
def stress(args: argparse.Namespace, config: RunConfig) -> Manifest:
    network = load_case(config.case_path, config.network)
    dispatch, predicted = load_assessed_dispatch(network, config.stress.dispatch_path)
    report = stress_test(
        network, dispatch, config.stress.samples,
        prior=config.prior, predicted=predicted, seed=config.seed,
        solver=config.solver, penalty=config.penalty,
        threshold=config.stress.threshold, threads=config.workers,
    )
    return emit_reports(report, config.output_dir)

def _load_stress_report(path: Path) -> StressReport:
    try:
        return StressReport.model_validate(_read_json(path))
    except ValidationError as e:
        raise ConfigurationError(f"{path} is not a stress report: {_validation_detail(e)}")

@commands.command("compare", help="compare failure modes of two stress reports", needs_config=False)
def compare(args: argparse.Namespace, config: None) -> Manifest:
    rows = failure_mode_comparison(_load_stress_report(args.report_a), _load_stress_report(args.report_b))
    for row in rows:
        ratio = "undefined" if row.undefined else f"{row.ratio:.3f}"
        logger.info(f"{row.outage_count} outages: {row.failures_a} vs {row.failures_b} failures (ratio {ratio})")
    return emit_reports(rows, args.out or Path("out") / "compare")

# ------------------------------------------------------------------
# Entry points
# ------------------------------------------------------------------

def _log_level(flag: Optional[str]) -> int:
    name = (flag or get_env_var("SCOPFSAMPLER_LOG_LEVEL", "INFO")).upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ConfigurationError(f"unknown log level '{name}'")
    return level

def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code"""
    parser = commands.build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage
        return 2 if e.code else 0

    try:
        setup_logging(_log_level(args.log_level))
        command = commands.commands[args.command]
        config = None
        if command.needs_config:
            config = load_config(args.config, {
                "seed": args.seed,
                "output_dir": args.out,
                "threads": args.threads,
                "samples": args.samples,
            })
        manifest = command.handler(args, config)
    except ScopfError as e:
        print(e.one_line(), file=sys.stderr)
        return e.exit_code
    logger.info(f"{args.command} complete: {len(manifest.files)} files")
    return 0

def main() -> None:
    sys.exit(run())
