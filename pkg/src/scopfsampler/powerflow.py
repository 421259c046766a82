"""AC power flow under line-strength contingencies, with adjoint gradients.

The state is solved in two steps: Newton-Raphson on the polar mismatch
equations for the angles at PV and PQ buses and the magnitudes at PQ buses,
then recovery of generator reactive output and slack injections from the
solved voltages.
"""
import warnings
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from scopfsampler.exceptions import SingularJacobianError
from scopfsampler.netmodel import (
    Dispatch,
    DispatchBox,
    Network,
    from_unconstrained,
    to_unconstrained,
    unconstrained_jacobian,
)
from scopfsampler.utils import get_logger

logger = get_logger("scopfsampler.powerflow")

class SolverOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tol: float = Field(1e-8, gt=0, description="mismatch tolerance, p.u.")
    max_iter: int = Field(20, ge=1, description="Newton iteration cap")
    jacobian_regularization: float = Field(1e-8, ge=0, description="Tikhonov lambda")

@dataclass(frozen=True, eq=False)
class Contingency:
    """Line strengths y; branch k carries sigma(y_k) times its nominal admittance"""
    y: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64)
        if y.ndim != 1:
            raise ValueError("contingency must be a vector of line strengths")
        if not np.all(np.isfinite(y)):
            raise ValueError("contingency entries must be finite")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def strength(self) -> np.ndarray:
        return expit(self.y)

    @classmethod
    def nominal(cls, n_branches: int, value: float = 10.0) -> "Contingency":
        return cls(np.full(n_branches, value))

ContingencyLike = Union[Contingency, np.ndarray, Sequence[float]]

def line_strengths(network: Network, contingency: ContingencyLike) -> np.ndarray:
    """The y vector of a contingency, checked against the network"""
    y = contingency.y if isinstance(contingency, Contingency) else np.asarray(contingency, dtype=np.float64)
    if y.shape != (network.n_branches,):
        raise ValueError(f"contingency has shape {y.shape}, expected {(network.n_branches,)}")
    return y

@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    v: np.ndarray
    theta: np.ndarray
    q_g: np.ndarray
    slack_p: float
    slack_q: float
    residual_norm: float
    converged: bool
    iterations: int
    mismatch: np.ndarray

def assemble_ybus(network: Network, contingency: ContingencyLike) -> np.ndarray:
    """Nodal admittance matrix with every branch scaled by sigma(y_k); bus shunts unscaled"""
    arrays = network.branch_arrays
    s = expit(line_strengths(network, contingency))
    series = s * arrays.y_series
    half_charging = 0.5j * s * arrays.b_charging
    n = network.n_buses
    ybus = np.zeros((n, n), dtype=np.complex128)
    np.add.at(ybus, (arrays.from_bus, arrays.from_bus), series + half_charging)
    np.add.at(ybus, (arrays.to_bus, arrays.to_bus), series + half_charging)
    np.add.at(ybus, (arrays.from_bus, arrays.to_bus), -series)
    np.add.at(ybus, (arrays.to_bus, arrays.from_bus), -series)
    ybus[np.diag_indices(n)] += arrays.shunt
    return ybus

# ------------------------------------------------------------------
# Newton-Raphson
# ------------------------------------------------------------------

def _specified_injections(network: Network, dispatch: Dispatch) -> Tuple[np.ndarray, np.ndarray]:
    """Net injections fixed by the dispatch; the slack generator is excluded"""
    inc = network.incidence
    p_spec = inc.gen_p @ dispatch.p_g - inc.load @ dispatch.p_l - inc.fixed_p
    q_spec = -inc.load @ dispatch.q_l - inc.fixed_q
    return p_spec, q_spec

def _power_derivatives(ybus: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """dS/d|V| and dS/dtheta of the bus injections S = V conj(Y V)"""
    current = ybus @ v
    v_norm = v / np.abs(v)
    ds_dvm = v[:, None] * np.conj(ybus * v_norm[None, :]) + np.diag(np.conj(current) * v_norm)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(current) - ybus * v[None, :])
    return ds_dvm, ds_dva

def _jacobian(network: Network, ds_dvm: np.ndarray, ds_dva: np.ndarray) -> np.ndarray:
    pvpq = np.concatenate([network.pv, network.pq])
    pq = network.pq
    return np.block([
        [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
        [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
    ])

# entries beyond this make J^T J overflow in the regularized fallback
_JACOBIAN_LIMIT = 1e50

def _usable(jacobian: np.ndarray) -> bool:
    if jacobian.size == 0:
        return True
    with np.errstate(invalid="ignore"):
        return bool(np.all(np.isfinite(jacobian)) and np.max(np.abs(jacobian)) < _JACOBIAN_LIMIT)

def _mismatch(network: Network, s_bus: np.ndarray, p_spec: np.ndarray, q_spec: np.ndarray) -> np.ndarray:
    pvpq = np.concatenate([network.pv, network.pq])
    return np.concatenate([
        s_bus.real[pvpq] - p_spec[pvpq],
        s_bus.imag[network.pq] - q_spec[network.pq],
    ])

def _solve_linear(matrix: np.ndarray, rhs: np.ndarray, regularization: float) -> np.ndarray:
    """Direct solve; Tikhonov-regularized least squares when singular or ill-conditioned"""
    if matrix.size == 0:
        return np.zeros(0)
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            solution = scipy.linalg.solve(matrix, rhs)
            if np.all(np.isfinite(solution)):
                return solution
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
            pass
    if regularization > 0 and np.all(np.isfinite(matrix)) and np.all(np.isfinite(rhs)):
        logger.debug(f"Falling back to regularized solve (lambda={regularization:g})")
        normal = matrix.T @ matrix + regularization * np.eye(matrix.shape[1])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            try:
                solution = scipy.linalg.solve(normal, matrix.T @ rhs, assume_a="pos")
            except (np.linalg.LinAlgError, ValueError):
                solution = np.full(matrix.shape[1], np.nan)
        if np.all(np.isfinite(solution)):
            return solution
        # normal equations lost definiteness to round-off; minimum-norm SVD solution
        try:
            solution = scipy.linalg.lstsq(matrix, rhs)[0]
        except (np.linalg.LinAlgError, ValueError):
            solution = np.full(matrix.shape[1], np.nan)
        if np.all(np.isfinite(solution)):
            return solution
    raise SingularJacobianError(
        "Jacobian is singular even after regularization; "
        "use finite_difference_grad for gradients at this point"
    )

def solve_powerflow(
    network: Network,
    dispatch: Dispatch,
    contingency: ContingencyLike,
    options: Optional[SolverOptions] = None,
) -> PowerFlowSolution:
    """Solve the AC power flow from a flat start.

    Always returns a solution; when Newton does not reach ``options.tol``
    within ``options.max_iter`` updates the last finite iterate is returned
    with ``converged=False``.  Every returned iterate has a finite, bounded
    Jacobian; an update that leaves that region ends the iteration.
    """
    options = options or SolverOptions()
    ybus = assemble_ybus(network, contingency)
    p_spec, q_spec = _specified_injections(network, dispatch)
    pv, pq = network.pv, network.pq
    pvpq = np.concatenate([pv, pq])
    n_angles = len(pvpq)

    vm = np.ones(network.n_buses)
    vm[network.incidence.generator_buses] = dispatch.v_g
    va = np.zeros(network.n_buses)

    def evaluate(vm: np.ndarray, va: np.ndarray):
        v = vm * np.exp(1j * va)
        s_bus = v * np.conj(ybus @ v)
        return v, s_bus, _mismatch(network, s_bus, p_spec, q_spec)

    v, s_bus, mismatch = evaluate(vm, va)
    jacobian = _jacobian(network, *_power_derivatives(ybus, v))
    converged = False
    iterations = 0
    while True:
        residual = float(np.max(np.abs(mismatch))) if mismatch.size else 0.0
        if residual <= options.tol:
            converged = True
            break
        if iterations >= options.max_iter:
            break
        step = _solve_linear(jacobian, -mismatch, options.jacobian_regularization)
        new_va, new_vm = va.copy(), vm.copy()
        new_va[pvpq] += step[:n_angles]
        new_vm[pq] += step[n_angles:]
        new_v, new_s, new_mismatch = evaluate(new_vm, new_va)
        iterations += 1
        if not (np.all(np.isfinite(new_mismatch)) and np.all(new_vm[pq] != 0.0)):
            logger.debug(f"Newton iterate became non-finite after {iterations} updates; keeping the last finite one")
            break
        with np.errstate(all="ignore"):
            new_jacobian = _jacobian(network, *_power_derivatives(ybus, new_v))
        if not _usable(new_jacobian):
            logger.debug(f"Newton Jacobian blew up after {iterations} updates; keeping the previous iterate")
            break
        va, vm, v, s_bus, mismatch, jacobian = new_va, new_vm, new_v, new_s, new_mismatch, new_jacobian

    residual = float(np.max(np.abs(mismatch))) if mismatch.size else 0.0
    if not converged:
        logger.debug(f"Power flow did not converge: residual {residual:.3e} after {iterations} updates")

    # step 2: generator reactive output and slack injections from the solved state
    slack = network.slack
    q_bus = s_bus.imag - q_spec
    return PowerFlowSolution(
        v=vm,
        theta=va,
        q_g=network.incidence.q_share @ q_bus,
        slack_p=float(s_bus.real[slack] - p_spec[slack]),
        slack_q=float(q_bus[slack]),
        residual_norm=residual,
        converged=converged,
        iterations=iterations,
        mismatch=mismatch,
    )

# ------------------------------------------------------------------
# Gradients
# ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Observables:
    """Solved quantities a scalar functional may depend on"""
    vm: np.ndarray
    slack_p: float
    q_g: np.ndarray
    dispatch: np.ndarray
    residual_norm: float
    converged: bool

@dataclass(frozen=True, eq=False)
class ObservableGradient:
    vm: np.ndarray
    slack_p: float
    q_g: np.ndarray
    dispatch: np.ndarray
    residual: float = 0.0

@runtime_checkable
class ScalarFunctional(Protocol):
    """A scalar of the solved state, with its partial derivatives"""

    def evaluate(self, observables: Observables) -> Tuple[float, ObservableGradient]:
        ...

def observe(dispatch: Dispatch, solution: PowerFlowSolution) -> Observables:
    return Observables(
        vm=solution.v,
        slack_p=solution.slack_p,
        q_g=solution.q_g,
        dispatch=dispatch.flatten(),
        residual_norm=solution.residual_norm,
        converged=solution.converged,
    )

def _branch_power_sensitivity(network: Network, v: np.ndarray, y: np.ndarray) -> np.ndarray:
    """dS_bus/dy, one column per branch"""
    arrays = network.branch_arrays
    f, t = arrays.from_bus, arrays.to_bus
    s = expit(y)
    scale = s * (1.0 - s)
    shunt_half = 0.5j * arrays.b_charging
    current_from = (arrays.y_series + shunt_half) * v[f] - arrays.y_series * v[t]
    current_to = (arrays.y_series + shunt_half) * v[t] - arrays.y_series * v[f]
    columns = np.arange(network.n_branches)
    sensitivity = np.zeros((network.n_buses, network.n_branches), dtype=np.complex128)
    np.add.at(sensitivity, (f, columns), v[f] * np.conj(current_from) * scale)
    np.add.at(sensitivity, (t, columns), v[t] * np.conj(current_to) * scale)
    return sensitivity

def grad_scalar(
    network: Network,
    dispatch: Dispatch,
    contingency: ContingencyLike,
    solution: PowerFlowSolution,
    functional: ScalarFunctional,
    box: DispatchBox,
    options: Optional[SolverOptions] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of a functional of the solved state w.r.t. (z, y) by the adjoint method.

    Every observable is a weighted sum of the bus mismatches
    M = S(V, y) - S_spec(d) plus explicit terms, so the partials of the
    functional reduce to weights on M; the state dependence is eliminated
    through the transpose of the Newton Jacobian at the returned iterate.
    """
    options = options or SolverOptions()
    y = line_strengths(network, contingency)
    inc = network.incidence
    n = network.n_buses
    pv, pq = network.pv, network.pq
    pvpq = np.concatenate([pv, pq])
    n_pg, n_vg, n_l = dispatch.sizes

    _, grad = functional.evaluate(observe(dispatch, solution))

    ybus = assemble_ybus(network, y)
    v = solution.v * np.exp(1j * solution.theta)
    ds_dvm, ds_dva = _power_derivatives(ybus, v)
    ds_dy = _branch_power_sensitivity(network, v, y)

    # rows: real mismatch at every bus, then reactive mismatch at every bus
    m_va = np.vstack([ds_dva.real, ds_dva.imag])
    m_vm = np.vstack([ds_dvm.real, ds_dvm.imag])
    m_y = np.vstack([ds_dy.real, ds_dy.imag])
    m_d = np.zeros((2 * n, n_pg + n_vg + 2 * n_l))
    m_d[:n, :n_pg] = -inc.gen_p
    m_d[:, n_pg:n_pg + n_vg] = m_vm[:, inc.generator_buses]
    m_d[:n, n_pg + n_vg:n_pg + n_vg + n_l] = inc.load
    m_d[n:, n_pg + n_vg + n_l:] = inc.load

    weights = np.zeros(2 * n)
    weights[network.slack] += grad.slack_p
    weights[n:] += inc.q_share.T @ grad.q_g
    if grad.residual and solution.mismatch.size:
        k = int(np.argmax(np.abs(solution.mismatch)))
        row = pvpq[k] if k < len(pvpq) else n + pq[k - len(pvpq)]
        weights[row] += grad.residual * np.sign(solution.mismatch[k])

    rows = np.concatenate([pvpq, n + pq])
    jacobian = np.hstack([m_va[np.ix_(rows, pvpq)], m_vm[np.ix_(rows, pq)]])

    df_du = np.concatenate([
        m_va[:, pvpq].T @ weights,
        m_vm[:, pq].T @ weights + grad.vm[pq],
    ])
    df_dd = m_d.T @ weights + grad.dispatch
    df_dd[n_pg:n_pg + n_vg] += grad.vm[inc.generator_buses]
    df_dy = m_y.T @ weights

    adjoint = _solve_linear(jacobian.T, df_du, options.jacobian_regularization)
    grad_d = df_dd - m_d[rows].T @ adjoint
    grad_y = df_dy - m_y[rows].T @ adjoint
    grad_z = grad_d[box.free] * unconstrained_jacobian(dispatch, box)
    return grad_z, grad_y

def finite_difference_grad(
    network: Network,
    dispatch: Dispatch,
    contingency: ContingencyLike,
    functional: ScalarFunctional,
    box: DispatchBox,
    options: Optional[SolverOptions] = None,
    step: float = 1e-5,
) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient w.r.t. (z, y); each component costs two solves"""
    options = options or SolverOptions()
    y = line_strengths(network, contingency).copy()
    z = to_unconstrained(dispatch, box)

    def value(z_: np.ndarray, y_: np.ndarray) -> float:
        d = from_unconstrained(z_, box)
        solution = solve_powerflow(network, d, y_, options)
        return functional.evaluate(observe(d, solution))[0]

    grad_z = np.zeros_like(z)
    for i in range(z.size):
        up, down = z.copy(), z.copy()
        up[i] += step
        down[i] -= step
        grad_z[i] = (value(up, y) - value(down, y)) / (2 * step)
    grad_y = np.zeros_like(y)
    for k in range(y.size):
        up, down = y.copy(), y.copy()
        up[k] += step
        down[k] -= step
        grad_y[k] = (value(z, up) - value(z, down)) / (2 * step)
    return grad_z, grad_y
