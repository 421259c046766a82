"""Grid case model: MATPOWER parsing, the dispatch box and its coordinates.

Columns read from a MATPOWER case (1-based, as in the MATPOWER manual):

* ``bus``: 1 bus_i, 2 type, 3 Pd, 4 Qd, 5 Gs, 6 Bs, 12 Vmax, 13 Vmin
* ``gen``: 1 bus, 2 Pg, 4 Qmax, 5 Qmin, 6 Vg, 8 status, 9 Pmax, 10 Pmin
* ``branch``: 1 fbus, 2 tbus, 3 r, 4 x, 5 b, 11 status
* ``gencost``: 1 model (2 = polynomial only), 4 n, then n coefficients

Everything is converted to per-unit on ``baseMVA`` at parse time.
"""
import re
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.special import expit, logit

from scopfsampler.exceptions import CaseParseError, DispatchBoundsError
from scopfsampler.utils import get_logger

logger = get_logger("scopfsampler.netmodel")

Cost = Tuple[float, float, float]

class BusType(IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3
    ISOLATED = 4

class NetworkOptions(BaseModel):
    """How loads enter the dispatch"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    dispatchable_loads: bool = False
    load_bounds: Tuple[float, float] = (0.5, 1.0)
    load_cost: Cost = (0.0, 0.0, 0.0)

    @field_validator("load_bounds")
    @classmethod
    def _ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if value[0] > value[1]:
            raise ValueError("load_bounds must satisfy lower <= upper")
        return value

@dataclass(frozen=True)
class Bus:
    id: int
    type: BusType
    gs: float
    bs: float
    vmin: float
    vmax: float

@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    y_series: complex
    b_charging: float

@dataclass(frozen=True)
class Generator:
    bus: int
    p: float
    vg: float
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: Cost = (0.0, 0.0, 0.0)

@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float
    dispatchable: bool = False
    pmin: float = 0.0
    pmax: float = 0.0
    qmin: float = 0.0
    qmax: float = 0.0
    cost: Cost = (0.0, 0.0, 0.0)

@dataclass(frozen=True, eq=False)
class BranchArrays:
    from_bus: np.ndarray
    to_bus: np.ndarray
    y_series: np.ndarray
    b_charging: np.ndarray
    shunt: np.ndarray

@dataclass(frozen=True, eq=False)
class Incidence:
    """Bus incidence of the dispatch entries, used to build injections and their derivatives"""
    gen_p: np.ndarray
    load: np.ndarray
    fixed_p: np.ndarray
    fixed_q: np.ndarray
    q_share: np.ndarray
    generator_buses: np.ndarray

@dataclass(frozen=True)
class Network:
    """Immutable grid description; bus/branch/generator references are 0-based indices"""
    base_mva: float
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    generators: Tuple[Generator, ...]
    loads: Tuple[Load, ...] = ()

    def __post_init__(self):
        if not self.base_mva > 0:
            raise CaseParseError("baseMVA must be positive", table="baseMVA")
        n = len(self.buses)
        slack = [i for i, bus in enumerate(self.buses) if bus.type == BusType.SLACK]
        if len(slack) > 1:
            raise CaseParseError("multiple slack buses", table="bus", row=slack[1] + 1, column=2)
        if not slack:
            raise CaseParseError("missing slack bus", table="bus", column=2)
        for i, bus in enumerate(self.buses):
            if bus.vmin > bus.vmax:
                raise CaseParseError("Vmin exceeds Vmax", table="bus", row=i + 1, column=13)
        for k, branch in enumerate(self.branches):
            for column, end in ((1, branch.from_bus), (2, branch.to_bus)):
                if not 0 <= end < n:
                    raise CaseParseError(f"unknown bus reference {end}", table="branch", row=k + 1, column=column)
        for g, gen in enumerate(self.generators):
            if not 0 <= gen.bus < n:
                raise CaseParseError(f"unknown bus reference {gen.bus}", table="gen", row=g + 1, column=1)
            if gen.pmin > gen.pmax:
                raise CaseParseError("Pmin exceeds Pmax", table="gen", row=g + 1, column=10)
            if gen.qmin > gen.qmax:
                raise CaseParseError("Qmin exceeds Qmax", table="gen", row=g + 1, column=5)
        for l, load in enumerate(self.loads):
            if load.pmin > load.pmax or load.qmin > load.qmax:
                raise CaseParseError("load bounds are not ordered", table="bus", row=load.bus + 1)
        if not any(gen.bus == slack[0] for gen in self.generators):
            raise CaseParseError("slack bus has no in-service generator", table="gen")

    @cached_property
    def slack(self) -> int:
        return next(i for i, bus in enumerate(self.buses) if bus.type == BusType.SLACK)

    @cached_property
    def slack_generator(self) -> int:
        """Index of the generator that absorbs the power imbalance"""
        return next(g for g, gen in enumerate(self.generators) if gen.bus == self.slack)

    @cached_property
    def dispatched_generators(self) -> Tuple[int, ...]:
        return tuple(g for g in range(len(self.generators)) if g != self.slack_generator)

    @cached_property
    def generator_buses(self) -> Tuple[int, ...]:
        return tuple(sorted({gen.bus for gen in self.generators}))

    @cached_property
    def pv(self) -> np.ndarray:
        return np.array([b for b in self.generator_buses if b != self.slack], dtype=np.int64)

    @cached_property
    def pq(self) -> np.ndarray:
        gen_buses = set(self.generator_buses)
        return np.array([b for b in range(len(self.buses)) if b not in gen_buses], dtype=np.int64)

    @cached_property
    def dispatchable_loads(self) -> Tuple[int, ...]:
        return tuple(l for l, load in enumerate(self.loads) if load.dispatchable)

    @cached_property
    def generators_at_bus(self) -> Dict[int, Tuple[int, ...]]:
        grouped: Dict[int, List[int]] = {}
        for g, gen in enumerate(self.generators):
            grouped.setdefault(gen.bus, []).append(g)
        return {bus: tuple(gens) for bus, gens in grouped.items()}

    @cached_property
    def branch_arrays(self) -> "BranchArrays":
        return BranchArrays(
            from_bus=np.array([br.from_bus for br in self.branches], dtype=np.int64),
            to_bus=np.array([br.to_bus for br in self.branches], dtype=np.int64),
            y_series=np.array([br.y_series for br in self.branches], dtype=np.complex128),
            b_charging=np.array([br.b_charging for br in self.branches], dtype=np.float64),
            shunt=np.array([complex(bus.gs, bus.bs) for bus in self.buses], dtype=np.complex128),
        )

    @cached_property
    def incidence(self) -> "Incidence":
        n = self.n_buses
        gens = self.dispatched_generators
        loads = self.dispatchable_loads
        gen_p = np.zeros((n, len(gens)))
        for j, g in enumerate(gens):
            gen_p[self.generators[g].bus, j] = 1.0
        load = np.zeros((n, len(loads)))
        for j, l in enumerate(loads):
            load[self.loads[l].bus, j] = 1.0
        fixed_p = np.zeros(n)
        fixed_q = np.zeros(n)
        for ld in self.loads:
            if not ld.dispatchable:
                fixed_p[ld.bus] += ld.p
                fixed_q[ld.bus] += ld.q
        q_share = np.zeros((len(self.generators), n))
        for bus, members in self.generators_at_bus.items():
            for g in members:
                q_share[g, bus] = 1.0 / len(members)
        return Incidence(
            gen_p=gen_p,
            load=load,
            fixed_p=fixed_p,
            fixed_q=fixed_q,
            q_share=q_share,
            generator_buses=np.array(self.generator_buses, dtype=np.int64),
        )

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def bus_index(self, bus_id: int) -> int:
        for i, bus in enumerate(self.buses):
            if bus.id == bus_id:
                return i
        raise KeyError(f"No bus with id {bus_id}")

    def branch_label(self, k: int) -> str:
        branch = self.branches[k]
        return f"{self.buses[branch.from_bus].id}-{self.buses[branch.to_bus].id}"

# ------------------------------------------------------------------
# MATPOWER parsing
# ------------------------------------------------------------------

_ASSIGNMENT = re.compile(r"mpc\.(\w+)\s*=\s*")
_COMMENT = re.compile(r"%[^\n]*")
_TABLE_COLUMNS = {"bus": 13, "gen": 10, "branch": 11}
_KNOWN_FIELDS = {"version", "baseMVA", "bus", "gen", "branch", "gencost"}

def _extract_fields(text: str) -> Dict[str, str]:
    body = _COMMENT.sub("", text)
    fields: Dict[str, str] = {}
    for match in _ASSIGNMENT.finditer(body):
        name = match.group(1)
        start = match.end()
        opener = body[start:start + 1]
        closer = {"[": "]", "{": "}"}.get(opener)
        if closer:
            end = body.find(closer, start)
            if end < 0:
                raise CaseParseError(f"unterminated table '{name}'", table=name)
            fields[name] = body[start + 1:end]
        else:
            end = body.find(";", start)
            fields[name] = body[start:end if end >= 0 else len(body)].strip()
    return fields

def _parse_table(name: str, raw: str, min_columns: int = 0) -> List[List[float]]:
    rows: List[List[float]] = []
    for line in re.split(r"[;\n]", raw):
        tokens = line.replace(",", " ").split()
        if not tokens:
            continue
        row_number = len(rows) + 1
        values = []
        for column, token in enumerate(tokens, start=1):
            try:
                values.append(float(token))
            except ValueError:
                raise CaseParseError(f"malformed value '{token}'", table=name, row=row_number, column=column)
        if len(values) < min_columns:
            raise CaseParseError(
                f"expected at least {min_columns} columns, found {len(values)}",
                table=name, row=row_number, column=len(values) + 1
            )
        rows.append(values)
    return rows

def _gencost_coefficients(row: List[float], row_number: int, base_mva: float) -> Cost:
    if len(row) < 4:
        raise CaseParseError("gencost row too short", table="gencost", row=row_number, column=len(row) + 1)
    if int(row[0]) != 2:
        raise CaseParseError("only polynomial cost model 2 is supported", table="gencost", row=row_number, column=1)
    n = int(row[3])
    if n > 3:
        raise CaseParseError("only up to quadratic cost polynomials are supported", table="gencost", row=row_number, column=4)
    coefficients = row[4:4 + n]
    if len(coefficients) < n:
        raise CaseParseError("missing cost coefficients", table="gencost", row=row_number, column=len(row) + 1)
    c2, c1, c0 = ([0.0] * (3 - n) + list(coefficients))
    # $/MW^2 and $/MW to per-unit powers
    return (c2 * base_mva ** 2, c1 * base_mva, c0)

def parse_case(text: str, options: Optional[NetworkOptions] = None) -> Network:
    """Parse MATPOWER case text into a per-unit Network"""
    options = options or NetworkOptions()
    fields = _extract_fields(text)

    for name in fields:
        if name not in _KNOWN_FIELDS:
            logger.warning(f"Ignoring unrecognized case field: mpc.{name}")
    for name in ("baseMVA", "bus", "gen", "branch", "gencost"):
        if name not in fields:
            raise CaseParseError(f"missing field mpc.{name}", table=name)

    try:
        base_mva = float(fields["baseMVA"])
    except ValueError:
        raise CaseParseError(f"malformed value '{fields['baseMVA']}'", table="baseMVA")

    bus_rows = _parse_table("bus", fields["bus"], _TABLE_COLUMNS["bus"])
    gen_rows = _parse_table("gen", fields["gen"], _TABLE_COLUMNS["gen"])
    branch_rows = _parse_table("branch", fields["branch"], _TABLE_COLUMNS["branch"])
    cost_rows = _parse_table("gencost", fields["gencost"])

    index_of: Dict[int, int] = {}
    for r, row in enumerate(bus_rows, start=1):
        bus_id = int(row[0])
        if bus_id in index_of:
            raise CaseParseError(f"duplicate bus id {bus_id}", table="bus", row=r, column=1)
        if int(row[1]) not in (1, 2, 3, 4):
            raise CaseParseError(f"unknown bus type {int(row[1])}", table="bus", row=r, column=2)
        if int(row[1]) == BusType.ISOLATED:
            raise CaseParseError("isolated buses are not supported", table="bus", row=r, column=2)
        index_of[bus_id] = len(index_of)

    def lookup(bus_id: float, table: str, row: int, column: int) -> int:
        try:
            return index_of[int(bus_id)]
        except KeyError:
            raise CaseParseError(f"unknown bus reference {int(bus_id)}", table=table, row=row, column=column)

    if len(cost_rows) < len(gen_rows):
        raise CaseParseError(
            f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators", table="gencost"
        )
    if len(cost_rows) > len(gen_rows):
        logger.warning("Ignoring gencost rows beyond the generator count (reactive power costs)")

    generators: List[Generator] = []
    for r, (row, cost_row) in enumerate(zip(gen_rows, cost_rows), start=1):
        cost = _gencost_coefficients(cost_row, r, base_mva)
        if row[7] <= 0:
            logger.debug(f"Dropping out-of-service generator in gen row {r}")
            continue
        generators.append(Generator(
            bus=lookup(row[0], "gen", r, 1),
            p=row[1] / base_mva,
            vg=row[5],
            pmin=row[9] / base_mva,
            pmax=row[8] / base_mva,
            qmin=row[4] / base_mva,
            qmax=row[3] / base_mva,
            cost=cost,
        ))

    gen_buses = {gen.bus for gen in generators}
    buses: List[Bus] = []
    loads: List[Load] = []
    for r, row in enumerate(bus_rows, start=1):
        index = len(buses)
        bus_type = BusType(int(row[1]))
        if bus_type == BusType.PV and index not in gen_buses:
            logger.warning(f"Bus {int(row[0])} is PV but has no in-service generator; treating it as PQ")
            bus_type = BusType.PQ
        elif bus_type == BusType.PQ and index in gen_buses:
            logger.warning(f"Bus {int(row[0])} carries a generator; treating it as PV")
            bus_type = BusType.PV
        buses.append(Bus(
            id=int(row[0]),
            type=bus_type,
            gs=row[4] / base_mva,
            bs=row[5] / base_mva,
            vmin=row[12],
            vmax=row[11],
        ))
        pd, qd = row[2] / base_mva, row[3] / base_mva
        if pd != 0.0 or qd != 0.0:
            loads.append(_make_load(index, pd, qd, options))

    branches: List[Branch] = []
    warned_taps = False
    for r, row in enumerate(branch_rows, start=1):
        if row[10] <= 0:
            logger.debug(f"Dropping out-of-service branch in branch row {r}")
            continue
        from_bus = lookup(row[0], "branch", r, 1)
        to_bus = lookup(row[1], "branch", r, 2)
        r_pu, x_pu = row[2], row[3]
        if r_pu == 0.0 and x_pu == 0.0:
            raise CaseParseError("zero branch impedance", table="branch", row=r, column=4)
        if not warned_taps and ((row[8] not in (0.0, 1.0)) or row[9] != 0.0):
            logger.warning("Ignoring transformer tap ratios and phase shifts (modelled as plain lines)")
            warned_taps = True
        branches.append(Branch(
            from_bus=from_bus,
            to_bus=to_bus,
            y_series=1.0 / complex(r_pu, x_pu),
            b_charging=row[4],
        ))

    network = Network(
        base_mva=base_mva,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
    )
    logger.debug(
        f"Parsed case: {network.n_buses} buses, {network.n_branches} branches, "
        f"{len(generators)} generators, {len(loads)} loads"
    )
    return network

def _make_load(bus: int, pd: float, qd: float, options: NetworkOptions) -> Load:
    if not options.dispatchable_loads:
        return Load(bus=bus, p=pd, q=qd, pmin=pd, pmax=pd, qmin=qd, qmax=qd)
    lo, hi = options.load_bounds
    p_bounds = sorted((lo * pd, hi * pd))
    q_bounds = sorted((lo * qd, hi * qd))
    return Load(
        bus=bus, p=pd, q=qd, dispatchable=True,
        pmin=p_bounds[0], pmax=p_bounds[1], qmin=q_bounds[0], qmax=q_bounds[1],
        cost=options.load_cost,
    )

def load_case(path: Union[str, Path], options: Optional[NetworkOptions] = None) -> Network:
    """Read and parse a MATPOWER case file"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CaseParseError(f"cannot read case file {path}: {e.strerror or e}")
    logger.info(f"Loaded case file: {path}")
    return parse_case(text, options)

# ------------------------------------------------------------------
# Dispatch and its box
# ------------------------------------------------------------------

def _frozen_array(values: Sequence[float]) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array

@dataclass(frozen=True, eq=False)
class Dispatch:
    """Controllable operating point x = (P_g, |V|_g, P_l, Q_l), per-unit.

    ``p_g`` follows ``Network.dispatched_generators``, ``v_g`` follows
    ``Network.generator_buses`` and ``p_l``/``q_l`` follow
    ``Network.dispatchable_loads``.
    """
    p_g: np.ndarray
    v_g: np.ndarray
    p_l: np.ndarray = field(default_factory=lambda: np.zeros(0))
    q_l: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("p_g", "v_g", "p_l", "q_l"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))

    @property
    def sizes(self) -> Tuple[int, int, int]:
        return len(self.p_g), len(self.v_g), len(self.p_l)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.p_g, self.v_g, self.p_l, self.q_l])

    @classmethod
    def from_flat(cls, flat: np.ndarray, sizes: Tuple[int, int, int]) -> "Dispatch":
        n_pg, n_vg, n_l = sizes
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (n_pg + n_vg + 2 * n_l,):
            raise ValueError(f"flat dispatch has shape {flat.shape}, expected {(n_pg + n_vg + 2 * n_l,)}")
        return cls(
            p_g=flat[:n_pg],
            v_g=flat[n_pg:n_pg + n_vg],
            p_l=flat[n_pg + n_vg:n_pg + n_vg + n_l],
            q_l=flat[n_pg + n_vg + n_l:],
        )

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            "p_g": self.p_g.tolist(),
            "v_g": self.v_g.tolist(),
            "p_l": self.p_l.tolist(),
            "q_l": self.q_l.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> "Dispatch":
        return cls(
            p_g=data["p_g"],
            v_g=data["v_g"],
            p_l=data.get("p_l", []),
            q_l=data.get("q_l", []),
        )

@dataclass(frozen=True, eq=False)
class DispatchBox:
    """The dispatch domain: per-entry bounds in ``Dispatch.flatten()`` order.

    Entries with equal bounds are frozen at that value and excluded from the
    unconstrained coordinate vector; the remaining entries satisfy lower < upper.
    """
    lower: np.ndarray
    upper: np.ndarray
    sizes: Tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "lower", _frozen_array(self.lower))
        object.__setattr__(self, "upper", _frozen_array(self.upper))
        if self.lower.shape != self.upper.shape:
            raise ValueError("box bounds differ in length")
        if np.any(self.lower > self.upper):
            raise ValueError("box lower bound exceeds upper bound")

    @cached_property
    def frozen(self) -> np.ndarray:
        return self.lower == self.upper

    @cached_property
    def free(self) -> np.ndarray:
        return ~self.frozen

    @property
    def dimension(self) -> int:
        """Length of the unconstrained coordinate vector"""
        return int(self.free.sum())

    @property
    def width(self) -> np.ndarray:
        return (self.upper - self.lower)[self.free]

    def nudge_inside(self, dispatch: Dispatch, margin: float = 1e-3) -> Dispatch:
        """Clip a dispatch to the box, keeping free entries a relative margin away from the bounds"""
        flat = dispatch.flatten().copy()
        lower, upper = self.lower[self.free], self.upper[self.free]
        gap = margin * (upper - lower)
        flat[self.free] = np.clip(flat[self.free], lower + gap, upper - gap)
        flat[self.frozen] = self.lower[self.frozen]
        return Dispatch.from_flat(flat, self.sizes)

def dispatch_box(network: Network) -> DispatchBox:
    """Assemble the box from generator P/|V| limits and dispatchable-load bounds"""
    gens = [network.generators[g] for g in network.dispatched_generators]
    loads = [network.loads[l] for l in network.dispatchable_loads]
    vbuses = [network.buses[b] for b in network.generator_buses]
    lower = (
        [gen.pmin for gen in gens]
        + [bus.vmin for bus in vbuses]
        + [load.pmin for load in loads]
        + [load.qmin for load in loads]
    )
    upper = (
        [gen.pmax for gen in gens]
        + [bus.vmax for bus in vbuses]
        + [load.pmax for load in loads]
        + [load.qmax for load in loads]
    )
    box = DispatchBox(lower=lower, upper=upper, sizes=(len(gens), len(vbuses), len(loads)))
    if np.any(box.frozen):
        logger.debug(f"Freezing {int(box.frozen.sum())} dispatch entries with equal bounds")
    return box

def nominal_dispatch(network: Network) -> Dispatch:
    """Setpoints as written in the case file (not necessarily inside the box)"""
    vg = []
    for bus in network.generator_buses:
        vg.append(network.generators[network.generators_at_bus[bus][0]].vg)
    return Dispatch(
        p_g=[network.generators[g].p for g in network.dispatched_generators],
        v_g=vg,
        p_l=[network.loads[l].p for l in network.dispatchable_loads],
        q_l=[network.loads[l].q for l in network.dispatchable_loads],
    )

def to_unconstrained(dispatch: Dispatch, box: DispatchBox) -> np.ndarray:
    """Scaled logit of the free entries: z = logit((d - lower) / (upper - lower))"""
    flat = dispatch.flatten()
    if flat.shape != box.lower.shape:
        raise ValueError(f"dispatch length {flat.shape[0]} does not match box length {box.lower.shape[0]}")
    lower = box.lower[box.free]
    fraction = (flat[box.free] - lower) / box.width
    outside = np.flatnonzero(~((fraction > 0.0) & (fraction < 1.0)))
    if outside.size:
        entry = int(np.flatnonzero(box.free)[outside[0]])
        raise DispatchBoundsError(
            f"dispatch entry {entry} = {flat[entry]!r} is not strictly inside "
            f"[{box.lower[entry]!r}, {box.upper[entry]!r}]; nudge it inside first"
        )
    return logit(fraction)

def from_unconstrained(z: np.ndarray, box: DispatchBox) -> Dispatch:
    """Inverse of to_unconstrained; the result is strictly inside the box for any finite z"""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (box.dimension,):
        raise ValueError(f"z has shape {z.shape}, expected {(box.dimension,)}")
    lower, upper = box.lower[box.free], box.upper[box.free]
    values = lower + box.width * expit(z)
    values = np.clip(values, np.nextafter(lower, upper), np.nextafter(upper, lower))
    flat = box.lower.copy()
    flat[box.free] = values
    return Dispatch.from_flat(flat, box.sizes)

def unconstrained_jacobian(dispatch: Dispatch, box: DispatchBox) -> np.ndarray:
    """d(free physical entries)/dz at a dispatch, a diagonal returned as a vector"""
    fraction = (dispatch.flatten()[box.free] - box.lower[box.free]) / box.width
    return box.width * fraction * (1.0 - fraction)

def sample_uniform(box: DispatchBox, rng: np.random.Generator) -> Dispatch:
    """Uniform draw over the box in physical coordinates"""
    flat = box.lower.copy()
    free = box.free
    flat[free] = box.lower[free] + box.width * rng.random(box.dimension)
    # rng.random() can return exactly 0
    return box.nudge_inside(Dispatch.from_flat(flat, box.sizes), margin=1e-12)
