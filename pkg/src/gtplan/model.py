"""Domain model for a planning case: network devices, plants, candidate
projects, demand blocks, horizon and cost preprocessing.

All types are frozen dataclasses and numpy payloads are marked read-only, so
a validated case can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from gtplan.errors import DataError

Status = Literal["existing", "candidate"]

DURATION_SUM_TOL = 1e-9
FRACTION_SUM_TOL = 1e-9


def _freeze(arr) -> np.ndarray:
    out = np.asarray(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Bus:
    id: str
    name: str = ""


@dataclass(frozen=True)
class Circuit:
    """Transmission circuit or transformer.

    ``susceptance`` is per-unit, ``rating`` in MW.  Flow orientation pairs
    with the incidence convention (+1 at from_bus): a positive solved flow
    denotes power arriving at the from_bus side.
    """

    id: str
    from_bus: str
    to_bus: str
    susceptance: float
    rating: float
    status: Status = "existing"
    kind: Literal["line", "transformer"] = "line"


@dataclass(frozen=True)
class HydroPlant:
    """Reservoir hydro plant.  Volumes in hm3, energies in MWh.

    ``production_coefficient`` converts turbined volume to energy (MWh/hm3);
    ``max_block_power`` caps the plant's output within any demand block (MW).
    ``upstream_ids`` lists plants whose releases (turbined + spilled) enter
    this reservoir.
    """

    id: str
    bus: str
    max_storage: float
    max_turbining: float
    production_coefficient: float
    max_block_power: float
    initial_storage: float = 0.0
    upstream_ids: tuple[str, ...] = ()
    status: Status = "existing"


@dataclass(frozen=True)
class ThermalPlant:
    id: str
    bus: str
    capacity: float           # MW
    variable_cost: float      # $/MWh
    status: Status = "existing"


@dataclass(frozen=True)
class RenewablePlant:
    """Non-dispatchable plant described by per-scenario production (MW),
    indexed (stage, block, scenario)."""

    id: str
    bus: str
    production: np.ndarray
    status: Status = "existing"

    def __post_init__(self):
        object.__setattr__(self, "production", _freeze(self.production))


@dataclass(frozen=True)
class DemandBlock:
    """Intra-stage load segment: duration as a fraction of the stage, and the
    per-bus load in MW indexed (stage, bus)."""

    index: int
    duration_fraction: float
    loads: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "loads", _freeze(self.loads))


@dataclass(frozen=True)
class CandidateProject:
    """A buildable project tied to one candidate device.

    ``overnight_cost`` is either total dollars (cost_basis="total") or $/kW
    applied to ``capacity_mw`` (cost_basis="per_kw").  ``payment_schedule``
    spreads the outlay over construction years and is present-valued at
    ``wacc``; ``capex_multiplier_per_stage`` scales the cost by build stage
    (technology learning curves).  No end-of-horizon salvage is credited.
    """

    id: str
    kind: Literal["hydro", "thermal", "renewable", "circuit"]
    target_device_id: str
    overnight_cost: float
    capacity_mw: float = 0.0
    cost_basis: Literal["total", "per_kw"] = "total"
    payment_schedule: tuple[float, ...] = (1.0,)
    lifetime: int = 30
    wacc: float = 0.0
    earliest_stage: int = 0
    capex_multiplier_per_stage: tuple[float, ...] = ()


@dataclass(frozen=True)
class LogicConstraint:
    """exclusive: at most one of the projects is ever built.
    associated: the two projects enter in the same stage or not at all.
    precedence: the first project must enter no later than the second."""

    kind: Literal["exclusive", "associated", "precedence"]
    project_ids: tuple[str, ...]


@dataclass(frozen=True)
class InflowModel:
    """Lateral-inflow model: per-stage mean/std/lag-1 correlation per hydro,
    plus the spatial correlation of the standardized residuals.

    Arrays are indexed (stage, hydro); ``serial_correlation[t]`` conditions
    stage t+1 on stage t.  ``spatial_correlation`` is (hydro, hydro),
    symmetric PSD with unit diagonal.
    """

    mean: np.ndarray
    std: np.ndarray
    serial_correlation: np.ndarray
    spatial_correlation: np.ndarray
    degenerate_hydros: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("mean", "std", "serial_correlation", "spatial_correlation"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))

    @property
    def n_hydros(self) -> int:
        return self.mean.shape[1] if self.mean.ndim == 2 else 0

    @property
    def n_stages(self) -> int:
        return self.mean.shape[0] if self.mean.ndim == 2 else 0


@dataclass(frozen=True)
class PlanningCase:
    """Immutable description of the whole planning problem."""

    name: str
    buses: tuple[Bus, ...]
    circuits: tuple[Circuit, ...]
    hydros: tuple[HydroPlant, ...]
    thermals: tuple[ThermalPlant, ...]
    renewables: tuple[RenewablePlant, ...]
    demand: tuple[DemandBlock, ...]
    candidates: tuple[CandidateProject, ...]
    logic_constraints: tuple[LogicConstraint, ...] = ()
    horizon: int = 1
    scenario_count: int = 1
    branching_count: int = 1
    deficit_cost: float = 1000.0       # $/MWh
    stage_discount_rate: float = 0.0   # per stage
    stage_hours: float = 1.0           # hours represented by one stage
    start_year: int = 2022
    stages_per_year: int = 1
    inflow: InflowModel | None = None
    initial_inflows: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "initial_inflows", _freeze(self.initial_inflows))

    @property
    def n_blocks(self) -> int:
        return len(self.demand)

    @property
    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def hydro_index(self) -> dict[str, int]:
        return {h.id: i for i, h in enumerate(self.hydros)}

    def block_hours(self) -> np.ndarray:
        return np.array([blk.duration_fraction * self.stage_hours for blk in self.demand])

    def stage_year(self, t: int) -> int:
        return self.start_year + t // self.stages_per_year

    def device_of(self, project: CandidateProject):
        pools = {"hydro": self.hydros, "thermal": self.thermals,
                 "renewable": self.renewables, "circuit": self.circuits}
        for dev in pools[project.kind]:
            if dev.id == project.target_device_id:
                return dev
        raise DataError(f"project {project.id}: no {project.kind} device "
                        f"{project.target_device_id!r}")


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def passed(self) -> bool:
        return not self.violations

    def messages(self) -> list[str]:
        return [str(v) for v in self.violations]


def _cascade_cycle(hydros: Iterable[HydroPlant]) -> list[str] | None:
    """Return one cycle in the upstream graph, or None if acyclic (DFS)."""
    graph = {h.id: list(h.upstream_ids) for h in hydros}
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(node: str) -> list[str] | None:
        color[node] = 1
        stack.append(node)
        for nxt in graph.get(node, ()):
            if nxt not in graph:
                continue
            state = color.get(nxt, 0)
            if state == 1:
                return stack[stack.index(nxt):] + [nxt]
            if state == 0:
                found = visit(nxt)
                if found:
                    return found
        color[node] = 2
        stack.pop()
        return None

    for start in graph:
        if color.get(start, 0) == 0:
            cycle = visit(start)
            if cycle:
                return cycle
    return None


def validate_case(case: PlanningCase) -> ValidationReport:
    """Check every documented invariant; violations are data, not exceptions.

    A case that passes here is accepted by every downstream builder.  The
    function is pure and idempotent.
    """
    out: list[Violation] = []

    def bad(path: str, message: str) -> None:
        out.append(Violation(path, message))

    if case.horizon < 1:
        bad("horizon", f"must be >= 1, got {case.horizon}")
    if case.scenario_count < 1:
        bad("scenario_count", f"must be >= 1, got {case.scenario_count}")
    if case.branching_count < 1:
        bad("branching_count", f"must be >= 1, got {case.branching_count}")
    if case.deficit_cost <= 0:
        bad("deficit_cost", "must be positive")
    if case.stage_hours <= 0:
        bad("stage_hours", "must be positive")
    if case.stage_discount_rate < 0:
        bad("stage_discount_rate", "must be nonnegative")
    if not case.demand:
        bad("demand", "at least one demand block required")

    bus_ids = [b.id for b in case.buses]
    if len(set(bus_ids)) != len(bus_ids):
        bad("buses", "duplicate bus ids")
    known_buses = set(bus_ids)

    seen_circ: set[str] = set()
    for k, c in enumerate(case.circuits):
        path = f"circuits[{k}]({c.id})"
        if c.id in seen_circ:
            bad(path, "duplicate circuit id")
        seen_circ.add(c.id)
        if c.from_bus == c.to_bus:
            bad(path, "self-loop circuit")
        for end in (c.from_bus, c.to_bus):
            if end not in known_buses:
                bad(path, f"unknown bus {end!r}")
        if c.susceptance <= 0:
            bad(path, f"susceptance must be positive, got {c.susceptance}")
        if c.rating <= 0:
            bad(path, f"rating must be positive, got {c.rating}")

    hydro_ids = set()
    for i, h in enumerate(case.hydros):
        path = f"hydros[{i}]({h.id})"
        if h.id in hydro_ids:
            bad(path, "duplicate hydro id")
        hydro_ids.add(h.id)
        if h.bus not in known_buses:
            bad(path, f"unknown bus {h.bus!r}")
        if h.max_storage < 0:
            bad(path, "max_storage must be nonnegative")
        if h.max_turbining <= 0:
            bad(path, "max_turbining must be positive")
        if h.production_coefficient <= 0:
            bad(path, "production_coefficient must be positive")
        if h.max_block_power <= 0:
            bad(path, "max_block_power must be positive")
        if not 0 <= h.initial_storage <= h.max_storage:
            bad(path, f"initial_storage {h.initial_storage} outside [0, {h.max_storage}]")
        for up in h.upstream_ids:
            if up not in {x.id for x in case.hydros}:
                bad(path, f"unknown upstream hydro {up!r}")
    cycle = _cascade_cycle(case.hydros)
    if cycle:
        bad("hydros", "cyclic cascade: " + " -> ".join(cycle))

    seen_th = set()
    for j, th in enumerate(case.thermals):
        path = f"thermals[{j}]({th.id})"
        if th.id in seen_th:
            bad(path, "duplicate thermal id")
        seen_th.add(th.id)
        if th.bus not in known_buses:
            bad(path, f"unknown bus {th.bus!r}")
        if th.capacity <= 0:
            bad(path, "capacity must be positive")
        if th.variable_cost < 0:
            bad(path, "variable_cost must be nonnegative")

    for r, re in enumerate(case.renewables):
        path = f"renewables[{r}]({re.id})"
        if re.bus not in known_buses:
            bad(path, f"unknown bus {re.bus!r}")
        want = (case.horizon, len(case.demand), case.scenario_count)
        if re.production.shape != want:
            bad(path, f"production shaped {re.production.shape}, expected {want}")
        elif np.any(re.production < 0):
            bad(path, "production values must be nonnegative")

    total = sum(blk.duration_fraction for blk in case.demand)
    if case.demand and abs(total - 1.0) > DURATION_SUM_TOL:
        bad("demand", f"block durations must sum to 1, got {total!r}")
    for b, blk in enumerate(case.demand):
        path = f"demand[{b}]"
        if not 0 < blk.duration_fraction <= 1:
            bad(path, f"duration_fraction {blk.duration_fraction} outside (0, 1]")
        want = (case.horizon, len(case.buses))
        if blk.loads.shape != want:
            bad(path, f"loads shaped {blk.loads.shape}, expected {want}")
        elif np.any(blk.loads < 0):
            bad(path, "loads must be nonnegative")

    device_status = {}
    for group in (case.hydros, case.thermals, case.renewables, case.circuits):
        for dev in group:
            device_status[dev.id] = dev.status
    claimed: dict[str, str] = {}
    proj_ids = set()
    for p, proj in enumerate(case.candidates):
        path = f"candidates[{p}]({proj.id})"
        if proj.id in proj_ids:
            bad(path, "duplicate project id")
        proj_ids.add(proj.id)
        try:
            dev = case.device_of(proj)
        except DataError:
            bad(path, f"no {proj.kind} device {proj.target_device_id!r}")
            dev = None
        if dev is not None:
            if dev.status != "candidate":
                bad(path, f"target device {dev.id!r} is not flagged candidate")
            owner = claimed.get(dev.id)
            if owner:
                bad(path, f"device {dev.id!r} already claimed by project {owner!r}")
            claimed[dev.id] = proj.id
        if abs(sum(proj.payment_schedule) - 1.0) > FRACTION_SUM_TOL:
            bad(path, f"payment schedule sums to {sum(proj.payment_schedule)!r}, expected 1")
        if proj.lifetime <= 0:
            bad(path, "lifetime must be positive")
        if not 0 <= proj.earliest_stage < case.horizon:
            bad(path, f"earliest_stage {proj.earliest_stage} outside horizon")
        if proj.overnight_cost < 0:
            bad(path, "overnight_cost must be nonnegative")
        if proj.cost_basis == "per_kw" and proj.capacity_mw <= 0:
            bad(path, "per-kW costing needs a positive capacity_mw")
        mult = proj.capex_multiplier_per_stage
        if mult and len(mult) != case.horizon:
            bad(path, f"capex multipliers length {len(mult)} != horizon {case.horizon}")
    for dev_id, status in device_status.items():
        if status == "candidate" and dev_id not in claimed:
            bad(f"devices({dev_id})", "candidate device has no project that can build it")

    for c, lc in enumerate(case.logic_constraints):
        path = f"logic_constraints[{c}]"
        if lc.kind == "exclusive" and len(lc.project_ids) < 2:
            bad(path, "exclusive constraint needs at least 2 projects")
        if lc.kind in ("associated", "precedence") and len(lc.project_ids) != 2:
            bad(path, f"{lc.kind} constraint needs exactly 2 projects")
        for pid in lc.project_ids:
            if pid not in proj_ids:
                bad(path, f"unknown project {pid!r}")

    n_hydro = len(case.hydros)
    if n_hydro and case.inflow is None:
        bad("inflow", "case has hydro plants but no inflow model")
    if case.inflow is not None:
        im = case.inflow
        if im.mean.shape != (case.horizon, n_hydro):
            bad("inflow.mean", f"shaped {im.mean.shape}, expected {(case.horizon, n_hydro)}")
        for name in ("std", "serial_correlation"):
            if getattr(im, name).shape != im.mean.shape:
                bad(f"inflow.{name}", "shape differs from inflow.mean")
        if im.mean.shape == im.std.shape and np.any(im.std < 0):
            bad("inflow.std", "standard deviations must be nonnegative")
        if im.serial_correlation.shape == im.mean.shape and \
                np.any(np.abs(im.serial_correlation) > 1 + 1e-12):
            bad("inflow.serial_correlation", "entries must lie in [-1, 1]")
        sc = im.spatial_correlation
        if sc.shape != (n_hydro, n_hydro):
            bad("inflow.spatial_correlation", f"shaped {sc.shape}, expected {(n_hydro, n_hydro)}")
        elif n_hydro:
            if not np.allclose(sc, sc.T, atol=1e-10):
                bad("inflow.spatial_correlation", "matrix is not symmetric")
            elif np.any(np.abs(np.diag(sc) - 1.0) > 1e-9):
                bad("inflow.spatial_correlation", "diagonal must be 1")
            elif np.linalg.eigvalsh(sc).min() < -1e-8:
                bad("inflow.spatial_correlation", "matrix is not positive semidefinite")
    if case.initial_inflows.shape != (n_hydro,):
        bad("initial_inflows", f"shaped {case.initial_inflows.shape}, expected {(n_hydro,)}")
    elif np.any(case.initial_inflows < 0):
        bad("initial_inflows", "inflows must be nonnegative")

    return ValidationReport(tuple(out))


def payment_present_value(schedule: Iterable[float], wacc: float) -> float:
    """Present value, at construction start, of payment fractions made one
    per construction year (first payment immediate)."""
    return sum(q / (1.0 + wacc) ** y for y, q in enumerate(schedule))


def investment_coefficient(case: PlanningCase, project: CandidateProject,
                           build_stage: int) -> float:
    """Objective cost of bringing the project online at ``build_stage``.

    Overnight cost (scaled by the stage's capex multiplier) is converted to a
    present-valued outlay through the payment schedule at the project's wacc,
    then discounted to the horizon start with the case's per-stage rate.
    """
    if build_stage < project.earliest_stage:
        raise DataError(f"project {project.id}: build stage {build_stage} precedes "
                        f"earliest stage {project.earliest_stage}")
    if not 0 <= build_stage < case.horizon:
        raise DataError(f"project {project.id}: build stage {build_stage} outside horizon")
    base = project.overnight_cost
    if project.cost_basis == "per_kw":
        base *= project.capacity_mw * 1000.0
    mult = project.capex_multiplier_per_stage
    if mult:
        base *= mult[build_stage]
    base *= payment_present_value(project.payment_schedule, project.wacc)
    base /= (1.0 + case.stage_discount_rate) ** build_stage
    return base
