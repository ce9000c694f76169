"""Stochastic operation engine (dual dynamic programming).

Each stage solves one LP holding the stage dispatch plus, for every
conditioned next-stage inflow branch l = 1..L, the branch inflow values
(fixed by identity rows whose duals price the inflow state) and a
future-cost variable bounded below by the accumulated hyperplanes.  The
backward recursion adds one hyperplane per visited state per sweep; the
forward simulation walks sampled inflow paths and records the capacity-row
duals every plan evaluation needs.

Stage and scenario parallelism is thread-based on disjoint LPs with a fixed
reduction order, so results are bit-identical for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from gtplan.errors import DataError, GtplanError
from gtplan.inflow import condition_next_detailed, conditioning_slope, sample_noise
from gtplan.investment import TrialPlan
from gtplan.model import PlanningCase
from gtplan.network import (
    DEFAULT_M_FALLBACK,
    DcRowIndex,
    NetworkTopology,
    build_topology,
    emit_dc_rows,
)
from gtplan.solver import (
    EQ,
    GE,
    INF,
    LE,
    LinearProgram,
    Solver,
    SolveStatus,
    REFERENCE,
)


@dataclass(frozen=True)
class StageState:
    """Dynamic-programming state at the start of a stage."""

    storage: np.ndarray
    inflow: np.ndarray
    stage: int
    scenario: int = 0


@dataclass(frozen=True)
class Hyperplane:
    """One supporting plane of a stage's cost-to-go:
    value >= storage_coeffs . v + inflow_coeffs . a + constant."""

    stage: int
    storage_coeffs: np.ndarray
    inflow_coeffs: np.ndarray
    constant: float

    def value_at(self, storage: np.ndarray, inflow: np.ndarray) -> float:
        return float(self.storage_coeffs @ storage + self.inflow_coeffs @ inflow
                     + self.constant)


class FcfPool:
    """Per-stage collections of cost-to-go hyperplanes (empty past the horizon)."""

    def __init__(self, horizon: int):
        self.horizon = horizon
        self.planes: dict[int, list[Hyperplane]] = {t: [] for t in range(horizon)}

    def add(self, plane: Hyperplane) -> None:
        self.planes[plane.stage].append(plane)

    def at(self, stage: int) -> list[Hyperplane]:
        if stage >= self.horizon:
            return []
        return self.planes[stage]

    def total(self) -> int:
        return sum(len(v) for v in self.planes.values())


@dataclass
class StageDuals:
    """Duals of the rows the investment cut formulas read.

    Paired one-sided rows (candidate voltage-law and flow-limit pairs) are
    reported as upper-row dual minus lower-row dual, which is the sign that
    makesd(objective)/d(build fraction) come out as
    -M * kvl + rating * flow per block.
    """

    storage: np.ndarray            # (I,)
    inflow: np.ndarray             # (I,) summed over branches
    cand_storage_cap: np.ndarray   # (I,)
    cand_turbine_cap: np.ndarray   # (I,)
    cand_thermal_cap: np.ndarray   # (J, B)
    bus_balance: np.ndarray        # (N, B)
    cand_kvl: np.ndarray           # (K, B)
    cand_flow: np.ndarray          # (K, B)


@dataclass
class StageDispatch:
    v_next: np.ndarray             # (I,)
    turbined: np.ndarray           # (I,)
    spill: np.ndarray              # (I,)
    hydro_power: np.ndarray        # (I, B)
    thermal_power: np.ndarray      # (J, B)
    flows: np.ndarray              # (K, B)
    deficit: np.ndarray            # (N, B)
    curtailment: np.ndarray        # (N, B)


@dataclass
class ForwardRecord:
    """One simulated scenario: visited states, stage costs, duals, dispatch."""

    scenario: int
    states: list[StageState]
    immediate_costs: np.ndarray    # (T,) undiscounted stage cost
    duals: list[StageDuals]
    dispatch: list[StageDispatch]

    def discounted_total(self, beta: float) -> float:
        weights = beta ** np.arange(len(self.immediate_costs))
        return float(self.immediate_costs @ weights)


@dataclass(frozen=True)
class SddpControls:
    max_iterations: int = 10
    convergence_z: float = 1.96
    convergence_slack: float = 1e-9   # relative slack added to the CI test
    workers: int = 1


@dataclass
class ConvergenceCheck:
    converged: bool
    lower: float
    sample_mean: float
    stderr: float


@dataclass
class SddpResult:
    expected_cost: float
    cost_std: float
    lower_bound: float
    iterations: int
    converged: bool
    records: list[ForwardRecord]
    fcf: FcfPool
    clamp_events: int


class OperationContext:
    """Precomputed case arrays shared by every stage LP of one evaluation."""

    def __init__(self, case: PlanningCase, m_fallback: float = DEFAULT_M_FALLBACK):
        self.case = case
        self.topo: NetworkTopology = build_topology(case, m_fallback)
        self.n_b = len(case.demand)
        self.block_hours = case.block_hours()
        self.beta = 1.0 / (1.0 + case.stage_discount_rate)
        bus_pos = case.bus_index
        self.hydro_bus = np.array([bus_pos[h.bus] for h in case.hydros], dtype=int)
        self.thermal_bus = np.array([bus_pos[t.bus] for t in case.thermals], dtype=int)
        self.renew_bus = np.array([bus_pos[r.bus] for r in case.renewables], dtype=int)
        self.v_max = np.array([h.max_storage for h in case.hydros])
        self.u_max = np.array([h.max_turbining for h in case.hydros])
        self.phi = np.array([h.production_coefficient for h in case.hydros])
        self.e_max = np.array([h.max_block_power for h in case.hydros])
        self.v_init = np.array([h.initial_storage for h in case.hydros])
        hydro_pos = case.hydro_index
        self.upstream = [tuple(hydro_pos[u] for u in h.upstream_ids) for h in case.hydros]
        self.g_max = np.array([t.capacity for t in case.thermals])
        self.g_cost = np.array([t.variable_cost for t in case.thermals])
        # loads per (stage, block, bus)
        self.loads = np.stack([blk.loads for blk in case.demand], axis=1) \
            if case.demand else np.zeros((case.horizon, 0, len(case.buses)))
        # project column per device, -1 when the device is existing
        ids = [p.id for p in case.candidates]
        self.hydro_proj = self._bind("hydro", case.hydros, ids)
        self.thermal_proj = self._bind("thermal", case.thermals, ids)
        self.renew_proj = self._bind("renewable", case.renewables, ids)
        self.circuit_proj = self._bind("circuit", case.circuits, ids)

    def _bind(self, kind, devices, project_ids) -> np.ndarray:
        out = np.full(len(devices), -1, dtype=int)
        for p, proj in enumerate(self.case.candidates):
            if proj.kind != kind:
                continue
            for d, dev in enumerate(devices):
                if dev.id == proj.target_device_id:
                    out[d] = p
        return out

    def availability(self, proj_cols: np.ndarray, plan: TrialPlan, t: int) -> np.ndarray:
        out = np.ones(len(proj_cols))
        for d, p in enumerate(proj_cols):
            if p >= 0:
                out[d] = plan.values[t, p] if plan.n_projects else 0.0
        return out

    @property
    def n_i(self) -> int:
        return len(self.case.hydros)

    @property
    def n_j(self) -> int:
        return len(self.case.thermals)


@dataclass
class StageIndex:
    """Variable and row positions inside one stage LP."""

    v_next: np.ndarray
    turbined: np.ndarray
    spill: np.ndarray
    hydro_power: np.ndarray        # (I, B)
    thermal_power: np.ndarray      # (J, B)
    flow: np.ndarray               # (K, B)
    theta: np.ndarray              # (N, B)
    deficit: np.ndarray            # (N, B)
    curtail: np.ndarray            # (N, B)
    branch_inflow: np.ndarray      # (L, I)
    future_cost: np.ndarray        # (L,)
    row_storage: np.ndarray        # (I,)
    row_cand_storage: np.ndarray   # (I,) -1 where existing
    row_cand_turbine: np.ndarray   # (I,)
    row_cand_thermal: np.ndarray   # (J, B) -1 where existing
    row_branch_inflow: np.ndarray  # (L, I)
    dc: list[DcRowIndex]
    n_openings: int


def build_stage_lp(ctx: OperationContext, plan: TrialPlan, t: int,
                   state: StageState, openings: np.ndarray | None,
                   fcf: FcfPool, scenario: int = 0,
                   ) -> tuple[LinearProgram, StageIndex]:
    """Assemble the LP of stage ``t`` at ``state``.

    ``openings`` holds the conditioned next-stage inflows, shaped (L, I);
    it must be None exactly at the final stage.  Capacities of candidate
    devices enter as rows scaled by the plan's build fraction so their duals
    are available to the investment cut.
    """
    case = ctx.case
    last = t == case.horizon - 1
    if openings is None and not last:
        raise DataError(f"stage {t}: conditioned inflow openings are required")
    n_i, n_j = ctx.n_i, ctx.n_j
    n_k = ctx.topo.n_circuits
    n_n = ctx.topo.n_buses
    n_b = ctx.n_b
    n_l = 0 if last else (openings.shape[0] if openings is not None else 0)
    hours = ctx.block_hours

    hydro_avail = ctx.availability(ctx.hydro_proj, plan, t)
    thermal_avail = ctx.availability(ctx.thermal_proj, plan, t)
    renew_avail = ctx.availability(ctx.renew_proj, plan, t)
    circuit_avail = ctx.availability(ctx.circuit_proj, plan, t)

    lp = LinearProgram(name=f"stage{t}")
    add = lp.add_variable

    v_next = np.array([
        add(f"v_{i}", 0.0, ctx.v_max[i] if ctx.hydro_proj[i] < 0 else INF)
        for i in range(n_i)])
    turb = np.array([
        add(f"u_{i}", 0.0, ctx.u_max[i] if ctx.hydro_proj[i] < 0 else INF)
        for i in range(n_i)])
    spill = np.array([add(f"s_{i}", 0.0, INF) for i in range(n_i)])
    hydro_power = np.array([
        [add(f"e_{i}_{b}", 0.0, ctx.e_max[i]) for b in range(n_b)]
        for i in range(n_i)]).reshape(n_i, n_b)
    thermal_power = np.array([
        [add(f"g_{j}_{b}", 0.0,
             ctx.g_max[j] if ctx.thermal_proj[j] < 0 else INF,
             obj=ctx.g_cost[j] * hours[b])
         for b in range(n_b)]
        for j in range(n_j)]).reshape(n_j, n_b)
    flow = np.array([
        [add(f"f_{k}_{b}", -ctx.topo.rating[k], ctx.topo.rating[k])
         if ctx.circuit_proj[k] < 0 else add(f"f_{k}_{b}", -INF, INF)
         for b in range(n_b)]
        for k in range(n_k)]).reshape(n_k, n_b)
    theta = np.array([
        [add(f"th_{n}_{b}", -INF, INF) for b in range(n_b)]
        for n in range(n_n)]).reshape(n_n, n_b)
    deficit = np.array([
        [add(f"def_{n}_{b}", 0.0, INF, obj=case.deficit_cost * hours[b])
         for b in range(n_b)]
        for n in range(n_n)]).reshape(n_n, n_b)
    curtail = np.array([
        [add(f"cur_{n}_{b}", 0.0, INF) for b in range(n_b)]
        for n in range(n_n)]).reshape(n_n, n_b)
    branch_inflow = np.array([
        [add(f"a_{l}_{i}", -INF, INF) for i in range(n_i)]
        for l in range(n_l)]).reshape(n_l, n_i)
    future = np.array([
        add(f"alpha_{l}", 0.0, INF, obj=ctx.beta / n_l) for l in range(n_l)])

    # storage balance: v_next + u + s - upstream releases = v_hat + a_hat
    row_storage = np.empty(n_i, dtype=int)
    for i in range(n_i):
        coeffs = {int(v_next[i]): 1.0, int(turb[i]): 1.0, int(spill[i]): 1.0}
        for up in ctx.upstream[i]:
            coeffs[int(turb[up])] = coeffs.get(int(turb[up]), 0.0) - 1.0
            coeffs[int(spill[up])] = coeffs.get(int(spill[up]), 0.0) - 1.0
        rhs = float(state.storage[i] + state.inflow[i])
        row_storage[i] = lp.add_row(coeffs, EQ, rhs, f"wb_{i}")

    # hydro energy link: sum_b hours_b * power_ib = phi_i * u_i
    for i in range(n_i):
        coeffs = {int(hydro_power[i, b]): float(hours[b]) for b in range(n_b)}
        coeffs[int(turb[i])] = -ctx.phi[i]
        lp.add_row(coeffs, EQ, 0.0, f"hp_{i}")

    row_cand_storage = np.full(n_i, -1, dtype=int)
    row_cand_turbine = np.full(n_i, -1, dtype=int)
    for i in range(n_i):
        if ctx.hydro_proj[i] >= 0:
            row_cand_storage[i] = lp.add_row({int(v_next[i]): 1.0}, LE,
                                             float(ctx.v_max[i] * hydro_avail[i]),
                                             f"vc_{i}")
            row_cand_turbine[i] = lp.add_row({int(turb[i]): 1.0}, LE,
                                             float(ctx.u_max[i] * hydro_avail[i]),
                                             f"uc_{i}")
    row_cand_thermal = np.full((n_j, n_b), -1, dtype=int)
    for j in range(n_j):
        if ctx.thermal_proj[j] >= 0:
            for b in range(n_b):
                row_cand_thermal[j, b] = lp.add_row(
                    {int(thermal_power[j, b]): 1.0}, LE,
                    float(ctx.g_max[j] * thermal_avail[j]), f"gc_{j}_{b}")

    dc_rows: list[DcRowIndex] = []
    for b in range(n_b):
        injections: dict[int, dict[int, float]] = {}

        def inject(bus: int, var: int, coeff: float = 1.0):
            injections.setdefault(bus, {})[var] = coeff

        for i in range(n_i):
            inject(int(ctx.hydro_bus[i]), int(hydro_power[i, b]))
        for j in range(n_j):
            inject(int(ctx.thermal_bus[j]), int(thermal_power[j, b]))
        for n in range(n_n):
            inject(n, int(deficit[n, b]))
            inject(n, int(curtail[n, b]), -1.0)
        net_load = ctx.loads[t, b].copy() if n_n else np.zeros(0)
        for r in range(len(case.renewables)):
            prod = float(case.renewables[r].production[t, b, scenario])
            net_load[ctx.renew_bus[r]] -= prod * renew_avail[r]
        dc_rows.append(emit_dc_rows(
            lp, ctx.topo,
            {k: int(flow[k, b]) for k in range(n_k)},
            {n: int(theta[n, b]) for n in range(n_n)},
            injections, net_load, circuit_avail, tag=f"_b{b}"))

    # conditioned inflow identities, one per branch and hydro
    row_branch_inflow = np.full((n_l, n_i), -1, dtype=int)
    for l in range(n_l):
        for i in range(n_i):
            row_branch_inflow[l, i] = lp.add_row(
                {int(branch_inflow[l, i]): 1.0}, EQ, float(openings[l, i]),
                f"cin_{l}_{i}")

    # future cost hyperplanes for each branch
    for plane_no, plane in enumerate(fcf.at(t + 1)):
        for l in range(n_l):
            coeffs = {int(future[l]): 1.0}
            for i in range(n_i):
                if plane.storage_coeffs[i] != 0.0:
                    coeffs[int(v_next[i])] = -float(plane.storage_coeffs[i])
                if plane.inflow_coeffs[i] != 0.0:
                    coeffs[int(branch_inflow[l, i])] = -float(plane.inflow_coeffs[i])
            lp.add_row(coeffs, GE, float(plane.constant), f"fcf_{plane_no}_{l}")

    idx = StageIndex(v_next, turb, spill, hydro_power, thermal_power, flow,
                     theta, deficit, curtail, branch_inflow, future,
                     row_storage, row_cand_storage, row_cand_turbine,
                     row_cand_thermal, row_branch_inflow, dc_rows, n_l)
    return lp, idx


def _immediate_cost(ctx: OperationContext, sol_x: np.ndarray, idx: StageIndex) -> float:
    hours = ctx.block_hours
    cost = 0.0
    for j in range(ctx.n_j):
        cost += ctx.g_cost[j] * float(sol_x[idx.thermal_power[j]] @ hours)
    n_n = ctx.topo.n_buses
    for n in range(n_n):
        cost += ctx.case.deficit_cost * float(sol_x[idx.deficit[n]] @ hours)
    return cost


def _extract_duals(ctx: OperationContext, duals: np.ndarray, idx: StageIndex) -> StageDuals:
    n_i, n_j = ctx.n_i, ctx.n_j
    n_k, n_n, n_b = ctx.topo.n_circuits, ctx.topo.n_buses, ctx.n_b
    storage = duals[idx.row_storage] if n_i else np.zeros(0)
    inflow = np.zeros(n_i)
    if idx.n_openings and n_i:
        inflow = duals[idx.row_branch_inflow].sum(axis=0)
    cand_v = np.zeros(n_i)
    cand_u = np.zeros(n_i)
    for i in range(n_i):
        if idx.row_cand_storage[i] >= 0:
            cand_v[i] = duals[idx.row_cand_storage[i]]
            cand_u[i] = duals[idx.row_cand_turbine[i]]
    cand_g = np.zeros((n_j, n_b))
    for j in range(n_j):
        for b in range(n_b):
            if idx.row_cand_thermal[j, b] >= 0:
                cand_g[j, b] = duals[idx.row_cand_thermal[j, b]]
    balance = np.zeros((n_n, n_b))
    kvl = np.zeros((n_k, n_b))
    fl = np.zeros((n_k, n_b))
    for b, dc in enumerate(idx.dc):
        for n, row in dc.balance.items():
            balance[n, b] = duals[row]
        for k, (up, dn) in dc.kvl_candidate.items():
            kvl[k, b] = duals[up] - duals[dn]
        for k, (up, dn) in dc.flow_candidate.items():
            fl[k, b] = duals[up] - duals[dn]
    return StageDuals(storage, inflow, cand_v, cand_u, cand_g, balance, kvl, fl)


def _extract_dispatch(sol_x: np.ndarray, idx: StageIndex) -> StageDispatch:
    pick = lambda arr: sol_x[arr] if arr.size else np.zeros(arr.shape)
    return StageDispatch(
        pick(idx.v_next), pick(idx.turbined), pick(idx.spill),
        pick(idx.hydro_power), pick(idx.thermal_power), pick(idx.flow),
        pick(idx.deficit), pick(idx.curtail))


def _solve_stage(ctx, plan, t, state, openings, fcf, scenario, solver):
    lp, idx = build_stage_lp(ctx, plan, t, state, openings, fcf, scenario)
    sol = solver.solve_lp(lp)
    if sol.status is not SolveStatus.OPTIMAL:
        raise GtplanError(
            f"stage {t} LP ended {sol.status.value}; the recourse structure "
            "makes this a bug, not data")
    return sol, idx


def _branch_noise(ctx: OperationContext, seed: int) -> np.ndarray:
    """Noise lattice: L spatially correlated draws per stage transition,
    shared by every scenario and sweep of one evaluation (fixed by the seed)."""
    t_count = ctx.case.horizon
    n_l = ctx.case.branching_count
    n_i = ctx.n_i
    if t_count < 2 or n_i == 0:
        return np.zeros((max(t_count - 1, 0), n_l, n_i))
    rng = np.random.default_rng([int(seed), 101])
    draws = sample_noise(ctx.case.inflow, (t_count - 1) * n_l, rng)
    return draws.reshape(t_count - 1, n_l, n_i)


def _openings_for(ctx, t, inflow, lattice):
    """Conditioned inflows for every branch of stage t's LP, with clamp masks."""
    n_l = ctx.case.branching_count
    n_i = ctx.n_i
    if n_i == 0 or ctx.case.inflow is None:
        return np.zeros((n_l, 0)), np.zeros((n_l, 0), dtype=bool)
    values = np.empty((n_l, n_i))
    clamps = np.empty((n_l, n_i), dtype=bool)
    for l in range(n_l):
        values[l], clamps[l] = condition_next_detailed(
            ctx.case.inflow, t, inflow, lattice[t][l])
    return values, clamps


def forward_pass(ctx: OperationContext, plan: TrialPlan, fcf: FcfPool,
                 seed: int, workers: int = 1,
                 solver: Solver = REFERENCE) -> tuple[list[ForwardRecord], np.ndarray, int]:
    """Simulate every scenario through the current policy.

    Returns the per-scenario records, the discounted total costs, and the
    count of clamped (negative conditioned inflow) events.  Scenario work is
    independent; the reduction order is fixed by scenario index.
    """
    case = ctx.case
    t_count, n_s = case.horizon, case.scenario_count
    lattice = _branch_noise(ctx, seed)
    choice_rng = np.random.default_rng([int(seed), 202])
    choices = choice_rng.integers(0, case.branching_count, size=(n_s, max(t_count - 1, 1)))

    def simulate(s: int) -> tuple[ForwardRecord, int]:
        storage = ctx.v_init.copy()
        inflow = np.asarray(case.initial_inflows, dtype=float).copy()
        states: list[StageState] = []
        duals: list[StageDuals] = []
        dispatch: list[StageDispatch] = []
        costs = np.zeros(t_count)
        clamp_count = 0
        for t in range(t_count):
            state = StageState(storage.copy(), inflow.copy(), t, s)
            if t < t_count - 1:
                openings, clamps = _openings_for(ctx, t, inflow, lattice)
            else:
                openings, clamps = None, None
            sol, idx = _solve_stage(ctx, plan, t, state, openings, fcf, s, solver)
            states.append(state)
            duals.append(_extract_duals(ctx, sol.duals, idx))
            dispatch.append(_extract_dispatch(sol.x, idx))
            costs[t] = _immediate_cost(ctx, sol.x, idx)
            if ctx.n_i:
                storage = sol.x[idx.v_next].copy()
            if t < t_count - 1:
                pick = int(choices[s, t])
                if openings is not None and openings.size:
                    clamp_count += int(clamps[pick].sum())
                    inflow = openings[pick].copy()
        return ForwardRecord(s, states, costs, duals, dispatch), clamp_count

    results: list[tuple[ForwardRecord, int]] = [None] * n_s  # type: ignore
    if workers > 1 and n_s > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for s, res in enumerate(pool.map(simulate, range(n_s))):
                results[s] = res
    else:
        for s in range(n_s):
            results[s] = simulate(s)
    records = [r for r, _ in results]
    clamps = sum(c for _, c in results)
    totals = np.array([r.discounted_total(ctx.beta) for r in records])
    return records, totals, clamps


def backward_pass(ctx: OperationContext, plan: TrialPlan,
                  trajectories: list[ForwardRecord], fcf: FcfPool,
                  seed: int, workers: int = 1,
                  solver: Solver = REFERENCE) -> FcfPool:
    """One backward sweep: stage T-1 down to 1, one new hyperplane per
    visited state, appended in scenario order.

    The inflow coefficient of a plane combines the storage-balance dual
    (the current inflow fills the reservoir) with the branch identity duals
    weighted by the conditioning slope, zeroed on clamped branches.
    """
    case = ctx.case
    t_count = case.horizon
    lattice = _branch_noise(ctx, seed)

    for t in range(t_count - 1, 0, -1):
        jobs = [(rec.states[t], rec.scenario) for rec in trajectories]

        def cut_for(job) -> Hyperplane:
            state, scenario = job
            if t < t_count - 1:
                openings, clamps = _openings_for(ctx, t, state.inflow, lattice)
            else:
                openings, clamps = None, None
            sol, idx = _solve_stage(ctx, plan, t, state, openings, fcf, scenario, solver)
            duals = _extract_duals(ctx, sol.duals, idx)
            phi_h = duals.storage.copy()
            phi_a = duals.storage.copy()
            if t < t_count - 1 and ctx.n_i:
                slope = conditioning_slope(case.inflow, t)
                branch_duals = sol.duals[idx.row_branch_inflow]  # (L, I)
                weights = np.where(clamps, 0.0, slope[None, :])
                phi_a = phi_a + (branch_duals * weights).sum(axis=0)
            const = sol.objective - float(phi_h @ state.storage) - float(phi_a @ state.inflow)
            return Hyperplane(t, phi_h, phi_a, const)

        if workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                planes = list(pool.map(cut_for, jobs))
        else:
            planes = [cut_for(job) for job in jobs]
        for plane in planes:
            fcf.add(plane)
    return fcf


def lower_bound(ctx: OperationContext, plan: TrialPlan, fcf: FcfPool,
                seed: int, solver: Solver = REFERENCE) -> float:
    """First-stage optimal value at the initial state under the current pool."""
    case = ctx.case
    lattice = _branch_noise(ctx, seed)
    state = StageState(ctx.v_init.copy(), np.asarray(case.initial_inflows, dtype=float),
                       0, 0)
    if case.horizon > 1:
        openings, _ = _openings_for(ctx, 0, state.inflow, lattice)
    else:
        openings = None
    sol, _ = _solve_stage(ctx, plan, 0, state, openings, fcf, 0, solver)
    return sol.objective


def sddp_converged(lower: float, forward_costs: np.ndarray,
                   z: float = 1.96, slack: float = 1e-9) -> ConvergenceCheck:
    """Statistical stopping rule: stop once the lower bound reaches the lower
    edge of the forward-cost confidence interval (zero-width for one scenario)."""
    costs = np.asarray(forward_costs, dtype=float)
    mean = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(len(costs))) if len(costs) > 1 else 0.0
    threshold = mean - z * stderr - slack * max(1.0, abs(mean))
    return ConvergenceCheck(lower >= threshold, lower, mean, stderr)


def run_sddp(case_or_ctx, plan: TrialPlan, controls: SddpControls = SddpControls(),
             seed: int = 1, solver: Solver = REFERENCE) -> SddpResult:
    """Iterate forward/backward sweeps until the statistical stopping rule
    fires or the sweep cap is hit, then simulate once more under the final
    pool to produce the records used for costing and cuts."""
    ctx = case_or_ctx if isinstance(case_or_ctx, OperationContext) \
        else OperationContext(case_or_ctx)
    fcf = FcfPool(ctx.case.horizon)
    converged = False
    lb = -INF
    clamps = 0
    iterations = 0
    for it in range(controls.max_iterations):
        iterations = it + 1
        records, totals, c = forward_pass(ctx, plan, fcf, seed, controls.workers, solver)
        clamps += c
        if ctx.case.horizon > 1:
            backward_pass(ctx, plan, records, fcf, seed, controls.workers, solver)
        lb = lower_bound(ctx, plan, fcf, seed, solver)
        check = sddp_converged(lb, totals)
        if check.converged:
            converged = True
            break
    records, totals, c = forward_pass(ctx, plan, fcf, seed, controls.workers, solver)
    clamps += c
    std = float(totals.std(ddof=1)) if len(totals) > 1 else 0.0
    return SddpResult(float(totals.mean()), std, lb, iterations, converged,
                      records, fcf, clamps)
