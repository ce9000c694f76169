"""Outer decomposition loop: alternate the investment master and the
operation model, exchange cuts and track the cost bounds.

Cut coefficients come from the capacity-row duals of the forward records,
averaged over scenarios; the per-stage constants absorb the expected stage
cost (thermal plus deficit penalty) minus the linear terms at the trial
plan, so every cut closes exactly at the plan that generated it.  Stage
contributions are weighted by the per-stage discount factor so the cut and
the master objective price cash flows on the same basis.

Sign conventions (minimize; row duals are d(cost)/d(rhs)):
  hydro      coeff = avg_s  v_max * pi_storage_cap + u_max * pi_turbine_cap
  thermal    coeff = avg_s sum_b  g_max * pi_thermal_cap
  renewable  coeff = avg_s sum_b  -production * pi_balance(bus)
  circuit    coeff = avg_s sum_b  -M * pi_kvl_pair + rating * pi_flow_pair
The renewable term carries a minus because fixed injections enter the
balance right-hand side negated; the pair duals are upper minus lower row.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from gtplan.errors import CaseError, DataError
from gtplan.investment import (
    BendersCut,
    TrialPlan,
    build_master,
    investment_cost_of_plan,
    solve_master,
)
from gtplan.model import PlanningCase, validate_case
from gtplan.network import DEFAULT_M_FALLBACK
from gtplan.operation import (
    ForwardRecord,
    OperationContext,
    SddpControls,
    SddpResult,
    run_sddp,
)
from gtplan.solver import REFERENCE, Solver


@dataclass(frozen=True)
class RunConfig:
    """Knobs of one planning run; everything a rerun needs besides the case."""

    gap_target: float = 0.03
    max_iterations: int = 80
    seed: int = 1
    sddp: SddpControls = field(default_factory=SddpControls)
    master_gap: float = 1e-9
    master_node_limit: int = 200_000
    m_fallback: float = DEFAULT_M_FALLBACK

    def __post_init__(self):
        if not 0 < self.gap_target < 1:
            raise DataError(f"gap target must lie in (0, 1), got {self.gap_target}")


@dataclass
class IterationRecord:
    iteration: int
    plan: TrialPlan
    lower_bound: float
    investment_cost: float
    expected_operation_cost: float
    total_cost: float
    upper_bound: float
    gap: float
    wall_time: float


@dataclass
class PlanResult:
    best_plan: TrialPlan
    best_total: float
    best_investment: float
    best_operation_cost: float
    best_simulation: SddpResult
    history: list[IterationRecord]
    converged: bool
    iterations: int


def assemble_investment_cut(ctx: OperationContext, plan: TrialPlan,
                            records: list[ForwardRecord],
                            iteration: int = 0) -> BendersCut:
    """Build one investment-space cut from the forward records of a plan."""
    case = ctx.case
    t_count = case.horizon
    n_p = len(case.candidates)
    n_s = len(records)
    if n_s == 0:
        raise DataError("cut assembly needs at least one forward record")
    beta = ctx.beta
    coeffs = np.zeros((t_count, n_p))
    consts = np.zeros(t_count)

    for t in range(t_count):
        weight = beta ** t / n_s
        for rec in records:
            duals = rec.duals[t]
            consts[t] += weight * rec.immediate_costs[t]
            for p, proj in enumerate(case.candidates):
                if proj.kind == "hydro":
                    i = int(np.nonzero(ctx.hydro_proj == p)[0][0])
                    coeffs[t, p] += weight * (
                        ctx.v_max[i] * duals.cand_storage_cap[i]
                        + ctx.u_max[i] * duals.cand_turbine_cap[i])
                elif proj.kind == "thermal":
                    j = int(np.nonzero(ctx.thermal_proj == p)[0][0])
                    coeffs[t, p] += weight * ctx.g_max[j] * duals.cand_thermal_cap[j].sum()
                elif proj.kind == "renewable":
                    r = int(np.nonzero(ctx.renew_proj == p)[0][0])
                    bus = int(ctx.renew_bus[r])
                    prod = case.renewables[r].production[t, :, rec.scenario]
                    coeffs[t, p] += weight * float(
                        -(prod * duals.bus_balance[bus]).sum())
                else:  # circuit
                    k = int(np.nonzero(ctx.circuit_proj == p)[0][0])
                    m_k = ctx.topo.big_m[k]
                    f_k = ctx.topo.rating[k]
                    coeffs[t, p] += weight * float(
                        (-m_k * duals.cand_kvl[k] + f_k * duals.cand_flow[k]).sum())
        consts[t] -= float(coeffs[t] @ plan.values[t])

    return BendersCut(coeffs, consts, iteration)


def run(case: PlanningCase, config: RunConfig = RunConfig(),
        solver: Solver | None = None, on_iteration=None) -> PlanResult:
    """Full planning loop: master proposes, operation prices, cuts accumulate,
    stop at the target gap or the iteration cap.

    ``on_iteration`` (if given) is called with each IterationRecord as it is
    produced, so partial progress survives solver failures upstream.
    """
    report = validate_case(case)
    if not report.passed:
        raise CaseError("case failed validation", report.messages())
    if solver is None:
        solver = REFERENCE
    ctx = OperationContext(case, config.m_fallback)
    history: list[IterationRecord] = []
    start = time.perf_counter()

    if not case.candidates:
        plan = TrialPlan.empty(case)
        sim = run_sddp(ctx, plan, config.sddp, config.seed, solver)
        total = sim.expected_cost
        record = IterationRecord(1, plan, total, 0.0, sim.expected_cost, total,
                                 total, 0.0, time.perf_counter() - start)
        history.append(record)
        if on_iteration:
            on_iteration(record)
        return PlanResult(plan, total, 0.0, sim.expected_cost, sim, history,
                          True, 1)

    cuts: list[BendersCut] = []
    upper = np.inf
    best_plan = TrialPlan.empty(case)
    best_sim: SddpResult | None = None
    best_invest = 0.0
    converged = False

    for m in range(1, config.max_iterations + 1):
        request = build_master(case, cuts, config.master_gap, config.master_node_limit)
        master = solve_master(case, request, solver)
        lower = master.objective

        sim = run_sddp(ctx, master.plan, config.sddp, config.seed, solver)
        invest = investment_cost_of_plan(case, master.plan)
        total = invest + sim.expected_cost
        if total < upper:
            upper = total
            best_plan = master.plan
            best_sim = sim
            best_invest = invest
        gap = (upper - lower) / max(abs(upper), 1e-9)
        record = IterationRecord(m, master.plan, lower, invest, sim.expected_cost,
                                 total, upper, gap, time.perf_counter() - start)
        history.append(record)
        if on_iteration:
            on_iteration(record)
        if gap <= config.gap_target:
            converged = True
            break
        cuts.append(assemble_investment_cut(ctx, master.plan, sim.records, m))

    assert best_sim is not None
    return PlanResult(best_plan, float(upper), best_invest,
                      best_sim.expected_cost, best_sim, history, converged,
                      len(history))
