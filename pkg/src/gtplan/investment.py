"""Investment master problem: binary build decisions per candidate project
and stage, priced against accumulated operation-cost cuts.

Build variables are cumulative: x[t, p] = 1 from the entry stage onward
(monotone per project), so capacities scale with x and the objective charges
each project's cost once, at its entry stage, via x[t] - x[t-1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gtplan.errors import DataError
from gtplan.model import PlanningCase, investment_coefficient
from gtplan.solver import (
    EQ,
    GE,
    LE,
    LinearProgram,
    LpSolution,
    MilpRequest,
    Solver,
    SolveStatus,
    REFERENCE,
)

INTEGRALITY_TOL = 1e-6


@dataclass(frozen=True)
class TrialPlan:
    """Cumulative build status per (stage, project); binary in normal use,
    fractional values are accepted by the operation model (used for
    sensitivity checks against relaxations)."""

    project_ids: tuple[str, ...]
    values: np.ndarray  # (horizon, n_projects)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @staticmethod
    def empty(case: PlanningCase) -> "TrialPlan":
        ids = tuple(p.id for p in case.candidates)
        return TrialPlan(ids, np.zeros((case.horizon, len(ids))))

    @staticmethod
    def from_entries(case: PlanningCase, entries: dict[str, int]) -> "TrialPlan":
        ids = tuple(p.id for p in case.candidates)
        vals = np.zeros((case.horizon, len(ids)))
        for pid, stage in entries.items():
            if pid not in ids:
                raise DataError(f"unknown project {pid!r} in plan")
            if not 0 <= stage < case.horizon:
                raise DataError(f"project {pid!r}: entry stage {stage} outside horizon")
            vals[stage:, ids.index(pid)] = 1.0
        return TrialPlan(ids, vals)

    @property
    def n_projects(self) -> int:
        return len(self.project_ids)

    def column(self, pid: str) -> int:
        return self.project_ids.index(pid)

    def entry_stage(self, pid: str) -> int | None:
        col = self.values[:, self.column(pid)]
        built = np.nonzero(col > 0.5)[0]
        return int(built[0]) if built.size else None

    def entries(self) -> dict[str, int]:
        out = {}
        for pid in self.project_ids:
            stage = self.entry_stage(pid)
            if stage is not None:
                out[pid] = stage
        return out

    def is_monotone(self, tol: float = INTEGRALITY_TOL) -> bool:
        return bool(np.all(np.diff(self.values, axis=0) >= -tol))


@dataclass(frozen=True)
class BendersCut:
    """Linear underestimator of expected operation cost over build decisions:

        w >= sum_t ( sum_p coeff[t, p] x[t, p] + constant[t] )

    Evaluated at its generating plan the cut reproduces that plan's expected
    operation cost (the constants are built to close it there).
    """

    coefficients: np.ndarray  # (horizon, n_projects)
    constants: np.ndarray     # (horizon,)
    iteration: int = 0

    def __post_init__(self):
        for name in ("coefficients", "constants"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def value_at(self, plan: TrialPlan) -> float:
        return float(np.sum(self.coefficients * plan.values) + self.constants.sum())


@dataclass(frozen=True)
class MasterSolution:
    plan: TrialPlan
    future_cost: float       # optimal w
    objective: float          # investment + w; a lower bound on the optimum
    solution: LpSolution


@dataclass
class MasterRequest:
    milp: MilpRequest
    x_index: np.ndarray       # (horizon, n_projects) variable positions
    w_index: int
    project_ids: tuple[str, ...]


def investment_cost_of_plan(case: PlanningCase, plan: TrialPlan) -> float:
    """Total charged investment: each project's coefficient at its entry stage
    (incremental x[t] - x[t-1] charging, so fractional plans price linearly)."""
    total = 0.0
    for p, proj in enumerate(case.candidates):
        prev = 0.0
        for t in range(case.horizon):
            step = plan.values[t, p] - prev
            if abs(step) > 0:
                total += investment_coefficient(case, proj, max(t, proj.earliest_stage)) * step
            prev = plan.values[t, p]
    return total


def build_master(case: PlanningCase, cuts: list[BendersCut],
                 rel_gap: float = 1e-9, node_limit: int = 200_000) -> MasterRequest:
    """Assemble the master MILP: monotone binaries per project/stage, one row
    per cut, and the project logic rows (exclusivity on final-stage status,
    association and precedence on summed status)."""
    t_count = case.horizon
    projects = case.candidates
    lp = LinearProgram(name="master")
    x_index = np.zeros((t_count, len(projects)), dtype=int)
    for p, proj in enumerate(projects):
        for t in range(t_count):
            ub = 0.0 if t < proj.earliest_stage else 1.0
            x_index[t, p] = lp.add_variable(f"x_{proj.id}_{t}", 0.0, ub)
    w_index = lp.add_variable("w", 0.0, np.inf, obj=1.0)

    # objective: charge the investment coefficient once, at the entry stage
    for p, proj in enumerate(projects):
        coeff_next = 0.0
        for t in reversed(range(t_count)):
            if t < proj.earliest_stage:
                break
            own = investment_coefficient(case, proj, t)
            lp.set_objective(int(x_index[t, p]), own - coeff_next)
            coeff_next = own

    for p, proj in enumerate(projects):
        for t in range(1, t_count):
            lp.add_row({int(x_index[t, p]): 1.0, int(x_index[t - 1, p]): -1.0},
                       GE, 0.0, f"mono_{proj.id}_{t}")

    for m, cut in enumerate(cuts):
        coeffs = {w_index: 1.0}
        for p in range(len(projects)):
            for t in range(t_count):
                v = -float(cut.coefficients[t, p])
                if v != 0.0:
                    coeffs[int(x_index[t, p])] = v
        lp.add_row(coeffs, GE, float(cut.constants.sum()), f"cut_{m}")

    ids = [proj.id for proj in projects]
    for c, lc in enumerate(case.logic_constraints):
        cols = [ids.index(pid) for pid in lc.project_ids]
        if lc.kind == "exclusive":
            lp.add_row({int(x_index[t_count - 1, p]): 1.0 for p in cols},
                       LE, 1.0, f"excl_{c}")
        elif lc.kind == "associated":
            coeffs: dict[int, float] = {}
            for t in range(t_count):
                coeffs[int(x_index[t, cols[0]])] = 1.0
                coeffs[int(x_index[t, cols[1]])] = -1.0
            lp.add_row(coeffs, EQ, 0.0, f"assoc_{c}")
        else:  # precedence: first project enters no later than the second
            coeffs = {}
            for t in range(t_count):
                coeffs[int(x_index[t, cols[0]])] = 1.0
                coeffs[int(x_index[t, cols[1]])] = -1.0
            lp.add_row(coeffs, GE, 0.0, f"prec_{c}")

    binaries = [int(j) for j in x_index.ravel()]
    return MasterRequest(MilpRequest(lp, binaries, rel_gap, node_limit),
                         x_index, w_index, tuple(ids))


def solve_master(case: PlanningCase, request: MasterRequest,
                 solver: Solver = REFERENCE) -> MasterSolution:
    """Solve the master MILP and extract the trial plan and lower bound."""
    sol = solver.solve_milp(request.milp)
    if sol.status is not SolveStatus.OPTIMAL:
        raise DataError(f"master problem ended {sol.status.value}"
                        + (f" (gap {sol.mip_gap:.3g})" if sol.mip_gap is not None else ""))
    raw = sol.x[request.x_index]
    if np.any(np.abs(raw - np.round(raw)) > INTEGRALITY_TOL):
        raise DataError("master returned non-integral build variables")
    vals = np.round(raw)
    vals = np.maximum.accumulate(vals, axis=0)  # re-assert monotone status
    plan = TrialPlan(request.project_ids, vals)
    return MasterSolution(plan, float(sol.x[request.w_index]), float(sol.objective), sol)
