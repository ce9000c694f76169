"""Bundled LP and MILP solver.

A bounded-variable revised simplex (two-phase, Dantzig pricing with a Bland
fallback after a degeneracy streak) solving

    min c.x   s.t.  rows  a_i.x {<=,=,>=} b_i,   l <= x <= u

with exact row duals, plus a deterministic best-bound branch-and-bound for
binary programs.  Dense numpy factorizations; meant for desk-scale problems,
not industrial LPs.

Dual convention: the reported dual of row i is d(objective)/d(b_i) for the
minimization problem, so duals of >= rows are nonnegative and duals of <=
rows are nonpositive.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Protocol, Sequence

import numpy as np

INF = math.inf

LE = "<="
EQ = "="
GE = ">="
_SENSES = (LE, EQ, GE)

DEFAULT_TOL_FEAS = 1e-7
DEFAULT_TOL_OBJ = 1e-6

# When True every optimal solve is re-verified against the KKT conditions
# (primal/dual feasibility, complementary slackness, strong duality).  The
# test suite switches this on; it roughly doubles solve cost.
STRICT_CHECKS = False

_REFACTOR_EVERY = 100
_BLAND_THRESHOLD = 50
_PIVOT_TOL = 1e-9


class SolverFailure(Exception):
    """Numerical breakdown or misuse of the solver."""


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


@dataclass
class LinearProgram:
    """Minimization LP built incrementally: variables with bounds, sparse rows."""

    name: str = "lp"
    var_names: list[str] = field(default_factory=list)
    lower: list[float] = field(default_factory=list)
    upper: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    row_coeffs: list[dict[int, float]] = field(default_factory=list)
    row_senses: list[str] = field(default_factory=list)
    row_rhs: list[float] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)

    @property
    def n_variables(self) -> int:
        return len(self.objective)

    @property
    def n_rows(self) -> int:
        return len(self.row_rhs)

    def add_variable(self, name: str = "", lb: float = 0.0, ub: float = INF,
                     obj: float = 0.0) -> int:
        if lb > ub:
            raise ValueError(f"variable {name!r}: lower bound {lb} exceeds upper {ub}")
        idx = len(self.objective)
        self.var_names.append(name or f"x{idx}")
        self.lower.append(float(lb))
        self.upper.append(float(ub))
        self.objective.append(float(obj))
        return idx

    def add_row(self, coeffs: Mapping[int, float], sense: str, rhs: float,
                name: str = "") -> int:
        if sense not in _SENSES:
            raise ValueError(f"unknown row sense {sense!r}")
        n = self.n_variables
        for j in coeffs:
            if not 0 <= j < n:
                raise ValueError(f"row {name!r}: coefficient index {j} out of range")
        idx = len(self.row_rhs)
        self.row_coeffs.append({int(j): float(v) for j, v in coeffs.items() if v != 0.0})
        self.row_senses.append(sense)
        self.row_rhs.append(float(rhs))
        self.row_names.append(name or f"r{idx}")
        return idx

    def set_objective(self, j: int, coeff: float) -> None:
        self.objective[j] = float(coeff)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense constraint matrix A (m x n) and rhs b."""
        m, n = self.n_rows, self.n_variables
        a = np.zeros((m, n))
        for i, coeffs in enumerate(self.row_coeffs):
            for j, v in coeffs.items():
                a[i, j] = v
        return a, np.asarray(self.row_rhs, dtype=float)


@dataclass
class LpSolution:
    status: SolveStatus
    x: np.ndarray
    duals: np.ndarray
    reduced_costs: np.ndarray
    objective: float
    iterations: int = 0
    mip_gap: float | None = None
    mip_nodes: int | None = None

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


@dataclass
class MilpRequest:
    lp: LinearProgram
    binary_indices: Sequence[int]
    rel_gap: float = 1e-9
    node_limit: int = 200_000


class Solver(Protocol):
    """Interface implemented by the bundled solver; external LP/MILP engines
    can be substituted behind it."""

    def solve_lp(self, lp: LinearProgram) -> LpSolution: ...

    def solve_milp(self, req: MilpRequest) -> LpSolution: ...


class _Simplex:
    """Standardized arrays for one LP, reusable across bound overrides."""

    def __init__(self, lp: LinearProgram, tol_feas: float = DEFAULT_TOL_FEAS):
        self.n = lp.n_variables
        self.m = lp.n_rows
        self.a, self.b = lp.dense()
        self.c = np.asarray(lp.objective, dtype=float)
        self.lo = np.asarray(lp.lower, dtype=float)
        self.hi = np.asarray(lp.upper, dtype=float)
        self.senses = list(lp.row_senses)
        self.tol_feas = tol_feas
        # slack bounds by row sense: <= gives s in [0, inf), = fixes s at 0,
        # >= gives s in (-inf, 0]; row becomes a.x + s = b
        slack_lo = np.array([0.0 if s in (LE, EQ) else -INF for s in self.senses])
        slack_hi = np.array([0.0 if s in (EQ, GE) else INF for s in self.senses])
        self.slack_lo, self.slack_hi = slack_lo, slack_hi

    def solve(self, lo: np.ndarray | None = None, hi: np.ndarray | None = None,
              max_iterations: int | None = None):
        n, m = self.n, self.m
        lo = self.lo if lo is None else lo
        hi = self.hi if hi is None else hi
        if np.any(lo > hi + 1e-15):
            return _RawResult(SolveStatus.INFEASIBLE, np.zeros(n), np.zeros(m),
                              np.zeros(n), INF, 0)
        big_n = n + 2 * m
        a_ext = np.zeros((m, big_n))
        a_ext[:, :n] = self.a
        a_ext[:, n:n + m] = np.eye(m)
        a_ext[:, n + m:] = np.eye(m)
        lo_ext = np.concatenate([lo, self.slack_lo, np.zeros(m)])
        hi_ext = np.concatenate([hi, self.slack_hi, np.zeros(m)])

        z = np.zeros(big_n)
        finite_lo = np.isfinite(lo)
        finite_hi = np.isfinite(hi)
        z[:n] = np.where(finite_lo, lo, np.where(finite_hi, hi, 0.0))
        # slacks start at 0 which is inside every slack bound set
        resid = self.b - a_ext[:, :n + m] @ z[:n + m]
        art = np.arange(n + m, big_n)
        lo_ext[art] = np.minimum(0.0, resid)
        hi_ext[art] = np.maximum(0.0, resid)
        z[art] = resid

        state = _SimplexState(a_ext, self.b, z, lo_ext, hi_ext,
                              basis=art.copy(), tol_feas=self.tol_feas)
        if max_iterations is None:
            max_iterations = 200 * (m + n) + 2000

        # phase 1: drive artificials to zero
        c1 = np.zeros(big_n)
        c1[art] = np.sign(resid)
        status = state.iterate(c1, max_iterations)
        if status is SolveStatus.ITERATION_LIMIT:
            return state.raw(SolveStatus.ITERATION_LIMIT, self, c1)
        infeas = np.abs(state.z[art]).sum()
        if infeas > self.tol_feas * (1.0 + np.abs(self.b).sum()):
            return state.raw(SolveStatus.INFEASIBLE, self, c1)
        state.z[art] = 0.0
        state.lo[art] = 0.0
        state.hi[art] = 0.0
        state.refresh()

        c2 = np.zeros(big_n)
        c2[:n] = self.c
        status = state.iterate(c2, max_iterations)
        return state.raw(status, self, c2)


@dataclass
class _RawResult:
    status: SolveStatus
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    objective: float
    iterations: int


class _SimplexState:
    def __init__(self, a_ext, b, z, lo, hi, basis, tol_feas):
        self.a = a_ext
        self.b = b
        self.z = z
        self.lo = lo
        self.hi = hi
        self.basis = basis
        self.m, self.big_n = a_ext.shape[0], a_ext.shape[1]
        self.tol_feas = tol_feas
        self.b_inv = np.eye(self.m)
        self.in_basis = np.zeros(self.big_n, dtype=bool)
        self.in_basis[basis] = True
        self.iterations = 0

    def refresh(self) -> None:
        """Refactorize the basis inverse and recompute basic values."""
        bmat = self.a[:, self.basis]
        try:
            self.b_inv = np.linalg.inv(bmat)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise SolverFailure("singular basis during refactorization") from exc
        nb = ~self.in_basis
        b_eff = self.b - self.a[:, nb] @ self.z[nb]
        self.z[self.basis] = self.b_inv @ b_eff

    def iterate(self, c: np.ndarray, max_iterations: int) -> SolveStatus:
        a, z, lo, hi = self.a, self.z, self.lo, self.hi
        tol = 1e-9 * (1.0 + (np.abs(c).max() if c.size else 0.0))
        finite_lo = np.isfinite(lo)
        finite_hi = np.isfinite(hi)
        lo_thresh = np.where(finite_lo, np.where(finite_lo, lo, 0.0)
                             + 1e-12 * (1 + np.abs(np.where(finite_lo, lo, 0.0))), -INF)
        movable_mask = lo < hi
        free_mask = movable_mask & ~finite_lo & ~finite_hi
        degen_streak = 0
        bland = False
        since_refactor = 0
        while True:
            if self.iterations >= max_iterations:
                return SolveStatus.ITERATION_LIMIT
            y = c[self.basis] @ self.b_inv
            d = c - y @ a
            nb = ~self.in_basis
            movable = nb & movable_mask
            at_lo = movable & (z <= lo_thresh)
            free = movable & free_mask
            at_hi = movable & ~at_lo & ~free
            score = np.zeros(self.big_n)
            inc = (at_lo | free) & (d < -tol)
            dec = (at_hi | free) & (d > tol)
            score[inc] = -d[inc]
            score[dec] = np.maximum(score[dec], d[dec])
            if not score.any():
                return SolveStatus.OPTIMAL
            if bland:
                j = int(np.nonzero(score > 0)[0][0])
            else:
                j = int(np.argmax(score))
            direction = 1.0 if inc[j] else -1.0

            w = self.b_inv @ a[:, j]
            delta = direction * w
            xb = z[self.basis]
            lo_b = lo[self.basis]
            hi_b = hi[self.basis]
            theta = np.full(self.m, INF)
            pos = delta > _PIVOT_TOL
            neg = delta < -_PIVOT_TOL
            with np.errstate(invalid="ignore"):
                theta[pos] = (xb[pos] - lo_b[pos]) / delta[pos]
                theta[neg] = (xb[neg] - hi_b[neg]) / delta[neg]
            theta = np.where(np.isnan(theta), INF, theta)
            theta_self = hi[j] - lo[j] if np.isfinite(hi[j] - lo[j]) else INF
            t_rows = theta.min() if self.m else INF
            t_star = min(t_rows, theta_self)
            if not np.isfinite(t_star):
                return SolveStatus.UNBOUNDED
            t_star = max(t_star, 0.0)

            self.iterations += 1
            since_refactor += 1
            if t_star <= 1e-12:
                degen_streak += 1
            else:
                degen_streak = 0
            if degen_streak > _BLAND_THRESHOLD:
                bland = True
            elif degen_streak == 0:
                bland = False

            if theta_self <= t_rows:
                # bound flip: variable crosses to its opposite bound
                z[j] = hi[j] if direction > 0 else lo[j]
                z[self.basis] = xb - t_star * delta
                continue

            cands = np.nonzero(theta <= t_star + 1e-12)[0]
            if bland:
                r = int(cands[np.argmin(self.basis[cands])])
            else:
                r = int(cands[np.argmax(np.abs(delta[cands]))])
            leaving = self.basis[r]
            z[self.basis] = xb - t_star * delta
            z[leaving] = lo[leaving] if delta[r] > 0 else hi[leaving]
            z[j] = z[j] + direction * t_star
            self.basis[r] = j
            self.in_basis[leaving] = False
            self.in_basis[j] = True
            # product-form update of the basis inverse
            piv = w[r]
            if abs(piv) < _PIVOT_TOL:  # pragma: no cover
                self.refresh()
                continue
            row = self.b_inv[r] / piv
            self.b_inv -= np.outer(w, row)
            self.b_inv[r] = row
            if since_refactor >= _REFACTOR_EVERY:
                self.refresh()
                since_refactor = 0

    def raw(self, status: SolveStatus, data: _Simplex, c: np.ndarray) -> _RawResult:
        n, m = data.n, data.m
        if status is SolveStatus.OPTIMAL:
            self.refresh()
        y = c[self.basis] @ self.b_inv
        x = self.z[:n].copy()
        d = data.c - y @ data.a
        obj = float(data.c @ x) if status is SolveStatus.OPTIMAL else INF
        if status is SolveStatus.UNBOUNDED:
            obj = -INF
        return _RawResult(status, x, y[:m].copy(), d, obj, self.iterations)


def solve_lp(lp: LinearProgram, *, tol_feas: float = DEFAULT_TOL_FEAS,
             tol_obj: float = DEFAULT_TOL_OBJ,
             max_iterations: int | None = None) -> LpSolution:
    """Solve an LP to proven optimality, returning primal values and row duals.

    Deterministic: identical input yields an identical solution.  Raises
    SolverFailure only on numerical breakdown; infeasible/unbounded/stalled
    problems are reported through the status field.
    """
    data = _Simplex(lp, tol_feas)
    raw = data.solve(max_iterations=max_iterations)
    sol = LpSolution(raw.status, raw.x, raw.y, raw.d, raw.objective, raw.iterations)
    if STRICT_CHECKS and sol.optimal:
        check_solution(lp, sol, tol_feas=tol_feas, tol_obj=tol_obj)
    return sol


def solve_milp(req: MilpRequest, *, tol_feas: float = DEFAULT_TOL_FEAS,
               tol_obj: float = DEFAULT_TOL_OBJ) -> LpSolution:
    """Best-bound branch-and-bound over the binary variables of the request.

    Nodes are explored in nondecreasing parent-bound order with deterministic
    tie-breaking; branching fixes the most-fractional binary (ties to the
    lowest variable index).  Returns the incumbent with its proven relative
    gap; hitting the node limit returns the best incumbent found so far.
    """
    lp = req.lp
    binaries = sorted(int(j) for j in req.binary_indices)
    for j in binaries:
        if lp.lower[j] < -1e-12 or lp.upper[j] > 1.0 + 1e-12:
            raise SolverFailure(f"binary variable {lp.var_names[j]} has bounds "
                                f"[{lp.lower[j]}, {lp.upper[j]}], expected within [0, 1]")
    data = _Simplex(lp, tol_feas)
    lo0 = np.asarray(lp.lower, dtype=float)
    hi0 = np.asarray(lp.upper, dtype=float)

    root = data.solve(lo0, hi0)
    if root.status is not SolveStatus.OPTIMAL:
        return LpSolution(root.status, root.x, root.y, root.d, root.objective,
                          root.iterations, mip_nodes=1)

    incumbent: _RawResult | None = None
    best_obj = INF
    heap: list[tuple[float, int, np.ndarray, np.ndarray]] = []
    seq = 0
    heapq.heappush(heap, (root.objective, seq, lo0, hi0))
    nodes = 0
    total_iters = 0

    def frac_index(x: np.ndarray) -> int | None:
        fracs = [(abs(x[j] - round(x[j])), j) for j in binaries]
        worst, j = max(fracs, key=lambda t: (t[0], -t[1])) if fracs else (0.0, -1)
        return j if worst > 1e-6 else None

    def current_gap() -> float:
        lb = min((entry[0] for entry in heap), default=best_obj)
        lb = min(lb, best_obj)
        if not math.isfinite(best_obj):
            return INF
        return (best_obj - lb) / max(abs(best_obj), 1e-12)

    while heap:
        if nodes >= req.node_limit:
            break
        bound, _, lo, hi = heapq.heappop(heap)
        if incumbent is not None and bound >= best_obj - 1e-12 * max(1.0, abs(best_obj)):
            continue
        res = data.solve(lo, hi)
        nodes += 1
        total_iters += res.iterations
        if res.status is SolveStatus.ITERATION_LIMIT:
            raise SolverFailure("LP stalled inside branch-and-bound")
        if res.status is not SolveStatus.OPTIMAL:
            continue
        if incumbent is not None and res.objective >= best_obj - 1e-12 * max(1.0, abs(best_obj)):
            continue
        j = frac_index(res.x)
        if j is None:
            incumbent = res
            best_obj = res.objective
            if current_gap() <= req.rel_gap:
                break
            continue
        for fixed in (0.0, 1.0):
            lo2 = lo.copy()
            hi2 = hi.copy()
            lo2[j] = fixed
            hi2[j] = fixed
            seq += 1
            heapq.heappush(heap, (res.objective, seq, lo2, hi2))

    if incumbent is None:
        if nodes >= req.node_limit and heap:
            return LpSolution(SolveStatus.ITERATION_LIMIT, root.x, root.y, root.d,
                              INF, total_iters, mip_gap=INF, mip_nodes=nodes)
        return LpSolution(SolveStatus.INFEASIBLE, root.x, root.y, root.d, INF,
                          total_iters, mip_nodes=nodes)
    gap = current_gap()
    status = SolveStatus.OPTIMAL if gap <= req.rel_gap + 1e-15 else SolveStatus.ITERATION_LIMIT
    sol = LpSolution(status, incumbent.x, incumbent.y, incumbent.d,
                     incumbent.objective, total_iters, mip_gap=gap, mip_nodes=nodes)
    if STRICT_CHECKS:
        _check_primal(lp, sol, tol_feas)
    return sol


@dataclass
class ReferenceSolver:
    """Bundled implementation of the Solver interface."""

    tol_feas: float = DEFAULT_TOL_FEAS
    tol_obj: float = DEFAULT_TOL_OBJ
    max_iterations: int | None = None

    def solve_lp(self, lp: LinearProgram) -> LpSolution:
        return solve_lp(lp, tol_feas=self.tol_feas, tol_obj=self.tol_obj,
                        max_iterations=self.max_iterations)

    def solve_milp(self, req: MilpRequest) -> LpSolution:
        return solve_milp(req, tol_feas=self.tol_feas, tol_obj=self.tol_obj)


REFERENCE = ReferenceSolver()


def _check_primal(lp: LinearProgram, sol: LpSolution, tol_feas: float) -> None:
    a, b = lp.dense()
    x = sol.x
    lo = np.asarray(lp.lower)
    hi = np.asarray(lp.upper)
    scale = 1.0 + float(np.abs(b).max(initial=0.0)) + float(np.abs(x).max(initial=0.0))
    if np.any(x < lo - tol_feas * scale) or np.any(x > hi + tol_feas * scale):
        raise SolverFailure("primal bound violation")
    res = a @ x - b
    for i, s in enumerate(lp.row_senses):
        r = res[i]
        ok = (abs(r) <= tol_feas * scale if s == EQ
              else r <= tol_feas * scale if s == LE
              else r >= -tol_feas * scale)
        if not ok:
            raise SolverFailure(f"row {lp.row_names[i]} violated by {r:.3e}")


def check_solution(lp: LinearProgram, sol: LpSolution, *,
                   tol_feas: float = DEFAULT_TOL_FEAS,
                   tol_obj: float = DEFAULT_TOL_OBJ) -> None:
    """Verify KKT conditions of an optimal solution; raises SolverFailure.

    Checks primal feasibility, dual sign convention by row sense, stationarity
    of reduced costs against the variable bounds, and the strong-duality gap.
    """
    _check_primal(lp, sol, tol_feas)
    a, b = lp.dense()
    y = sol.duals
    c = np.asarray(lp.objective)
    lo = np.asarray(lp.lower)
    hi = np.asarray(lp.upper)
    cscale = 1.0 + float(np.abs(c).max(initial=0.0)) + float(np.abs(y).max(initial=0.0))
    dtol = 1e-7 * cscale
    for i, s in enumerate(lp.row_senses):
        if s == LE and y[i] > dtol:
            raise SolverFailure(f"<= row {lp.row_names[i]} has positive dual {y[i]:.3e}")
        if s == GE and y[i] < -dtol:
            raise SolverFailure(f">= row {lp.row_names[i]} has negative dual {y[i]:.3e}")
    d = c - y @ a
    x = sol.x
    lo_safe = np.where(np.isfinite(lo), lo, 0.0)
    hi_safe = np.where(np.isfinite(hi), hi, 0.0)
    at_lo = np.isfinite(lo) & (x <= lo_safe + tol_feas * (1 + np.abs(lo_safe)))
    at_hi = np.isfinite(hi) & (x >= hi_safe - tol_feas * (1 + np.abs(hi_safe)))
    fixed = (hi - lo) <= tol_feas
    bad = (~fixed) & (
        ((~at_lo) & (~at_hi) & (np.abs(d) > dtol))
        | (at_lo & (~at_hi) & (d < -dtol))
        | (at_hi & (~at_lo) & (d > dtol))
    )
    if np.any(bad):
        j = int(np.nonzero(bad)[0][0])
        raise SolverFailure(f"stationarity violated at {lp.var_names[j]}: d={d[j]:.3e}")
    dual_obj = float(y @ b)
    pos = d > dtol
    neg = d < -dtol
    if np.any(pos & ~np.isfinite(lo)) or np.any(neg & ~np.isfinite(hi)):
        raise SolverFailure("dual infeasible: reduced cost against infinite bound")
    dual_obj += float(d[pos] @ lo[pos]) + float(d[neg] @ hi[neg])
    gap = abs(sol.objective - dual_obj)
    if gap > tol_obj * (1.0 + abs(sol.objective)):
        raise SolverFailure(f"strong duality gap {gap:.3e} exceeds tolerance")


def write_lp_text(lp: LinearProgram) -> str:
    """Render the problem in the conventional LP text layout (for debugging)."""
    out = [f"\\ {lp.name}", "Minimize"]
    terms = [f"{c:+.12g} {lp.var_names[j]}" for j, c in enumerate(lp.objective) if c != 0.0]
    out.append(" obj: " + (" ".join(terms) if terms else "0"))
    out.append("Subject To")
    for i in range(lp.n_rows):
        body = " ".join(f"{v:+.12g} {lp.var_names[j]}"
                        for j, v in sorted(lp.row_coeffs[i].items()))
        out.append(f" {lp.row_names[i]}: {body or '0'} {lp.row_senses[i]} {lp.row_rhs[i]:.12g}")
    out.append("Bounds")
    for j in range(lp.n_variables):
        lo, hi = lp.lower[j], lp.upper[j]
        name = lp.var_names[j]
        if lo == -INF and hi == INF:
            out.append(f" {name} free")
        elif lo == hi:
            out.append(f" {name} = {lo:.12g}")
        else:
            left = f"{lo:.12g} <= " if lo != -INF else ""
            right = f" <= {hi:.12g}" if hi != INF else ""
            out.append(f" {left}{name}{right}")
    out.append("End")
    return "\n".join(out) + "\n"
