"""Solver tests: trivial LPs with known duals, random LPs against a
brute-force vertex-enumeration oracle and scipy, and branch-and-bound
against exhaustive enumeration."""

import itertools
import math

import numpy as np
import pytest
import scipy.optimize

from gtplan.solver import (
    EQ,
    GE,
    LE,
    INF,
    LinearProgram,
    MilpRequest,
    SolveStatus,
    check_solution,
    solve_lp,
    solve_milp,
    write_lp_text,
)


def vertex_enumeration_optimum(a, senses, b, c, lo, hi):
    """Independent LP oracle: enumerate all basic points formed by active
    constraint subsets (rows plus finite bounds) and take the best feasible one."""
    m, n = a.shape
    rows = [(a[i], b[i]) for i in range(m)]
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = 1.0
        if math.isfinite(lo[j]):
            rows.append((ej.copy(), lo[j]))
        if math.isfinite(hi[j]):
            rows.append((ej.copy(), hi[j]))

    def feasible(x):
        if np.any(x < lo - 1e-7) or np.any(x > hi + 1e-7):
            return False
        r = a @ x - b
        for i, s in enumerate(senses):
            if s == LE and r[i] > 1e-7:
                return False
            if s == GE and r[i] < -1e-7:
                return False
            if s == EQ and abs(r[i]) > 1e-7:
                return False
        return True

    best = None
    for subset in itertools.combinations(range(len(rows)), n):
        mat = np.array([rows[i][0] for i in subset])
        rhs = np.array([rows[i][1] for i in subset])
        if abs(np.linalg.det(mat)) < 1e-10:
            continue
        x = np.linalg.solve(mat, rhs)
        if feasible(x):
            val = float(c @ x)
            if best is None or val < best:
                best = val
    return best


def random_bounded_lp(rng, n=6, m=5):
    lp = LinearProgram()
    c = rng.uniform(-5, 5, size=n)
    lo = np.zeros(n)
    hi = rng.uniform(1, 10, size=n)
    for j in range(n):
        lp.add_variable(f"x{j}", lo[j], hi[j], obj=c[j])
    a = rng.uniform(-3, 3, size=(m, n))
    senses = []
    b = np.zeros(m)
    mid = (lo + hi) / 2
    for i in range(m):
        s = [LE, GE, EQ][rng.integers(0, 3)] if i else LE
        # anchor the rhs at an interior point so the LP is always feasible
        b[i] = float(a[i] @ mid) + (1.0 if s == LE else -1.0 if s == GE else 0.0) * rng.uniform(0, 2)
        senses.append(s)
        lp.add_row({j: a[i, j] for j in range(n)}, s, b[i])
    return lp, a, senses, b, c, lo, hi


class TestLpBasics:
    def test_single_constraint_lp(self):
        lp = LinearProgram()
        x = lp.add_variable("x", 0, 10, obj=1.0)
        lp.add_row({x: 1.0}, GE, 1.0)
        sol = solve_lp(lp)
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.x[x] == pytest.approx(1.0, abs=1e-9)
        assert sol.duals[0] == pytest.approx(1.0, abs=1e-9)
        assert sol.objective == pytest.approx(1.0, abs=1e-9)

    def test_balance_dual_equals_marginal_cost(self):
        # one thermal plant serving a fixed demand: dual of the balance row
        # is the plant's variable cost
        lp = LinearProgram()
        g = lp.add_variable("g", 0, 200, obj=25.0)
        lp.add_row({g: 1.0}, EQ, 100.0, "balance")
        sol = solve_lp(lp)
        assert sol.objective == pytest.approx(2500.0, abs=1e-8)
        assert sol.duals[0] == pytest.approx(25.0, abs=1e-9)

    def test_infeasible(self):
        lp = LinearProgram()
        x = lp.add_variable("x", 0, 1)
        lp.add_row({x: 1.0}, GE, 2.0)
        assert solve_lp(lp).status is SolveStatus.INFEASIBLE

    def test_unbounded(self):
        lp = LinearProgram()
        lp.add_variable("x", -INF, INF, obj=1.0)
        assert solve_lp(lp).status is SolveStatus.UNBOUNDED

    def test_free_variable_equality(self):
        lp = LinearProgram()
        x = lp.add_variable("x", -INF, INF, obj=2.0)
        y = lp.add_variable("y", 0, INF, obj=1.0)
        lp.add_row({x: 1.0, y: 1.0}, EQ, 3.0)
        lp.add_row({x: 1.0}, GE, -5.0)
        sol = solve_lp(lp)
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.objective == pytest.approx(-2.0, abs=1e-9)  # x=-5, y=8

    def test_degenerate_lp_terminates(self):
        # many redundant rows through one vertex: exercises the Bland fallback
        lp = LinearProgram()
        x = lp.add_variable("x", 0, INF, obj=-1.0)
        y = lp.add_variable("y", 0, INF, obj=-1.0)
        for k in range(12):
            lp.add_row({x: 1.0 + 1e-12 * k, y: 1.0}, LE, 1.0)
        lp.add_row({x: 1.0}, LE, 1.0)
        lp.add_row({y: 1.0}, LE, 1.0)
        sol = solve_lp(lp)
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.objective == pytest.approx(-1.0, abs=1e-8)

    def test_dual_signs_follow_convention(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            lp, a, senses, b, c, lo, hi = random_bounded_lp(rng)
            sol = solve_lp(lp)
            assert sol.status is SolveStatus.OPTIMAL
            for i, s in enumerate(senses):
                if s == LE:
                    assert sol.duals[i] <= 1e-7
                elif s == GE:
                    assert sol.duals[i] >= -1e-7

    def test_deterministic_resolve(self):
        rng = np.random.default_rng(3)
        lp, *_ = random_bounded_lp(rng)
        s1 = solve_lp(lp)
        s2 = solve_lp(lp)
        assert np.array_equal(s1.x, s2.x)
        assert np.array_equal(s1.duals, s2.duals)
        assert s1.objective == s2.objective


class TestLpAgainstOracles:
    def test_random_lps_match_vertex_enumeration(self):
        rng = np.random.default_rng(42)
        checked = 0
        for _ in range(30):
            lp, a, senses, b, c, lo, hi = random_bounded_lp(rng)
            sol = solve_lp(lp)
            assert sol.status is SolveStatus.OPTIMAL
            oracle = vertex_enumeration_optimum(a, senses, b, c, lo, hi)
            assert oracle is not None
            assert sol.objective == pytest.approx(oracle, abs=1e-8 * (1 + abs(oracle)))
            checked += 1
        assert checked == 30

    def test_random_lps_match_scipy(self):
        rng = np.random.default_rng(99)
        for _ in range(30):
            lp, a, senses, b, c, lo, hi = random_bounded_lp(rng)
            sol = solve_lp(lp)
            a_ub, b_ub, a_eq, b_eq = [], [], [], []
            for i, s in enumerate(senses):
                if s == LE:
                    a_ub.append(a[i])
                    b_ub.append(b[i])
                elif s == GE:
                    a_ub.append(-a[i])
                    b_ub.append(-b[i])
                else:
                    a_eq.append(a[i])
                    b_eq.append(b[i])
            res = scipy.optimize.linprog(
                c, A_ub=np.array(a_ub) if a_ub else None,
                b_ub=np.array(b_ub) if b_ub else None,
                A_eq=np.array(a_eq) if a_eq else None,
                b_eq=np.array(b_eq) if b_eq else None,
                bounds=list(zip(lo, hi)), method="highs")
            assert res.status == 0
            assert sol.objective == pytest.approx(res.fun, abs=1e-7 * (1 + abs(res.fun)))

    def test_strong_duality_checker_accepts_optimal(self):
        rng = np.random.default_rng(5)
        lp, *_ = random_bounded_lp(rng)
        sol = solve_lp(lp)
        check_solution(lp, sol)  # raises on violation


class TestMilp:
    def test_integral_relaxation_short_circuits(self):
        lp = LinearProgram()
        x = lp.add_variable("x", 0, 1, obj=-1.0)
        lp.add_row({x: 1.0}, LE, 1.0)
        relax = solve_lp(lp)
        sol = solve_milp(MilpRequest(lp, [x]))
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.objective == pytest.approx(relax.objective, abs=1e-9)
        assert abs(sol.x[x] - 1.0) < 1e-6

    def test_knapsack_matches_enumeration(self):
        rng = np.random.default_rng(11)
        for _ in range(8):
            values = rng.uniform(1, 10, size=5)
            weights = rng.uniform(1, 5, size=5)
            cap = float(weights.sum() * rng.uniform(0.3, 0.7))
            lp = LinearProgram()
            for j in range(5):
                lp.add_variable(f"b{j}", 0, 1, obj=-values[j])
            lp.add_row({j: weights[j] for j in range(5)}, LE, cap)
            sol = solve_milp(MilpRequest(lp, range(5)))
            best = min(
                (-float(values @ np.array(bits)) for bits in itertools.product([0, 1], repeat=5)
                 if float(weights @ np.array(bits)) <= cap + 1e-12),
            )
            assert sol.status is SolveStatus.OPTIMAL
            assert sol.objective == pytest.approx(best, abs=1e-8)
            assert np.all(np.abs(sol.x - np.round(sol.x)) < 1e-6)

    def test_infeasible_binary_system(self):
        lp = LinearProgram()
        x1 = lp.add_variable("x1", 0, 1)
        x2 = lp.add_variable("x2", 0, 1)
        lp.add_row({x1: 1.0, x2: 1.0}, LE, 1.0)
        lp.add_row({x1: 1.0}, GE, 1.0)
        lp.add_row({x2: 1.0}, GE, 1.0)
        sol = solve_milp(MilpRequest(lp, [x1, x2]))
        assert sol.status is SolveStatus.INFEASIBLE

    def test_incumbent_not_below_root_relaxation(self):
        rng = np.random.default_rng(21)
        values = rng.uniform(1, 10, size=6)
        weights = rng.uniform(1, 5, size=6)
        lp = LinearProgram()
        for j in range(6):
            lp.add_variable(f"b{j}", 0, 1, obj=-values[j])
        lp.add_row({j: weights[j] for j in range(6)}, LE, float(weights.sum()) * 0.5)
        root = solve_lp(lp)
        sol = solve_milp(MilpRequest(lp, range(6)))
        assert sol.objective >= root.objective - 1e-6

    def test_node_limit_reports_gap(self):
        rng = np.random.default_rng(5)
        n = 10
        values = rng.uniform(1, 10, size=n)
        weights = rng.uniform(1, 5, size=n)
        lp = LinearProgram()
        for j in range(n):
            lp.add_variable(f"b{j}", 0, 1, obj=-values[j])
        lp.add_row({j: weights[j] for j in range(n)}, LE, float(weights.sum()) * 0.5)
        sol = solve_milp(MilpRequest(lp, range(n), rel_gap=0.0, node_limit=3))
        assert sol.mip_gap is not None
        assert sol.mip_nodes <= 3


def test_lp_text_dump_mentions_all_sections():
    lp = LinearProgram(name="dump-check")
    x = lp.add_variable("x", 0, 10, obj=1.5)
    y = lp.add_variable("y", -INF, INF)
    lp.add_row({x: 1.0, y: -2.0}, GE, 1.0, "r_first")
    text = write_lp_text(lp)
    assert "Minimize" in text and "Subject To" in text and "Bounds" in text
    assert "r_first" in text and "y free" in text and text.endswith("End\n")
