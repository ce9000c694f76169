"""Independent oracles used by the test suite.

The extensive-form oracle formulates the whole multistage operation problem
directly (one variable block per scenario-tree node) and solves it with
scipy's LP solver; it shares no assembly code with the package.  Candidate
devices are handled by their disjunctive semantics: an unbuilt circuit is
simply absent, a built one behaves like an existing circuit.
"""

import itertools
import math

import numpy as np
import scipy.optimize


class TreeNode:
    def __init__(self, stage, parent, inflow, prob, scenario=0):
        self.stage = stage
        self.parent = parent
        self.inflow = np.asarray(inflow, dtype=float)
        self.prob = prob
        self.scenario = scenario


def deterministic_chain(case):
    """Node chain for a noise-free case: inflows follow initial values then
    the per-stage means (the conditioning collapses when std is zero)."""
    nodes = []
    inflow = np.asarray(case.initial_inflows, dtype=float)
    for t in range(case.horizon):
        if t > 0:
            inflow = case.inflow.mean[t] if case.inflow is not None else np.zeros(0)
        nodes.append(TreeNode(t, t - 1 if t else -1, inflow, 1.0))
    return nodes


def two_stage_tree(case, openings):
    """Root node plus one equiprobable leaf per conditioned opening."""
    root = TreeNode(0, -1, np.asarray(case.initial_inflows, dtype=float), 1.0)
    leaves = [TreeNode(1, 0, op, 1.0 / len(openings)) for op in openings]
    return [root] + leaves


def extensive_form_cost(case, plan_values, nodes, fixed_root_storage=None):
    """Exact discounted expected operation cost of a binary plan over the
    given scenario tree.  plan_values is (horizon, n_projects) of 0/1."""
    plan_values = np.asarray(plan_values, dtype=float)
    beta = 1.0 / (1.0 + case.stage_discount_rate)
    hours = np.array([blk.duration_fraction * case.stage_hours for blk in case.demand])
    n_i, n_j = len(case.hydros), len(case.thermals)
    n_k, n_n, n_b = len(case.circuits), len(case.buses), len(case.demand)
    bus_pos = {b.id: n for n, b in enumerate(case.buses)}
    hydro_pos = {h.id: i for i, h in enumerate(case.hydros)}
    proj_cols = {p.id: c for c, p in enumerate(case.candidates)}

    def avail(device, t):
        if device.status == "existing":
            return 1.0
        for proj in case.candidates:
            if proj.target_device_id == device.id:
                return float(plan_values[t, proj_cols[proj.id]])
        return 0.0

    per_node = n_i * 3 + n_i * n_b + n_j * n_b + n_k * n_b + n_n * n_b * 3
    n_var = per_node * len(nodes)

    def base(node_idx):
        return node_idx * per_node

    def var(node_idx, kind, *pos):
        off = base(node_idx)
        if kind == "v":
            return off + pos[0]
        off += n_i
        if kind == "u":
            return off + pos[0]
        off += n_i
        if kind == "sp":
            return off + pos[0]
        off += n_i
        if kind == "pe":
            return off + pos[0] * n_b + pos[1]
        off += n_i * n_b
        if kind == "g":
            return off + pos[0] * n_b + pos[1]
        off += n_j * n_b
        if kind == "f":
            return off + pos[0] * n_b + pos[1]
        off += n_k * n_b
        if kind == "th":
            return off + pos[0] * n_b + pos[1]
        off += n_n * n_b
        if kind == "df":
            return off + pos[0] * n_b + pos[1]
        off += n_n * n_b
        if kind == "cu":
            return off + pos[0] * n_b + pos[1]
        raise KeyError(kind)

    c = np.zeros(n_var)
    bounds = [(0.0, None)] * n_var
    a_eq, b_eq = [], []

    for ni, node in enumerate(nodes):
        t = node.stage
        weight = node.prob * beta ** t
        for i, h in enumerate(case.hydros):
            a_h = avail(h, t)
            bounds[var(ni, "v", i)] = (0.0, h.max_storage * a_h)
            bounds[var(ni, "u", i)] = (0.0, h.max_turbining * a_h)
            bounds[var(ni, "sp", i)] = (0.0, None)
            for b in range(n_b):
                bounds[var(ni, "pe", i, b)] = (0.0, h.max_block_power)
        for j, th in enumerate(case.thermals):
            for b in range(n_b):
                bounds[var(ni, "g", j, b)] = (0.0, th.capacity * avail(th, t))
                c[var(ni, "g", j, b)] = weight * th.variable_cost * hours[b]
        for k, circ in enumerate(case.circuits):
            in_service = avail(circ, t) > 0.5
            for b in range(n_b):
                bounds[var(ni, "f", k, b)] = (-circ.rating, circ.rating) if in_service else (0.0, 0.0)
        for n in range(n_n):
            for b in range(n_b):
                bounds[var(ni, "th", n, b)] = (None, None)
                c[var(ni, "df", n, b)] = weight * case.deficit_cost * hours[b]

        for i, h in enumerate(case.hydros):
            row = np.zeros(n_var)
            row[var(ni, "v", i)] = 1.0
            row[var(ni, "u", i)] = 1.0
            row[var(ni, "sp", i)] = 1.0
            for up in h.upstream_ids:
                row[var(ni, "u", hydro_pos[up])] -= 1.0
                row[var(ni, "sp", hydro_pos[up])] -= 1.0
            rhs = node.inflow[i]
            if node.parent < 0:
                rhs += (fixed_root_storage[i] if fixed_root_storage is not None
                        else h.initial_storage)
            else:
                row[var(node.parent, "v", i)] = -1.0
            a_eq.append(row)
            b_eq.append(rhs)

            row = np.zeros(n_var)
            for b in range(n_b):
                row[var(ni, "pe", i, b)] = hours[b]
            row[var(ni, "u", i)] = -h.production_coefficient
            a_eq.append(row)
            b_eq.append(0.0)

        for b in range(n_b):
            for n in range(n_n):
                row = np.zeros(n_var)
                for k, circ in enumerate(case.circuits):
                    if bus_pos[circ.from_bus] == n:
                        row[var(ni, "f", k, b)] += 1.0
                    if bus_pos[circ.to_bus] == n:
                        row[var(ni, "f", k, b)] -= 1.0
                for i, h in enumerate(case.hydros):
                    if bus_pos[h.bus] == n:
                        row[var(ni, "pe", i, b)] = 1.0
                for j, th in enumerate(case.thermals):
                    if bus_pos[th.bus] == n:
                        row[var(ni, "g", j, b)] = 1.0
                row[var(ni, "df", n, b)] = 1.0
                row[var(ni, "cu", n, b)] = -1.0
                load = case.demand[b].loads[t, n]
                for r in case.renewables:
                    if bus_pos[r.bus] == n:
                        load -= r.production[t, b, node.scenario] * avail(r, t)
                a_eq.append(row)
                b_eq.append(load)

            in_service = [k for k, circ in enumerate(case.circuits) if avail(circ, t) > 0.5]
            for k in in_service:
                circ = case.circuits[k]
                row = np.zeros(n_var)
                row[var(ni, "f", k, b)] = 1.0
                row[var(ni, "th", bus_pos[circ.from_bus], b)] = -circ.susceptance
                row[var(ni, "th", bus_pos[circ.to_bus], b)] = circ.susceptance
                a_eq.append(row)
                b_eq.append(0.0)

            # one angle reference per connected component of in-service circuits
            parent = list(range(n_n))

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            for k in in_service:
                circ = case.circuits[k]
                ra, rb = find(bus_pos[circ.from_bus]), find(bus_pos[circ.to_bus])
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
            for ref in sorted({find(n) for n in range(n_n)}):
                row = np.zeros(n_var)
                row[var(ni, "th", ref, b)] = 1.0
                a_eq.append(row)
                b_eq.append(0.0)

    res = scipy.optimize.linprog(c, A_eq=np.array(a_eq), b_eq=np.array(b_eq),
                                 bounds=bounds, method="highs")
    assert res.status == 0, f"oracle LP failed: {res.message}"
    return float(res.fun)


def oracle_investment_cost(case, entries):
    """Independent discounted investment cost of a plan given as
    {project_id: entry_stage}."""
    total = 0.0
    for proj in case.candidates:
        if proj.id not in entries:
            continue
        t = entries[proj.id]
        base = proj.overnight_cost
        if proj.cost_basis == "per_kw":
            base *= proj.capacity_mw * 1000.0
        if proj.capex_multiplier_per_stage:
            base *= proj.capex_multiplier_per_stage[t]
        pv = sum(q / (1.0 + proj.wacc) ** y for y, q in enumerate(proj.payment_schedule))
        total += base * pv / (1.0 + case.stage_discount_rate) ** t
    return total


def plan_matrix(case, entries):
    vals = np.zeros((case.horizon, len(case.candidates)))
    cols = {p.id: c for c, p in enumerate(case.candidates)}
    for pid, t in entries.items():
        vals[t:, cols[pid]] = 1.0
    return vals


def satisfies_logic(case, entries):
    for lc in case.logic_constraints:
        stages = [entries.get(pid) for pid in lc.project_ids]
        if lc.kind == "exclusive":
            if sum(s is not None for s in stages) > 1:
                return False
        elif lc.kind == "associated":
            if stages[0] != stages[1]:
                return False
        else:  # precedence: first enters no later than the second
            if stages[1] is not None and (stages[0] is None or stages[0] > stages[1]):
                return False
    return True


def enumerate_best_plan(case):
    """Exhaustive oracle: every monotone binary plan, costed by the
    extensive-form LP plus the independent investment formula."""
    options = []
    for proj in case.candidates:
        options.append([None] + list(range(proj.earliest_stage, case.horizon)))
    best = (math.inf, None)
    for combo in itertools.product(*options):
        entries = {proj.id: stage for proj, stage in zip(case.candidates, combo)
                   if stage is not None}
        if not satisfies_logic(case, entries):
            continue
        vals = plan_matrix(case, entries)
        cost = oracle_investment_cost(case, entries)
        cost += extensive_form_cost(case, vals, deterministic_chain(case))
        if cost < best[0] - 1e-12:
            best = (cost, entries)
    return best
