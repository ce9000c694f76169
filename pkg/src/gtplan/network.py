"""DC network machinery: incidence matrix, relaxation constants for
candidate circuits, and the Kirchhoff constraint rows of one stage LP block.

Candidate-circuit voltage law rows use the disjunctive form

    |f_k - gamma_k (theta_F - theta_T)| <= M_k (1 - x_k)

expanded into two one-sided rows.  M_k is calibrated as the smallest value
that still relaxes the row for any feasible angle spread of the existing
network: gamma_k times the shortest-path distance between the terminals with
edge length rating/susceptance (a parallel existing circuit is the one-edge
special case).  Terminals with no existing path fall back to a configured
cap and are flagged.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from gtplan.errors import DataError
from gtplan.model import Bus, Circuit, PlanningCase
from gtplan.solver import EQ, GE, LE, LinearProgram

DEFAULT_M_FALLBACK = 1e5


def incidence_matrix(buses: tuple[Bus, ...], circuits: tuple[Circuit, ...]) -> np.ndarray:
    """N x K matrix with +1 at each circuit's from-bus and -1 at its to-bus."""
    index = {b.id: n for n, b in enumerate(buses)}
    s = np.zeros((len(buses), len(circuits)))
    for k, c in enumerate(circuits):
        if c.from_bus not in index or c.to_bus not in index:
            raise DataError(f"circuit {c.id}: unknown terminal bus")
        if c.from_bus == c.to_bus:
            raise DataError(f"circuit {c.id}: self loop")
        s[index[c.from_bus], k] = 1.0
        s[index[c.to_bus], k] = -1.0
    return s


def _shortest_angle_distance(buses, existing, src: str, dst: str) -> float:
    """Dijkstra over existing circuits with edge length rating/susceptance.

    The length of an edge bounds the achievable angle difference across it,
    so the shortest-path distance bounds the spread between src and dst.
    """
    adj: dict[str, list[tuple[str, float]]] = {b.id: [] for b in buses}
    for c in existing:
        length = c.rating / c.susceptance
        adj[c.from_bus].append((c.to_bus, length))
        adj[c.to_bus].append((c.from_bus, length))
    dist = {src: 0.0}
    heap = [(0.0, src)]
    while heap:
        d, node = heapq.heappop(heap)
        if node == dst:
            return d
        if d > dist.get(node, np.inf):
            continue
        for nxt, w in adj[node]:
            nd = d + w
            if nd < dist.get(nxt, np.inf):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return np.inf


def calibrate_big_m(buses: tuple[Bus, ...], circuits: tuple[Circuit, ...],
                    candidate: Circuit, m_fallback: float = DEFAULT_M_FALLBACK,
                    ) -> tuple[float, bool]:
    """Relaxation constant for one candidate circuit.

    Returns (M, used_fallback).  A parallel existing circuit gives
    M = gamma * min(rating0/gamma0) over the parallel circuits; otherwise M is
    gamma times the shortest angle distance between the terminals over the
    existing network; disconnected terminals take the fallback cap.
    """
    existing = [c for c in circuits if c.status == "existing"]
    ends = {candidate.from_bus, candidate.to_bus}
    parallel = [c for c in existing if {c.from_bus, c.to_bus} == ends]
    if parallel:
        ratio = min(c.rating / c.susceptance for c in parallel)
        return candidate.susceptance * ratio, False
    dist = _shortest_angle_distance(buses, existing, candidate.from_bus, candidate.to_bus)
    if np.isfinite(dist):
        return candidate.susceptance * dist, False
    return m_fallback, True


@dataclass(frozen=True)
class NetworkTopology:
    buses: tuple[Bus, ...]
    circuits: tuple[Circuit, ...]
    incidence: np.ndarray
    susceptance: np.ndarray
    rating: np.ndarray
    candidate_indices: tuple[int, ...]
    big_m: dict[int, float]
    fallback_circuits: tuple[int, ...]

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_circuits(self) -> int:
        return len(self.circuits)


def build_topology(case: PlanningCase, m_fallback: float = DEFAULT_M_FALLBACK) -> NetworkTopology:
    s = incidence_matrix(case.buses, case.circuits)
    gamma = np.array([c.susceptance for c in case.circuits])
    rating = np.array([c.rating for c in case.circuits])
    cand = tuple(k for k, c in enumerate(case.circuits) if c.status == "candidate")
    big_m: dict[int, float] = {}
    flagged: list[int] = []
    for k in cand:
        m, fb = calibrate_big_m(case.buses, case.circuits, case.circuits[k], m_fallback)
        big_m[k] = m
        if fb:
            flagged.append(k)
    return NetworkTopology(case.buses, case.circuits, s, gamma, rating, cand,
                           big_m, tuple(flagged))


def reference_buses(topology: NetworkTopology, availability: np.ndarray) -> list[int]:
    """Lowest-index bus of each connected component, over existing circuits
    plus candidates with any build fraction; one angle is pinned per
    component so the LP stays well posed."""
    parent = list(range(topology.n_buses))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    index = {b.id: n for n, b in enumerate(topology.buses)}
    for k, c in enumerate(topology.circuits):
        if c.status == "candidate" and availability[k] <= 1e-9:
            continue
        ra, rb = find(index[c.from_bus]), find(index[c.to_bus])
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return sorted({find(n) for n in range(topology.n_buses)})


@dataclass
class DcRowIndex:
    """Row positions of one block's network constraints inside a stage LP."""

    balance: dict[int, int] = field(default_factory=dict)           # bus -> row
    kvl_existing: dict[int, int] = field(default_factory=dict)      # circuit -> row
    kvl_candidate: dict[int, tuple[int, int]] = field(default_factory=dict)
    flow_candidate: dict[int, tuple[int, int]] = field(default_factory=dict)
    reference: list[int] = field(default_factory=list)


def emit_dc_rows(lp: LinearProgram, topology: NetworkTopology,
                 flow_vars: dict[int, int], theta_vars: dict[int, int],
                 injection_terms: dict[int, dict[int, float]],
                 net_load: np.ndarray, availability: np.ndarray,
                 tag: str = "") -> DcRowIndex:
    """Emit one block's DC rows into ``lp``.

    ``injection_terms[n]`` maps variable index -> coefficient for every
    generation-side variable feeding bus n (thermal/hydro block power,
    deficit).  ``net_load`` is demand minus fixed renewable injection per
    bus.  ``availability[k]`` is the build fraction of circuit k (1 for
    existing).  Flow variable bounds for existing circuits are assumed set
    to +-rating by the caller; candidate flow limits become explicit rows so
    their duals are available.
    """
    idx = DcRowIndex()
    s = topology.incidence
    cand = set(topology.candidate_indices)

    for n in range(topology.n_buses):
        coeffs = dict(injection_terms.get(n, {}))
        for k in range(topology.n_circuits):
            if s[n, k] != 0.0:
                coeffs[flow_vars[k]] = coeffs.get(flow_vars[k], 0.0) + s[n, k]
        idx.balance[n] = lp.add_row(coeffs, EQ, float(net_load[n]),
                                    f"balance{tag}_n{n}")

    for k, c in enumerate(topology.circuits):
        gamma = topology.susceptance[k]
        nf = theta_vars[_bus_pos(topology, c.from_bus)]
        nt = theta_vars[_bus_pos(topology, c.to_bus)]
        base = {flow_vars[k]: 1.0, nf: -gamma, nt: gamma}
        if k not in cand:
            idx.kvl_existing[k] = lp.add_row(base, EQ, 0.0, f"kvl{tag}_k{k}")
        else:
            slack = topology.big_m[k] * (1.0 - float(availability[k]))
            up = lp.add_row(base, LE, slack, f"kvlup{tag}_k{k}")
            dn = lp.add_row(base, GE, -slack, f"kvldn{tag}_k{k}")
            idx.kvl_candidate[k] = (up, dn)
            cap = topology.rating[k] * float(availability[k])
            fup = lp.add_row({flow_vars[k]: 1.0}, LE, cap, f"fup{tag}_k{k}")
            fdn = lp.add_row({flow_vars[k]: 1.0}, GE, -cap, f"fdn{tag}_k{k}")
            idx.flow_candidate[k] = (fup, fdn)

    for n in reference_buses(topology, availability):
        idx.reference.append(lp.add_row({theta_vars[n]: 1.0}, EQ, 0.0, f"ref{tag}_n{n}"))
    return idx


def _bus_pos(topology: NetworkTopology, bus_id: str) -> int:
    for n, b in enumerate(topology.buses):
        if b.id == bus_id:
            return n
    raise DataError(f"unknown bus {bus_id!r}")
