"""Reference solvers and the optimality gap.

Exact: Held-Karp for TSP up to 20 nodes, subset DP for CVRP up to 8
customers. Heuristic: nearest neighbor construction and 2-opt.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, SizeError
from .instances import CVRP, TSP, Instance, check_tour, cvrp_routes, tour_cost
from .rollout import Tour

HELD_KARP_MAX_N = 20
CVRP_EXACT_MAX_CUSTOMERS = 8
EXACT = "exact"
HEURISTIC = "heuristic"


@dataclass
class Reference:
    tour: Tour
    quality: str
    solver: str
    runtime: float

    @property
    def cost(self) -> float:
        return self.tour.cost

    def to_json(self) -> dict:
        out = self.tour.to_json()
        out.update(solver=self.solver, quality=self.quality, runtime=self.runtime)
        return out


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def _reference(instance, indices, quality, solver, t0) -> Reference:
    indices = [int(i) for i in indices]
    cost = tour_cost(instance, indices)
    return Reference(Tour(indices, cost, meta={"solver": solver}), quality, solver,
                     time.perf_counter() - t0)


# --------------------------------------------------------------------------
# exact


def _held_karp_path(dist: np.ndarray, nodes: Sequence[int], origin: int):
    """Shortest cycle from ``origin`` through all ``nodes``; returns (cost, order)."""
    m = len(nodes)
    if m == 0:
        return 0.0, []
    nodes = np.asarray(nodes)
    d = dist[np.ix_(nodes, nodes)]
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int8)
    for j in range(m):
        dp[1 << j, j] = dist[origin, nodes[j]]
    masks = np.arange(full)
    popcount = np.zeros(full, dtype=np.int64)
    for j in range(m):
        popcount += (masks >> j) & 1
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for k in range(m):
            sel = layer[(layer >> k) & 1 == 1]
            prev = sel ^ (1 << k)
            cand = dp[prev] + d[:, k]
            arg = cand.argmin(axis=1)
            dp[sel, k] = cand[np.arange(len(sel)), arg]
            parent[sel, k] = arg
    back = dist[nodes, origin]
    closing = dp[full - 1] + back
    last = int(closing.argmin())
    cost = float(closing[last])
    order = []
    mask = full - 1
    while last >= 0:
        order.append(int(nodes[last]))
        prev = int(parent[mask, last])
        mask ^= 1 << last
        last = prev
    return cost, order[::-1]


def held_karp(instance: Instance) -> Reference:
    """Optimal TSP tour by dynamic programming over subsets (n <= 20)."""
    if instance.kind != TSP:
        raise ContractError("held_karp solves TSP instances")
    if instance.n > HELD_KARP_MAX_N:
        raise SizeError(f"held_karp supports n <= {HELD_KARP_MAX_N}, got {instance.n}")
    t0 = time.perf_counter()
    dist = distance_matrix(instance.coords)
    _, order = _held_karp_path(dist, list(range(1, instance.n)), 0)
    return _reference(instance, [0] + order, EXACT, "held_karp", t0)


def cvrp_exact_tiny(instance: Instance) -> Reference:
    """Optimal CVRP solution by subset DP: best route per customer subset, then
    the best partition into capacity-feasible subsets (<= 8 customers)."""
    if instance.kind != CVRP:
        raise ContractError("cvrp_exact_tiny solves CVRP instances")
    m = instance.n - 1
    if m > CVRP_EXACT_MAX_CUSTOMERS:
        raise SizeError(f"cvrp_exact_tiny supports <= {CVRP_EXACT_MAX_CUSTOMERS} customers, got {m}")
    t0 = time.perf_counter()
    dist = distance_matrix(instance.coords)
    customers = list(range(1, instance.n))
    demand = instance.demands
    full = 1 << m

    route_cost = np.full(full, np.inf)
    route_order = [None] * full
    route_cost[0] = 0.0
    route_order[0] = []
    for mask in range(1, full):
        members = [customers[j] for j in range(m) if mask >> j & 1]
        if demand[members].sum() > instance.capacity:
            continue
        route_cost[mask], route_order[mask] = _held_karp_path(dist, members, 0)

    best = np.full(full, np.inf)
    choice = np.zeros(full, dtype=np.int64)
    best[0] = 0.0
    for mask in range(1, full):
        low = mask & -mask
        rest = mask ^ low
        sub = rest
        while True:
            s = sub | low
            c = route_cost[s] + best[mask ^ s]
            if c < best[mask]:
                best[mask], choice[mask] = c, s
            if sub == 0:
                break
            sub = (sub - 1) & rest
    tour = [0]
    mask = full - 1
    while mask:
        s = int(choice[mask])
        tour += route_order[s] + [0]
        mask ^= s
    return _reference(instance, tour[:-1] if len(tour) > 1 else tour, EXACT, "cvrp_subset_dp", t0)


# --------------------------------------------------------------------------
# heuristics


def nearest_neighbor(instance: Instance, start: int = 0) -> Reference:
    """Greedy nearest feasible node; CVRP returns to the depot when nothing fits."""
    t0 = time.perf_counter()
    dist = distance_matrix(instance.coords)
    n = instance.n
    visited = np.zeros(n, dtype=bool)
    if instance.is_cvrp:
        start = instance.depot
    visited[start] = True
    tour = [start]
    cur = start
    load = instance.capacity if instance.is_cvrp else None
    remaining = n - 1
    while remaining:
        ok = ~visited
        if instance.is_cvrp:
            ok &= instance.demands <= load
            ok[instance.depot] = False
            if not ok.any():
                tour.append(instance.depot)
                cur, load = instance.depot, instance.capacity
                continue
        cand = np.flatnonzero(ok)
        nxt = int(cand[np.argmin(dist[cur, cand])])  # argmin keeps the lowest index on ties
        visited[nxt] = True
        tour.append(nxt)
        if instance.is_cvrp:
            load -= int(instance.demands[nxt])
        cur = nxt
        remaining -= 1
    return _reference(instance, tour, HEURISTIC, "nearest_neighbor", t0)


def _two_opt_cycle(dist: np.ndarray, order: np.ndarray, max_passes: Optional[int]):
    order = np.asarray(order).copy()
    n = len(order)
    if n < 4:
        return order, 0
    i_idx, j_idx = np.triu_indices(n, k=2)
    keep = ~((i_idx == 0) & (j_idx == n - 1))
    i_idx, j_idx = i_idx[keep], j_idx[keep]
    passes = 0
    while max_passes is None or passes < max_passes:
        nxt = np.roll(order, -1)
        a, b = order[i_idx], nxt[i_idx]
        c, d = order[j_idx], nxt[j_idx]
        delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
        best = int(np.argmin(delta))
        passes += 1
        if delta[best] >= -1e-12:
            break
        i, j = i_idx[best], j_idx[best]
        order[i + 1: j + 1] = order[i + 1: j + 1][::-1].copy()
    return order, passes


def two_opt(instance: Instance, tour: Sequence[int], max_passes: Optional[int] = None) -> Reference:
    """Best-improvement 2-opt; one pass applies the single best exchange.

    CVRP tours are improved route by route (each route with the depot).
    """
    t0 = time.perf_counter()
    check_tour(instance, tour)
    dist = distance_matrix(instance.coords)
    if instance.kind == TSP:
        order, _ = _two_opt_cycle(dist, np.asarray(tour), max_passes)
        return _reference(instance, order, HEURISTIC, "two_opt", t0)
    out = []
    for route in cvrp_routes(tour, instance.depot):
        order, _ = _two_opt_cycle(dist, np.asarray([instance.depot] + route), max_passes)
        k = int(np.flatnonzero(order == instance.depot)[0])
        order = np.roll(order, -k)
        out += [int(v) for v in order]
    return _reference(instance, out, HEURISTIC, "two_opt", t0)


def near_optimal(instance: Instance, n_starts: int = 10, seed: int = 0) -> Reference:
    """Best of ``n_starts`` nearest-neighbor tours, each polished by 2-opt."""
    t0 = time.perf_counter()
    if instance.is_cvrp:
        starts = [instance.depot]
    else:
        rng = np.random.default_rng(seed)
        starts = [0] + [int(s) for s in rng.permutation(np.arange(1, instance.n))[: n_starts - 1]]
    best = None
    for s in starts:
        ref = two_opt(instance, nearest_neighbor(instance, s).tour.indices)
        if best is None or ref.cost < best.cost:
            best = ref
    best.solver = "nn_two_opt"
    best.tour.meta["solver"] = best.solver
    best.runtime = time.perf_counter() - t0
    return best


def exact_or_none(instance: Instance) -> Optional[Reference]:
    if instance.kind == TSP and instance.n <= HELD_KARP_MAX_N:
        return held_karp(instance)
    if instance.kind == CVRP and instance.n - 1 <= CVRP_EXACT_MAX_CUSTOMERS:
        return cvrp_exact_tiny(instance)
    return None


def gap(model_cost: float, ref_cost: float) -> float:
    """Percentage gap of ``model_cost`` over ``ref_cost``."""
    if not ref_cost > 0:
        raise ContractError(f"reference cost must be positive, got {ref_cost}")
    return (model_cost - ref_cost) / ref_cost * 100.0
