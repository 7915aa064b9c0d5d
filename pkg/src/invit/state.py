"""The routing MDP: feasibility, the potential candidate set, nested k-NN views
and the invariant layer (per-view normalization plus clipping projection).

Two implementations share the same conventions:

* ``State`` and the free functions operate on one partial tour with numpy and
  have value semantics; they are the readable reference.
* ``BatchState`` / ``build_views`` do the same for a batch of same-size
  instances with torch and feed the policy network.

Conventions: distances are measured in instance coordinates, k-NN ties are
broken by node index, and for CVRP the depot is node 0. The depot is never
ranked among the k-NN; it is a candidate whenever it is a feasible action.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ContractError, InfeasibleTourError, TerminalStateError
from .instances import Instance

log = logging.getLogger(__name__)

# per-node feature width: normalized x, y and one load scalar
N_FEATURES = 3


@dataclass
class State:
    instance: Instance
    visited: np.ndarray
    partial_tour: list
    first: int
    last: int
    remaining_capacity: Optional[int] = None
    step: int = 0

    @property
    def terminal(self) -> bool:
        if self.instance.is_cvrp:
            return bool(self.visited[1:].all())
        return bool(self.visited.all())


def init_state(instance: Instance, start: int = 0) -> State:
    if not 0 <= start < instance.n:
        raise ContractError(f"start {start} out of range")
    if instance.is_cvrp and start != instance.depot:
        raise ContractError(f"CVRP tours start at the depot ({instance.depot}), got {start}")
    visited = np.zeros(instance.n, dtype=bool)
    visited[start] = True
    cap = instance.capacity if instance.is_cvrp else None
    return State(instance, visited, [start], start, start, cap, 0)


def feasible_actions(state: State) -> np.ndarray:
    if state.terminal:
        raise TerminalStateError("state is terminal")
    inst = state.instance
    if not inst.is_cvrp:
        return np.flatnonzero(~state.visited)
    ok = ~state.visited & (inst.demands <= state.remaining_capacity)
    ok[inst.depot] = False
    customers = np.flatnonzero(ok)
    if len(customers) == 0:
        return np.array([inst.depot])
    if state.last != inst.depot:
        return np.concatenate([[inst.depot], customers])
    return customers


def _ranked_neighbors(state: State) -> np.ndarray:
    """Feasible non-depot actions sorted by distance to the last node, ties by index."""
    feas = feasible_actions(state)
    if state.instance.is_cvrp:
        feas = feas[feas != state.instance.depot]
    coords = state.instance.coords
    dist = np.linalg.norm(coords[feas] - coords[state.last], axis=1)
    order = np.lexsort((feas, dist))
    return feas[order]


def candidate_set(state: State, k_min: int) -> np.ndarray:
    """The potential candidate set: feasible k-NN of the last node (+ depot when feasible)."""
    ranked = _ranked_neighbors(state)[:k_min]
    if state.instance.is_cvrp:
        feas = feasible_actions(state)
        if state.instance.depot in feas:
            ranked = np.concatenate([ranked, [state.instance.depot]])
    return ranked


def apply_action(state: State, node: int) -> State:
    feas = feasible_actions(state)
    if node not in feas:
        raise InfeasibleTourError(f"node {node} is not a feasible action", int(node))
    inst = state.instance
    visited = state.visited.copy()
    visited[node] = True
    cap = state.remaining_capacity
    if inst.is_cvrp:
        cap = inst.capacity if node == inst.depot else cap - int(inst.demands[node])
    return replace(
        state,
        visited=visited,
        partial_tour=state.partial_tour + [int(node)],
        last=int(node),
        remaining_capacity=cap,
        step=state.step + 1,
    )


def invariant_normalize(points: np.ndarray, projected: Optional[np.ndarray] = None):
    """Min-subtract per axis and divide by the largest axis extent of ``points``.

    ``projected`` points are mapped the same way and clipped to the unit square.
    A set of coincident points normalizes to zeros.
    """
    points = np.asarray(points, dtype=np.float64)
    lo = points.min(axis=0)
    scale = float((points.max(axis=0) - lo).max())
    if scale == 0.0:
        log.warning("degenerate view: all %d points coincide", len(points))
        out = np.zeros_like(points)
        proj = None if projected is None else np.zeros_like(np.asarray(projected, dtype=np.float64))
        return out, proj
    out = (points - lo) / scale
    proj = None
    if projected is not None:
        proj = np.clip((np.asarray(projected, dtype=np.float64) - lo) / scale, 0.0, 1.0)
    return out, proj


@dataclass
class View:
    k: int
    neighbors: np.ndarray  # node ids, nearest first
    last: int
    first: int
    first_projected: bool
    # rows: neighbors..., last, first
    coords: np.ndarray = field(repr=False)


@dataclass
class ViewSet:
    k_list: list
    views: list
    candidate_indices: np.ndarray


def extract_views(state: State, k_list: Sequence[int], invariant: bool = True) -> ViewSet:
    if len(k_list) == 0:
        raise ContractError("k_list must not be empty")
    if any(a <= b for a, b in zip(k_list, k_list[1:])):
        raise ContractError(f"k_list must be strictly descending, got {list(k_list)}")
    inst = state.instance
    ranked = _ranked_neighbors(state)
    first = inst.depot if inst.is_cvrp else state.partial_tour[0]
    first_in_set = bool(inst.is_cvrp and inst.depot in feasible_actions(state))
    views = []
    for k in k_list:
        nbrs = ranked[:k]
        members = np.concatenate([nbrs, [state.last]] + ([[first]] if first_in_set else []))
        pts = inst.coords[members]
        if invariant:
            norm, proj = invariant_normalize(pts, None if first_in_set else inst.coords[[first]])
            first_xy = norm[-1:] if first_in_set else proj
            coords = np.concatenate([norm[: len(nbrs) + 1], first_xy])
        else:
            coords = inst.coords[np.concatenate([nbrs, [state.last, first]])]
        views.append(View(k, nbrs, state.last, first, not first_in_set, coords))
    return ViewSet(list(k_list), views, candidate_set(state, min(k_list)))


# --------------------------------------------------------------------------
# batched implementation


class BatchState:
    """Mutable rollout state for ``B`` same-size instances of one kind."""

    def __init__(self, coords: torch.Tensor, start: torch.Tensor,
                 demands: Optional[torch.Tensor] = None, capacity: Optional[torch.Tensor] = None):
        self.coords = coords.to(torch.float64)
        B, n, _ = coords.shape
        self.B, self.n = B, n
        self.is_cvrp = demands is not None
        self.arange = torch.arange(B)
        self.visited = torch.zeros(B, n, dtype=torch.bool)
        self.visited[self.arange, start] = True
        self.first = start.clone()
        self.last = start.clone()
        self.step = 0
        if self.is_cvrp:
            if bool((start != 0).any()):
                raise ContractError("CVRP tours start at the depot (node 0)")
            self.demands = demands.to(torch.float64)
            self.capacity = capacity.to(torch.float64)
            self.remaining = self.capacity.clone()
            self.load_feature = self.demands / self.capacity[:, None]

    @classmethod
    def from_instances(cls, instances: Sequence[Instance], starts) -> "BatchState":
        coords = torch.from_numpy(np.stack([i.coords for i in instances]))
        start = torch.as_tensor(starts, dtype=torch.long)
        if instances[0].is_cvrp:
            if any(i.depot != 0 for i in instances):
                raise ContractError("batched rollouts expect the depot at index 0")
            demands = torch.from_numpy(np.stack([i.demands for i in instances]))
            cap = torch.tensor([float(i.capacity) for i in instances], dtype=torch.float64)
            return cls(coords, start, demands, cap)
        return cls(coords, start)

    @classmethod
    def from_states(cls, states: Sequence[State]) -> "BatchState":
        """Batch up partial tours (all instances must share size and kind)."""
        insts = [s.instance for s in states]
        bs = cls.from_instances(insts, [s.partial_tour[0] for s in states])
        bs.visited = torch.from_numpy(np.stack([s.visited for s in states]))
        bs.last = torch.tensor([s.last for s in states], dtype=torch.long)
        bs.step = states[0].step
        if bs.is_cvrp:
            bs.visited[:, 0] = False
            bs.remaining = torch.tensor(
                [float(s.remaining_capacity) for s in states], dtype=torch.float64
            )
        return bs

    @property
    def done(self) -> torch.Tensor:
        if self.is_cvrp:
            return self.visited[:, 1:].all(dim=1)
        return self.visited.all(dim=1)

    def feasible_mask(self) -> torch.Tensor:
        if not self.is_cvrp:
            return ~self.visited
        mask = ~self.visited & (self.demands <= self.remaining[:, None])
        mask[:, 0] = False
        no_customer = ~mask.any(dim=1)
        mask[:, 0] = (self.last != 0) | no_customer
        return mask

    def apply(self, actions: torch.Tensor) -> None:
        self.visited[self.arange, actions] = True
        self.last = actions
        self.step += 1
        if self.is_cvrp:
            at_depot = actions == 0
            self.visited[:, 0] = False
            used = self.demands[self.arange, actions]
            self.remaining = torch.where(at_depot, self.capacity, self.remaining - used)


@dataclass
class ViewBatch:
    """Encoder inputs for one view: token rows are neighbors..., last, first."""
    k: int
    node_feats: torch.Tensor   # [B, k, F]
    last_feat: torch.Tensor    # [B, F]
    first_feat: torch.Tensor   # [B, F]
    token_mask: torch.Tensor   # [B, k + 2], True = real token
    node_idx: torch.Tensor     # [B, k]


@dataclass
class Candidates:
    idx: torch.Tensor     # [B, K] node ids
    mask: torch.Tensor    # [B, K] True = selectable
    k_min: int            # leading slots come from the neighbor prefix
    has_depot_slot: bool  # CVRP: trailing slot is the depot (first token)


def view_sizes(k_list: Sequence[int], n_pool: int, global_view: bool) -> list:
    ks = [max(1, min(k, n_pool)) for k in k_list]
    if global_view:
        ks[0] = max(1, n_pool)
    return ks


def build_views(bs: BatchState, k_list: Sequence[int], global_view: bool = False,
                invariant: bool = True):
    """Return ([ViewBatch per k in k_list], Candidates)."""
    feas = bs.feasible_mask()
    nbr_ok = feas.clone()
    if bs.is_cvrp:
        nbr_ok[:, 0] = False
    n_pool = bs.n - 1 if bs.is_cvrp else bs.n
    ks = view_sizes(k_list, n_pool, global_view)
    k_max = max(ks)

    last_xy = bs.coords[bs.arange, bs.last]
    first_xy = bs.coords[bs.arange, bs.first]
    dist = torch.linalg.vector_norm(bs.coords - last_xy[:, None, :], dim=-1)
    dist = dist.masked_fill(~nbr_ok, float("inf"))
    sorted_dist, order = torch.sort(dist, dim=1, stable=True)
    order = order[:, :k_max]
    valid = torch.isfinite(sorted_dist[:, :k_max])
    nbr_xy = bs.coords[bs.arange[:, None], order]

    first_in_set = feas[:, 0] if bs.is_cvrp else torch.zeros(bs.B, dtype=torch.bool)
    if bs.is_cvrp:
        nbr_load = bs.load_feature[bs.arange[:, None], order]
        last_load = bs.remaining / bs.capacity
    else:
        nbr_load = torch.zeros(bs.B, k_max, dtype=torch.float64)
        last_load = torch.zeros(bs.B, dtype=torch.float64)
    zeros = torch.zeros(bs.B, 1, dtype=torch.float64)

    views = []
    for k in ks:
        v_xy, v_ok = nbr_xy[:, :k], valid[:, :k]
        if invariant:
            inf = torch.tensor(float("inf"), dtype=torch.float64)
            lo = torch.where(v_ok[..., None], v_xy, inf).amin(dim=1)
            hi = torch.where(v_ok[..., None], v_xy, -inf).amax(dim=1)
            lo = torch.minimum(lo, last_xy)
            hi = torch.maximum(hi, last_xy)
            in_set = first_in_set[:, None]
            lo = torch.where(in_set, torch.minimum(lo, first_xy), lo)
            hi = torch.where(in_set, torch.maximum(hi, first_xy), hi)
            scale = (hi - lo).amax(dim=1)
            degenerate = scale == 0
            # finished CVRP rows idle at the depot and are degenerate by construction
            flagged = degenerate & ~bs.done
            if bool(flagged.any()):
                log.warning("degenerate view in %d batch rows", int(flagged.sum()))
            safe = torch.where(degenerate, torch.ones_like(scale), scale)[:, None]
            keep = ~degenerate[:, None]
            n_xy = ((v_xy - lo[:, None]) / safe[:, None]).clamp(0.0, 1.0) * keep[:, None]
            l_xy = ((last_xy - lo) / safe).clamp(0.0, 1.0) * keep
            f_xy = ((first_xy - lo) / safe).clamp(0.0, 1.0) * keep
        else:
            n_xy, l_xy, f_xy = v_xy, last_xy, first_xy
        n_xy = n_xy.masked_fill(~v_ok[..., None], 0.0)
        node_feats = torch.cat([n_xy, (nbr_load[:, :k] * v_ok)[..., None]], dim=-1)
        last_feat = torch.cat([l_xy, last_load[:, None]], dim=-1)
        first_feat = torch.cat([f_xy, zeros], dim=-1)
        token_mask = torch.cat([v_ok, torch.ones(bs.B, 2, dtype=torch.bool)], dim=1)
        views.append(ViewBatch(k, node_feats, last_feat, first_feat, token_mask, order[:, :k]))

    k_min = min(ks)
    cand_idx, cand_mask = order[:, :k_min], valid[:, :k_min]
    if bs.is_cvrp:
        cand_idx = torch.cat([cand_idx, torch.zeros(bs.B, 1, dtype=torch.long)], dim=1)
        cand_mask = torch.cat([cand_mask, feas[:, :1]], dim=1)
    return views, Candidates(cand_idx, cand_mask, k_min, bs.is_cvrp)
