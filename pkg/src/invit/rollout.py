"""Autoregressive tour construction, dihedral augmentation and best-of solving."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ContractError
from .instances import Instance, check_tour, rescale_unit_square, tour_cost
from .model import INViT
from .state import BatchState

log = logging.getLogger(__name__)

GREEDY = "greedy"
SAMPLE = "sample"

# the eight symmetries of the unit square, identity first
DIHEDRAL = (
    lambda x, y: (x, y),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (1 - y, x),
    lambda x, y: (y, x),
    lambda x, y: (1 - x, y),
    lambda x, y: (x, 1 - y),
    lambda x, y: (1 - y, 1 - x),
)


@dataclass
class Tour:
    indices: list
    cost: float
    step_logprobs: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def log_prob(self) -> float:
        return float(sum(self.step_logprobs))

    def to_json(self) -> dict:
        return {"indices": [int(i) for i in self.indices], "cost": self.cost, "meta": self.meta}


@dataclass
class AugmentSpec:
    transform: int
    start: Optional[int]  # TSP start node; CVRP forced first customer (None = free)
    omega: int


def dihedral(coords: np.ndarray, transform: int) -> np.ndarray:
    x, y = coords[:, 0], coords[:, 1]
    tx, ty = DIHEDRAL[transform](x, y)
    return np.stack([tx, ty], axis=1)


def transform_instance(instance: Instance, transform: int) -> Instance:
    """Dihedral image followed by rescaling to the unit square."""
    base = rescale_unit_square(instance)
    return rescale_unit_square(base.with_coords(dihedral(base.coords, transform)))


def depot_neighbors(instance: Instance, k: int) -> np.ndarray:
    d = np.linalg.norm(instance.coords[1:] - instance.coords[0], axis=1)
    order = np.lexsort((np.arange(1, instance.n), d))
    return (order + 1)[:k]


def start_pool(instance: Instance, rng: np.random.Generator, k_first: int = 15) -> list:
    """Distinct start choices; the first entry is the default start."""
    if instance.is_cvrp:
        return [None] + [int(c) for c in depot_neighbors(instance, k_first)]
    rest = rng.permutation(np.arange(1, instance.n))
    return [0] + [int(v) for v in rest]


def augment(instance: Instance, omega: int = 8, seed: int = 0, k_first: int = 15,
            randomize_first: bool = False) -> list:
    """``omega`` augmented copies, each with its own start.

    Beyond 8 copies the transforms repeat with fresh starts. With
    ``randomize_first`` the first copy also gets a random start instead of the
    default one.
    """
    if omega < 1:
        raise ContractError("omega must be >= 1")
    if omega > len(DIHEDRAL):
        log.warning("omega=%d exceeds the 8 dihedral transforms; repeating transforms", omega)
    rng = np.random.default_rng(seed)
    pool = start_pool(instance, rng, k_first)
    if randomize_first:
        if instance.is_cvrp:
            pool = [int(v) for v in rng.permutation(pool[1:])]
        else:
            pool = [int(v) for v in rng.permutation(instance.n)]
    out = []
    for j in range(omega):
        t = j % len(DIHEDRAL)
        out.append((transform_instance(instance, t), AugmentSpec(t, pool[j % len(pool)], omega)))
    return out


# --------------------------------------------------------------------------
# batched rollouts


@dataclass
class RolloutResult:
    actions: torch.Tensor     # [B, T] full index sequences (CVRP padded with depot)
    log_prob: torch.Tensor    # [B] sum of per-step log-probabilities
    step_logp: torch.Tensor   # [B, T]
    costs: torch.Tensor       # [B] float64


def batch_from(instances: Sequence[Instance], specs: Sequence[Optional[int]]):
    """BatchState plus the forced-first tensor (CVRP) from per-row start specs."""
    if instances[0].is_cvrp:
        bs = BatchState.from_instances(instances, [0] * len(instances))
        forced = torch.tensor([-1 if s is None else int(s) for s in specs], dtype=torch.long)
        return bs, forced
    return BatchState.from_instances(instances, [int(s) for s in specs]), None


def _greedy_pick(log_probs, cand_idx, cand_mask):
    best = log_probs.max(dim=1, keepdim=True).values
    tie = (log_probs == best) & cand_mask
    big = torch.iinfo(torch.long).max
    node = torch.where(tie, cand_idx, torch.full_like(cand_idx, big)).min(dim=1).values
    slot = ((cand_idx == node[:, None]) & tie).long().argmax(dim=1)
    return slot


def run_policy(model: INViT, bs: BatchState, mode: str = GREEDY,
               generator: Optional[torch.Generator] = None,
               forced_first: Optional[torch.Tensor] = None,
               replay: Optional[torch.Tensor] = None,
               cost_coords: Optional[torch.Tensor] = None) -> RolloutResult:
    """Roll out ``bs`` to completion.

    ``replay`` ([B, T] actions including the start column) teacher-forces the
    given tours so their log-probability can be differentiated. Costs are
    measured on ``cost_coords`` (defaults to the rollout coordinates).
    """
    B, n = bs.B, bs.n
    actions = [bs.last.clone()]
    logps = [torch.zeros(B, dtype=next(model.parameters()).dtype)]
    t = 0
    while not bool(bs.done.all()):
        t += 1
        done = bs.done
        forced_now = None
        if forced_first is not None and t == 1:
            forced_now = forced_first
        if not bs.is_cvrp and int((~bs.visited[0]).sum()) == 1:
            # one node left: forced, probability 1
            act = (~bs.visited).long().argmax(dim=1)
            lp = torch.zeros(B, dtype=logps[0].dtype)
        else:
            out = model(bs)
            lpc = out.log_probs
            idx, mask = out.candidates.idx, out.candidates.mask
            if replay is not None:
                target = replay[:, t]
                hit = (idx == target[:, None]) & mask
                if not bool(hit.any(dim=1).all()):
                    raise ContractError(f"replayed action outside the candidate set at step {t}")
                slot = hit.long().argmax(dim=1)
            elif mode == GREEDY:
                slot = _greedy_pick(lpc.detach(), idx, mask)
            elif mode == SAMPLE:
                slot = torch.multinomial(lpc.detach().exp().double(), 1, generator=generator)[:, 0]
            else:
                raise ContractError(f"unknown rollout mode {mode!r}")
            act = idx.gather(1, slot[:, None])[:, 0]
            lp = lpc.gather(1, slot[:, None])[:, 0]
            if forced_now is not None:
                use = forced_now >= 0
                act = torch.where(use, forced_now, act)
                lp = torch.where(use, torch.zeros_like(lp), lp)
            if bs.is_cvrp:
                act = torch.where(done, torch.zeros_like(act), act)
                lp = torch.where(done, torch.zeros_like(lp), lp)
        bs.apply(act)
        actions.append(act)
        logps.append(lp)
        if t > 2 * n + 2:
            raise ContractError("rollout failed to terminate")
    acts = torch.stack(actions, dim=1)
    step_logp = torch.stack(logps, dim=1)
    coords = bs.coords if cost_coords is None else cost_coords.to(torch.float64)
    pts = coords[torch.arange(B)[:, None], acts]
    seg = torch.linalg.vector_norm(pts - torch.roll(pts, -1, dims=1), dim=-1)
    return RolloutResult(acts, step_logp.sum(dim=1), step_logp, seg.sum(dim=1))


def _strip(indices: list, is_cvrp: bool) -> list:
    if is_cvrp:
        while len(indices) > 1 and indices[-1] == 0:
            indices.pop()
    return indices


def to_tours(result: RolloutResult, instances: Sequence[Instance], meta: Sequence[dict]) -> list:
    tours = []
    for b, inst in enumerate(instances):
        idx = _strip([int(v) for v in result.actions[b]], inst.is_cvrp)
        lps = [float(v) for v in result.step_logp[b, : len(idx)].detach()]
        tours.append(Tour(idx, tour_cost(inst, idx), lps, dict(meta[b])))
    return tours


def rollout(instance: Instance, model: INViT, mode: str = GREEDY, start: Optional[int] = None,
            rng: Optional[torch.Generator] = None) -> Tour:
    """Build one tour on ``instance`` as given (no rescaling)."""
    if start is None:
        start = None if instance.is_cvrp else 0
    if instance.is_cvrp and start == instance.depot:
        start = None
    bs, forced = batch_from([instance], [start])
    with torch.no_grad():
        res = run_policy(model, bs, mode, rng, forced)
    return to_tours(res, [instance], [{"mode": mode, "start": start}])[0]


def solve(instance: Instance, model: INViT, omega: int = 8, pomo_size: int = 100,
          seed: int = 0, k_first: Optional[int] = None, max_batch: int = 256) -> Tour:
    """Best of ``pomo_size`` greedy rollouts spread round-robin over ``omega`` augmentations.

    Rollout 0 is the plain greedy rollout (identity transform, default start),
    so the result is never worse than it.
    """
    if pomo_size < 1:
        raise ContractError("pomo_size must be >= 1")
    t0 = time.perf_counter()
    k_first = min(model.cfg.k_list) if k_first is None else k_first
    rng = np.random.default_rng(seed)
    pool = start_pool(instance, rng, k_first)
    images = {}
    rows = []
    for r in range(pomo_size):
        t = r % min(omega, len(DIHEDRAL))
        if t not in images:
            images[t] = transform_instance(instance, t)
        rows.append((t, pool[r % len(pool)]))

    best = None
    for lo in range(0, len(rows), max_batch):
        chunk = rows[lo: lo + max_batch]
        insts = [images[t] for t, _ in chunk]
        bs, forced = batch_from(insts, [s for _, s in chunk])
        with torch.no_grad():
            res = run_policy(model, bs, GREEDY, None, forced)
        for b, (t, s) in enumerate(chunk):
            idx = _strip([int(v) for v in res.actions[b]], instance.is_cvrp)
            cost = tour_cost(instance, idx, check=False)
            # strict improvement only, so ties keep the earliest rollout
            if best is None or cost < best.cost:
                lps = [float(v) for v in res.step_logp[b, : len(idx)]]
                meta = {"transform": t, "start": s, "rollout": lo + b}
                best = Tour(idx, cost, lps, meta)
    best.meta.update(mode=GREEDY, omega=omega, pomo_size=pomo_size,
                     runtime=time.perf_counter() - t0)
    tour = best
    check_tour(instance, tour.indices)
    return tour
