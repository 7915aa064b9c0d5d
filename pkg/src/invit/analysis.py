"""Desk-scale versions of the motivating statistics: where optimal next nodes
rank among the nearest neighbors, how stable optimal tours are when far
nodes are added, and how much encoder attention lands beyond the k nearest."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import ContractError, SizeError
from .instances import TSP, Instance, check_tour
from .model import INViT
from .oracle import HELD_KARP_MAX_N, held_karp
from .state import BatchState, apply_action, feasible_actions, init_state


# --------------------------------------------------------------------------
# k-NN rank histogram


@dataclass
class RankHistogram:
    counts: np.ndarray            # ranks 1..K, then one overflow bucket
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.counts) - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def cumulative(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros(len(self.counts))
        cum = np.cumsum(self.counts) / self.total
        cum[-1] = 1.0
        return cum

    def mass_within(self, rank: int) -> float:
        return float(self.cumulative[min(rank, self.K + 1) - 1])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "count", "cumulative"])
            cum = self.cumulative
            for r, c in enumerate(self.counts):
                label = str(r + 1) if r < self.K else f">{self.K}"
                w.writerow([label, int(c), repr(float(cum[r]))])


def tour_ranks(instance: Instance, tour: Sequence[int]) -> list:
    """Rank of every chosen node among the feasible actions, by distance from
    the current node (ties by index), replaying ``tour`` from its start."""
    check_tour(instance, tour)
    state = init_state(instance, int(tour[0]))
    ranks = []
    for node in tour[1:]:
        feas = feasible_actions(state)
        d = np.linalg.norm(instance.coords[feas] - instance.coords[state.last], axis=1)
        order = feas[np.lexsort((feas, d))]
        ranks.append(int(np.flatnonzero(order == node)[0]) + 1)
        state = apply_action(state, int(node))
    if instance.is_cvrp and tour[-1] != instance.depot:
        # closing return to the depot is a forced step, rank 1
        ranks.append(1)
    return ranks


def knn_rank_histogram(instances: Sequence[Instance], reference_tours: Sequence[Sequence[int]],
                       K: int = 16, meta: Optional[dict] = None) -> RankHistogram:
    if len(instances) != len(reference_tours):
        raise ContractError("one reference tour per instance required")
    counts = np.zeros(K + 1, dtype=np.int64)
    for inst, tour in zip(instances, reference_tours):
        for r in tour_ranks(inst, tour):
            counts[min(r, K + 1) - 1] += 1
    info = {"instances": len(instances)}
    if instances:
        info.update(kind=instances[0].kind, n=instances[0].n)
    info.update(meta or {})
    return RankHistogram(counts, info)


# --------------------------------------------------------------------------
# overlap under out-of-board augmentation


def annulus_points(rng: np.random.Generator, count: int, r_in: float = 1.5, r_out: float = 2.5,
                   center=(0.5, 0.5)) -> np.ndarray:
    """Points uniform (by area) in an annulus around ``center``."""
    theta = rng.uniform(0.0, 2 * np.pi, count)
    r = np.sqrt(rng.uniform(r_in ** 2, r_out ** 2, count))
    return np.asarray(center) + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def undirected_edges(order: Sequence[int]) -> set:
    order = [int(v) for v in order]
    return {frozenset((a, b)) for a, b in zip(order, order[1:] + order[:1]) if a != b}


def restrict(order: Sequence[int], keep: int) -> list:
    """Induced cyclic order of the nodes ``< keep``."""
    return [int(v) for v in order if v < keep]


def edge_overlap(original: Sequence[int], perturbed: Sequence[int], n_original: int) -> float:
    base = undirected_edges(original)
    if not base:
        return 100.0
    kept = undirected_edges(restrict(perturbed, n_original))
    return 100.0 * len(base & kept) / len(base)


@dataclass
class OverlapResult:
    count: int
    mean: float
    std: float
    values: list


def boundary_augmentation_overlap(instances: Sequence[Instance], added_node_counts: Sequence[int],
                                  reference_solver: Callable = held_karp, seed: int = 0,
                                  r_in: float = 1.5, r_out: float = 2.5) -> list:
    """Mean edge overlap between the optimal tour of each original and that of
    the original plus added out-of-board nodes, per added-node count."""
    results = []
    for count in added_node_counts:
        if count < 0:
            raise ContractError("added node count must be nonnegative")
        values = []
        for i, inst in enumerate(instances):
            if inst.kind != TSP:
                raise ContractError("overlap analysis is defined for TSP")
            if inst.n + count > HELD_KARP_MAX_N and reference_solver is held_karp:
                raise SizeError(f"n + added = {inst.n + count} exceeds the exact bound {HELD_KARP_MAX_N}")
            base = reference_solver(inst).tour.indices
            if count == 0:
                values.append(100.0)
                continue
            rng = np.random.default_rng([seed, count, i])
            extra = annulus_points(rng, count, r_in, r_out)
            big = Instance(TSP, np.vstack([inst.coords, extra]))
            pert = reference_solver(big).tour.indices
            values.append(edge_overlap(base, pert, inst.n))
        arr = np.asarray(values)
        results.append(OverlapResult(int(count), float(arr.mean()), float(arr.std()), values))
    return results


def write_overlap_csv(results: Sequence[OverlapResult], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["added_nodes", "mean_overlap", "stddev"])
        for r in results:
            w.writerow([r.count, repr(r.mean), repr(r.std)])


# --------------------------------------------------------------------------
# attention mass beyond the k nearest neighbors


@dataclass
class AttentionRecord:
    weights: np.ndarray  # [m, m] attention from each node token to each node token
    coords: np.ndarray   # [m, 2]


@dataclass
class MassHistogram:
    edges: np.ndarray
    counts: np.ndarray
    values: np.ndarray
    k: int

    @property
    def median(self) -> float:
        return float(np.median(self.values)) if len(self.values) else float("nan")

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def mass_beyond_k(record: AttentionRecord, k: int) -> np.ndarray:
    """Per query: attention on keys ranked beyond ``k`` by distance from the query
    (the query itself has rank 1)."""
    m = len(record.coords)
    if k >= m:
        raise ContractError(f"k={k} must be below the node count {m}")
    d = np.linalg.norm(record.coords[:, None] - record.coords[None], axis=-1)
    idx = np.broadcast_to(np.arange(m), (m, m))
    order = np.lexsort((idx, d), axis=-1)
    far = np.zeros((m, m), dtype=bool)
    np.put_along_axis(far, order[:, k:], True, axis=1)
    return (record.weights * far).sum(axis=1)


def attention_mass_beyond_k(attention_records: Sequence[AttentionRecord], k: int,
                            bins: int = 20) -> MassHistogram:
    values = np.concatenate([mass_beyond_k(r, k) for r in attention_records]) \
        if attention_records else np.zeros(0)
    counts, edges = np.histogram(np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return MassHistogram(edges, counts, values, k)


def collect_attention(model: INViT, instances: Sequence[Instance], layer: int = -1,
                      start: int = 0) -> list:
    """Encoder attention among node tokens of the largest view at the first step.

    Meant for the global variant, whose largest view covers every node.
    """
    records = []
    for inst in instances:
        bs = BatchState.from_instances([inst], [start if not inst.is_cvrp else 0])
        with torch.no_grad():
            out = model(bs, need_weights=True)
        view = max(range(len(out.views)), key=lambda i: out.views[i].k)
        w = out.attention[view][layer][0]
        mask = out.views[view].token_mask[0]
        k = out.views[view].k
        node_ok = mask[:k].numpy()
        idx = out.views[view].node_idx[0, :k].numpy()[node_ok]
        sub = w[:k, :k].double().numpy()[np.ix_(node_ok, node_ok)]
        records.append(AttentionRecord(sub, inst.coords[idx]))
    return records
