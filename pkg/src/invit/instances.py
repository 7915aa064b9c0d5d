"""Routing instances: generation over four node distributions, file ingestion,
rescaling to the unit square and tour length evaluation."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateInstanceError,
    InfeasibleInstanceError,
    InfeasibleTourError,
    ParameterError,
    ParseError,
    UnsupportedFormatError,
)

log = logging.getLogger(__name__)

TSP = "tsp"
CVRP = "cvrp"
KINDS = (TSP, CVRP)
DISTRIBUTIONS = ("uniform", "clustered", "explosion", "implosion")

DEFAULT_CAPACITY = 50
DEMAND_LOW, DEMAND_HIGH = 1, 10
# (number of clusters, board length); a generated clustered instance picks one at random
CLUSTER_OPTIONS = ((3, 10.0), (7, 50.0))
INSTANCE_JSON_VERSION = 1


@dataclass
class Instance:
    kind: str
    coords: np.ndarray
    depot: Optional[int] = None
    demands: Optional[np.ndarray] = None
    capacity: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown problem kind {self.kind!r}")
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if self.kind == TSP:
            if self.depot is not None or self.demands is not None or self.capacity is not None:
                raise ParameterError("TSP instances carry no depot, demands or capacity")
        else:
            if self.depot is None or self.demands is None or self.capacity is None:
                raise ParameterError("CVRP instances need depot, demands and capacity")
            self.demands = np.asarray(self.demands, dtype=np.int64)
            if self.demands.shape != (len(self.coords),):
                raise ParameterError(
                    f"demands has shape {self.demands.shape}, expected ({len(self.coords)},)"
                )
            if self.capacity <= 0:
                raise ParameterError("capacity must be positive")
            if self.demands[self.depot] != 0:
                raise ParameterError("depot demand must be 0")
            if np.any(self.demands < 0):
                raise ParameterError("demands must be nonnegative")
            over = np.flatnonzero(self.demands > self.capacity)
            if len(over):
                raise InfeasibleInstanceError(
                    f"node {int(over[0])} has demand {int(self.demands[over[0]])} "
                    f"> capacity {self.capacity}"
                )

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def is_cvrp(self) -> bool:
        return self.kind == CVRP

    def with_coords(self, coords) -> "Instance":
        return Instance(
            self.kind,
            np.array(coords, dtype=np.float64),
            self.depot,
            None if self.demands is None else self.demands.copy(),
            self.capacity,
            dict(self.meta),
        )

    def to_json(self) -> dict:
        out = {
            "version": INSTANCE_JSON_VERSION,
            "kind": self.kind,
            "coords": self.coords.tolist(),
        }
        if self.is_cvrp:
            out["depot"] = int(self.depot)
            out["demands"] = [int(d) for d in self.demands]
            out["capacity"] = int(self.capacity)
        out["meta"] = self.meta
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Instance":
        version = obj.get("version")
        if version != INSTANCE_JSON_VERSION:
            raise ParseError(f"unsupported instance JSON version {version!r}")
        return cls(
            obj["kind"],
            np.asarray(obj["coords"], dtype=np.float64),
            obj.get("depot"),
            obj.get("demands"),
            obj.get("capacity"),
            obj.get("meta", {}),
        )


@dataclass
class GenParams:
    distribution: str = "uniform"
    n: int = 100
    seed: int = 0
    clusters: Optional[tuple] = None  # (N, L); None draws from CLUSTER_OPTIONS
    r_min: float = 0.1
    r_max: float = 0.5
    rate: float = 10.0
    capacity: int = DEFAULT_CAPACITY

    def validate(self, kind: str):
        if kind not in KINDS:
            raise ParameterError(f"unknown problem kind {kind!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise ParameterError(
                f"unknown distribution {self.distribution!r}; choose from {DISTRIBUTIONS}"
            )
        min_n = 2 if kind == TSP else 1
        if self.n < min_n:
            raise ParameterError(f"{kind} needs n >= {min_n}, got {self.n}")
        if not self.r_min < self.r_max:
            raise ParameterError(f"r_min ({self.r_min}) must be < r_max ({self.r_max})")
        if self.r_min < 0:
            raise ParameterError("r_min must be nonnegative")
        if self.rate <= 0:
            raise ParameterError("rate must be positive")
        if self.capacity < DEMAND_HIGH:
            raise ParameterError(f"capacity must be >= {DEMAND_HIGH}")
        if self.clusters is not None:
            n_clusters, board = self.clusters
            if n_clusters < 1 or board <= 0:
                raise ParameterError(f"invalid cluster option {self.clusters}")


def _random_disc(rng, params):
    center = rng.uniform(0.0, 1.0, size=2)
    radius = rng.uniform(params.r_min, params.r_max)
    return center, radius


def _explode(points, rng, params, meta):
    center, radius = _random_disc(rng, params)
    offset = points - center
    dist = np.linalg.norm(offset, axis=1)
    inside = dist < radius
    # points at the exact center have no direction; push them along a random one
    angle = rng.uniform(0.0, 2 * np.pi, size=len(points))
    direction = np.where(
        (dist > 0)[:, None],
        offset / np.maximum(dist, 1e-300)[:, None],
        np.stack([np.cos(angle), np.sin(angle)], axis=1),
    )
    jump = rng.exponential(1.0 / params.rate, size=len(points))
    moved = center + (radius + jump)[:, None] * direction
    points = np.where(inside[:, None], moved, points)
    meta.update(disc_center=center.tolist(), disc_radius=float(radius))
    return points


def _implode(points, rng, params, meta):
    center, radius = _random_disc(rng, params)
    offset = points - center
    inside = np.linalg.norm(offset, axis=1) < radius
    # truncated normal on [1, inf) with location 1 and scale 1
    multiplier = 1.0 + np.abs(rng.standard_normal(size=len(points)))
    moved = center + offset / multiplier[:, None]
    points = np.where(inside[:, None], moved, points)
    meta.update(disc_center=center.tolist(), disc_radius=float(radius))
    return points


def _clustered(total, rng, params, meta, with_depot):
    if params.clusters is None:
        n_clusters, board = CLUSTER_OPTIONS[int(rng.integers(len(CLUSTER_OPTIONS)))]
    else:
        n_clusters, board = params.clusters
    centers = rng.uniform(0.0, board, size=(n_clusters, 2))
    n_nodes = total - 1 if with_depot else total
    which = rng.integers(n_clusters, size=n_nodes)
    points = centers[which] + rng.standard_normal(size=(n_nodes, 2))
    if with_depot:
        depot = rng.uniform(0.0, board, size=(1, 2))
        points = np.concatenate([depot, points])
    meta.update(n_clusters=int(n_clusters), board=float(board))
    return points


def generate(params: GenParams, kind: str = TSP) -> Instance:
    """Draw one instance. Deterministic in ``params`` (including the seed).

    For CVRP ``params.n`` counts customers; node 0 is the depot.
    """
    params.validate(kind)
    rng = np.random.default_rng(params.seed)
    total = params.n + (1 if kind == CVRP else 0)
    meta = {"distribution": params.distribution, "seed": int(params.seed), "n": params.n}

    if params.distribution == "clustered":
        points = _clustered(total, rng, params, meta, with_depot=kind == CVRP)
    else:
        points = rng.uniform(0.0, 1.0, size=(total, 2))
        if params.distribution == "explosion":
            points = _explode(points, rng, params, meta)
        elif params.distribution == "implosion":
            points = _implode(points, rng, params, meta)

    if kind == CVRP:
        demands = rng.integers(DEMAND_LOW, DEMAND_HIGH + 1, size=total)
        demands[0] = 0
        inst = Instance(CVRP, points, 0, demands, params.capacity, meta)
    else:
        inst = Instance(TSP, points, meta=meta)
    return rescale_unit_square(inst)


def instance_seed(seed: int, index: int) -> int:
    """Independent per-instance seed derived from a dataset seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def generate_many(params: GenParams, kind: str, count: int) -> list:
    out = []
    for i in range(count):
        p = GenParams(**{**params.__dict__, "seed": instance_seed(params.seed, i)})
        out.append(generate(p, kind))
    return out


def rescale_unit_square(instance: Instance) -> Instance:
    """Shift to the origin and divide by the larger axis extent (aspect ratio kept)."""
    coords = instance.coords
    lo = coords.min(axis=0)
    extent = float((coords.max(axis=0) - lo).max())
    if extent == 0.0:
        raise DegenerateInstanceError("all points coincide; cannot rescale")
    scaled = (coords - lo) / extent
    out = instance.with_coords(scaled)
    out.meta["scale"] = extent * instance.meta.get("scale", 1.0)
    return out


# --------------------------------------------------------------------------
# TSPLIB / CVRPLIB


_SECTION_RE = re.compile(r"^[A-Z_]+_SECTION\b|^EOF\b")


def _parse_header_and_sections(text: str):
    header = {}
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if _SECTION_RE.match(line):
            name = line.split()[0]
            if name == "EOF":
                current = None
                continue
            current = name
            sections[current] = []
            continue
        if current is None:
            if ":" in line:
                key, value = line.split(":", 1)
                header[key.strip().upper()] = value.strip()
            else:
                parts = line.split(None, 1)
                header[parts[0].upper()] = parts[1].strip() if len(parts) > 1 else ""
            continue
        sections[current].append((lineno, line))
    return header, sections


def _read_coords(rows, dimension):
    ids, coords = [], []
    for lineno, line in rows:
        parts = line.split()
        if len(parts) < 3:
            raise ParseError(f"malformed coordinate line {line!r}", lineno)
        try:
            ids.append(int(parts[0]))
            coords.append((float(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise ParseError(f"malformed coordinate line {line!r}", lineno) from exc
    if len(coords) != dimension:
        raise ParseError(f"DIMENSION is {dimension} but {len(coords)} coordinates were read")
    return ids, np.asarray(coords, dtype=np.float64)


def _dimension(header):
    if "DIMENSION" not in header:
        raise ParseError("missing DIMENSION")
    try:
        return int(header["DIMENSION"])
    except ValueError as exc:
        raise ParseError(f"bad DIMENSION {header['DIMENSION']!r}") from exc


def parse_tsplib(text: str) -> Instance:
    """Read a symmetric EUC_2D TSPLIB file. Coordinates are kept as in the file."""
    header, sections = _parse_header_and_sections(text)
    dim = _dimension(header)
    weight_type = header.get("EDGE_WEIGHT_TYPE", "").upper()
    if weight_type != "EUC_2D":
        raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE {weight_type or '<missing>'!r}")
    if "NODE_COORD_SECTION" not in sections:
        raise ParseError("missing NODE_COORD_SECTION")
    ids, coords = _read_coords(sections["NODE_COORD_SECTION"], dim)
    meta = {"name": header.get("NAME", ""), "source": "tsplib", "node_ids": ids}
    return Instance(TSP, coords, meta=meta)


def parse_cvrplib(text: str) -> Instance:
    """Read a CVRPLIB (Set-X style) file. The depot is moved to index 0."""
    header, sections = _parse_header_and_sections(text)
    dim = _dimension(header)
    weight_type = header.get("EDGE_WEIGHT_TYPE", "EUC_2D").upper()
    if weight_type != "EUC_2D":
        raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE {weight_type!r}")
    if "CAPACITY" not in header:
        raise ParseError("missing CAPACITY")
    capacity = int(float(header["CAPACITY"]))
    for name in ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION"):
        if name not in sections:
            raise ParseError(f"missing {name}")
    ids, coords = _read_coords(sections["NODE_COORD_SECTION"], dim)
    pos = {node_id: i for i, node_id in enumerate(ids)}

    demands = np.zeros(dim, dtype=np.int64)
    seen = set()
    for lineno, line in sections["DEMAND_SECTION"]:
        parts = line.split()
        try:
            node_id, demand = int(parts[0]), int(float(parts[1]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed demand line {line!r}", lineno) from exc
        if node_id not in pos:
            raise ParseError(f"demand for unknown node {node_id}", lineno)
        demands[pos[node_id]] = demand
        seen.add(node_id)
    if len(seen) != dim:
        raise ParseError(f"DEMAND_SECTION lists {len(seen)} of {dim} nodes")

    depots = []
    for lineno, line in sections["DEPOT_SECTION"]:
        for tok in line.split():
            value = int(tok)
            if value == -1:
                break
            if value not in pos:
                raise ParseError(f"unknown depot node {value}", lineno)
            depots.append(pos[value])
    if len(depots) != 1:
        raise ParseError(f"expected exactly one depot, found {len(depots)}")
    depot = depots[0]
    if demands[depot] != 0:
        log.warning("depot demand %d set to 0", demands[depot])
        demands[depot] = 0

    order = [depot] + [i for i in range(dim) if i != depot]
    meta = {
        "name": header.get("NAME", ""),
        "source": "cvrplib",
        "node_ids": [ids[i] for i in order],
    }
    return Instance(CVRP, coords[order], 0, demands[order], capacity, meta)


def load_instance(path) -> Instance:
    """Load a native JSON, TSPLIB (.tsp) or CVRPLIB (.vrp) file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return Instance.from_json(json.loads(text))
    if path.suffix == ".vrp" or "DEMAND_SECTION" in text:
        inst = parse_cvrplib(text)
    else:
        inst = parse_tsplib(text)
    inst.meta.setdefault("name", path.stem)
    return inst


def save_instance(instance: Instance, path):
    Path(path).write_text(json.dumps(instance.to_json()))


# --------------------------------------------------------------------------
# tours


def cvrp_routes(tour: Sequence[int], depot: int = 0) -> list:
    """Split a cyclic CVRP tour into depot-to-depot customer segments."""
    tour = list(tour)
    if depot in tour:
        k = tour.index(depot)
        tour = tour[k:] + tour[:k]
    routes, current = [], []
    for node in tour:
        if node == depot:
            if current:
                routes.append(current)
            current = []
        else:
            current.append(node)
    if current:
        routes.append(current)
    return routes


def check_tour(instance: Instance, tour: Sequence[int]) -> None:
    """Raise InfeasibleTourError unless ``tour`` is a feasible solution."""
    n = instance.n
    tour = [int(t) for t in tour]
    for t in tour:
        if not 0 <= t < n:
            raise InfeasibleTourError(f"node {t} out of range [0, {n})", t)
    if instance.kind == TSP:
        seen = np.zeros(n, dtype=bool)
        for t in tour:
            if seen[t]:
                raise InfeasibleTourError(f"node {t} visited twice", t)
            seen[t] = True
        if not seen.all():
            missing = int(np.flatnonzero(~seen)[0])
            raise InfeasibleTourError(f"node {missing} never visited", missing)
        return

    depot = instance.depot
    if depot not in tour:
        raise InfeasibleTourError(f"depot {depot} missing from tour", depot)
    seen = np.zeros(n, dtype=bool)
    seen[depot] = True
    for route in cvrp_routes(tour, depot):
        load = 0
        for t in route:
            if seen[t]:
                raise InfeasibleTourError(f"customer {t} visited twice", t)
            seen[t] = True
            load += int(instance.demands[t])
            if load > instance.capacity:
                raise InfeasibleTourError(
                    f"capacity {instance.capacity} exceeded at customer {t} (load {load})", t
                )
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise InfeasibleTourError(f"customer {missing} never visited", missing)


def tour_cost(instance: Instance, tour: Sequence[int], check: bool = True) -> float:
    """Closed Euclidean length of ``tour``; CVRP depot returns appear as explicit indices."""
    if check:
        check_tour(instance, tour)
    idx = np.asarray(tour, dtype=np.int64)
    pts = instance.coords[idx]
    # fsum is order independent, so reversal and rotation give bit-identical costs
    return math.fsum(np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1))
