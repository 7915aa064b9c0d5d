"""Command-line entry point: generate | train | solve | eval | stats."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import (
    ConfigError, InvitError, SizeError, TrainingDivergenceError, VersionError,
)
from .instances import (
    CVRP, DISTRIBUTIONS, TSP, GenParams, generate, instance_seed, load_instance, save_instance,
    tour_cost,
)
from .model import ModelConfig

log = logging.getLogger("invit")

ENV_PREFIX = "INVIT_"
NO_REFERENCE = "no-reference"
DESK_SIZES = (20, 50, 100)

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERSION, EXIT_SIZE = 0, 1, 2, 3, 4, 5


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def write(self, out_dir: Path, name: str = "manifest.json") -> Path:
        path = Path(out_dir) / name
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------------------
# option resolution: flags > environment > config file > defaults


def _env_value(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Materialize every option of ``args``; values left at their parser
    default are filled from the environment, then the config file."""
    defaults = {a.dest: a.default for a in _all_actions(parser, args.command)}
    explicit = {k for k, v in vars(args).items() if k in defaults and v is not defaults[k]
                and v != defaults[k]}
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    out = {}
    for key, value in vars(args).items():
        if key in ("func",):
            continue
        env = os.environ.get(ENV_PREFIX + key.upper())
        if key in explicit:
            out[key] = value
        elif env is not None:
            out[key] = _env_value(env, defaults.get(key))
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = value
    unknown = set(file_cfg) - set(out)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if out.get("deterministic"):
        out["workers"] = 1
    return out


def _all_actions(parser, command):
    actions = list(parser._actions)
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction) and command in a.choices:
            actions += a.choices[command]._actions
    return [a for a in actions if a.dest not in ("help", argparse.SUPPRESS)]


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _instance_paths(inputs) -> list:
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths += sorted(q for q in p.rglob("*") if q.suffix in (".json", ".tsp", ".vrp")
                            and q.name != "manifest.json")
        else:
            paths.append(p)
    return paths


# --------------------------------------------------------------------------
# generate


def cmd_generate(cfg: dict) -> RunManifest:
    out = _prepare_out(Path(cfg["out"]), cfg["force"])
    man = RunManifest("generate", cfg, cfg["seed"], started=_now())
    if cfg["preset"] == "desk":
        groups = [(d, n) for d in DISTRIBUTIONS for n in DESK_SIZES]
    else:
        groups = [(cfg["dist"], cfg["n"])]
    for g, (dist, n) in enumerate(groups):
        target = out / f"{cfg['kind']}_{dist}_{n}" if len(groups) > 1 else out
        target.mkdir(parents=True, exist_ok=True)
        base = instance_seed(cfg["seed"], g) if len(groups) > 1 else cfg["seed"]
        for i in range(cfg["count"]):
            params = GenParams(dist, n, instance_seed(base, i), capacity=cfg["capacity"])
            inst = generate(params, cfg["kind"])
            path = target / f"instance_{i:04d}.json"
            save_instance(inst, path)
            man.outputs.append(str(path))
    man.finished = _now()
    man.write(out)
    return man


# --------------------------------------------------------------------------
# train


def _model_overrides(cfg: dict) -> dict:
    model = {}
    if cfg.get("k"):
        model["k_list"] = [int(v) for v in str(cfg["k"]).split(",")]
        if cfg.get("views") and cfg["views"] != len(model["k_list"]):
            raise ConfigError(f"--views {cfg['views']} but --k lists {len(model['k_list'])} sizes")
    elif cfg.get("views"):
        model["k_list"] = {1: [35], 2: [35, 15], 3: [50, 35, 15], 4: [75, 50, 35, 15]}.get(cfg["views"])
        if model["k_list"] is None:
            raise ConfigError("--views must be 1-4 unless --k is given")
    for key in ("d_model", "n_heads", "d_ff", "encoder_layers", "decoder_layers"):
        if cfg.get(key) is not None:
            model[key] = cfg[key]
    if cfg.get("global_view"):
        model["global_view"] = True
    if cfg.get("no_invariant"):
        model["invariant"] = False
    return model


def cmd_train(cfg: dict) -> RunManifest:
    from .training import preset, train

    out = Path(cfg["out"])
    if cfg["resume"]:
        out.mkdir(parents=True, exist_ok=True)
    else:
        _prepare_out(out, cfg["force"])
    man = RunManifest("train", cfg, cfg["seed"], started=_now())
    overrides = {k: cfg[k] for k in ("kind", "n", "batch_size", "omega", "steps_per_epoch",
                                     "epochs", "lr", "lr_schedule", "eval_size") if cfg.get(k) is not None}
    if cfg.get("dist"):
        overrides["distribution"] = cfg["dist"]
    overrides["seed"] = cfg["seed"]
    tc = preset(cfg["preset"], model=_model_overrides(cfg), **overrides)
    man.config = dict(cfg, resolved_train_config=tc.to_dict())
    try:
        ckpt, _ = train(tc, out, resume=cfg["resume"], max_steps=cfg.get("max_steps"),
                        deterministic=cfg["deterministic"])
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}; last checkpoint: {getattr(exc, 'last_checkpoint', None)}",
              file=sys.stderr)
        raise
    man.outputs = sorted(str(p) for p in out.glob("*.ckpt")) + [str(out / "metrics.csv")]
    man.inputs = [cfg["resume"]] if cfg["resume"] else []
    man.finished = _now()
    man.write(out)
    log.info("trained to step %d (epoch %d)", ckpt.step, ckpt.epoch)
    return man


# --------------------------------------------------------------------------
# solve / eval


def _load_model(cfg: dict):
    from .training import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(cfg["checkpoint"])
    requested = _model_overrides(cfg)
    have = ckpt.model_config.to_dict()
    clash = {k: (v, have[k]) for k, v in requested.items() if have.get(k) != v}
    if clash:
        raise VersionError(f"checkpoint config does not match the requested model: {clash}")
    model = model_from_checkpoint(ckpt)
    model.eval()
    return model


_WORKER = {}


def _init_worker(cfg):
    torch.set_num_threads(1)
    _WORKER["cfg"] = cfg
    _WORKER["model"] = _load_model(cfg) if cfg.get("solver", "model") == "model" else None


def _solve_path(path: str) -> dict:
    from .oracle import exact_or_none, near_optimal, nearest_neighbor
    from .rollout import solve

    cfg, model = _WORKER["cfg"], _WORKER["model"]
    inst = load_instance(path)
    t0 = time.perf_counter()
    solver = cfg.get("solver", "model")
    if solver == "model":
        tour = solve(inst, model, omega=cfg["aug"], pomo_size=cfg["pomo_size"], seed=cfg["seed"])
        indices, cost = tour.indices, tour.cost
    elif solver == "exact":
        ref = exact_or_none(inst)
        if ref is None:
            raise SizeError(f"{path}: too large for the exact oracle")
        indices, cost = ref.tour.indices, ref.cost
    elif solver == "near-optimal":
        ref = near_optimal(inst, seed=cfg["seed"])
        indices, cost = ref.tour.indices, ref.cost
    else:
        ref = nearest_neighbor(inst)
        indices, cost = ref.tour.indices, ref.cost
    return {"id": Path(path).stem, "path": str(path), "indices": [int(v) for v in indices],
            "cost": cost, "runtime": time.perf_counter() - t0, "solver": solver}


def _map(cfg, paths):
    if cfg["workers"] > 1 and len(paths) > 1:
        with ProcessPoolExecutor(cfg["workers"], initializer=_init_worker, initargs=(cfg,)) as ex:
            return list(ex.map(_solve_path, [str(p) for p in paths]))
    _init_worker(cfg)
    torch.set_num_threads(max(1, cfg["workers"]))
    return [_solve_path(str(p)) for p in paths]


def _write_tours(results, out: Path) -> list:
    tours_dir = out / "tours"
    tours_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for r in results:
        path = tours_dir / f"{r['id']}.json"
        path.write_text(json.dumps({"indices": r["indices"], "cost": r["cost"],
                                    "meta": {"solver": r["solver"], "runtime": r["runtime"]}}, sort_keys=True) + "\n")
        written.append(str(path))
    return written


def cmd_solve(cfg: dict) -> RunManifest:
    paths = _instance_paths(cfg["instances"])
    out = _prepare_out(Path(cfg["out"]), cfg["force"])
    man = RunManifest("solve", cfg, cfg["seed"], started=_now(), inputs=[str(p) for p in paths])
    man.outputs = _write_tours(_map(cfg, paths), out)
    man.finished = _now()
    man.write(out)
    return man


def _reference_for(cfg, path: Path):
    """(cost, solver tag) or None."""
    from .oracle import exact_or_none, near_optimal

    inst = load_instance(path)
    if cfg.get("references"):
        ref_path = Path(cfg["references"]) / f"{path.stem}.json"
        if ref_path.exists():
            data = json.loads(ref_path.read_text())
            return tour_cost(inst, data["indices"]), data.get("meta", {}).get("solver", "user")
    ref = exact_or_none(inst)
    if ref is not None:
        return ref.cost, ref.solver
    if cfg.get("heuristic_reference"):
        ref = near_optimal(inst, seed=cfg["seed"])
        return ref.cost, ref.solver
    return None


def cmd_eval(cfg: dict) -> RunManifest:
    from .oracle import gap

    paths = _instance_paths(cfg["instances"])
    out = _prepare_out(Path(cfg["out"]), cfg["force"])
    man = RunManifest("eval", cfg, cfg["seed"], started=_now(), inputs=[str(p) for p in paths])
    results = _map(cfg, paths)
    man.outputs = _write_tours(results, out)
    report = out / "report.csv"
    gaps = []
    with report.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "model_cost", "reference_cost", "gap_percent", "runtime",
                    "reference_solver"])
        for r, path in zip(results, paths):
            ref = _reference_for(cfg, path)
            if ref is None:
                w.writerow([r["id"], repr(r["cost"]), NO_REFERENCE, NO_REFERENCE,
                            f"{r['runtime']:.6f}", NO_REFERENCE])
                continue
            g = gap(r["cost"], ref[0])
            gaps.append(g)
            w.writerow([r["id"], repr(r["cost"]), repr(ref[0]), f"{g:.4f}",
                        f"{r['runtime']:.6f}", ref[1]])
    man.outputs.append(str(report))
    man.finished = _now()
    man.write(out)
    if gaps:
        print(f"mean gap {np.mean(gaps):.4f}% over {len(gaps)} instances")
    return man


# --------------------------------------------------------------------------
# stats


def cmd_stats(cfg: dict) -> RunManifest:
    from . import analysis
    from .oracle import exact_or_none, held_karp, near_optimal, nearest_neighbor

    out = _prepare_out(Path(cfg["out"]), cfg["force"])
    paths = _instance_paths(cfg["instances"])
    insts = [load_instance(p) for p in paths]
    man = RunManifest("stats", cfg, cfg["seed"], started=_now(), inputs=[str(p) for p in paths])
    which = cfg["stat"]
    if which in ("rank", "all"):
        if cfg["reference"] == "exact":
            refs = []
            for inst in insts:
                ref = exact_or_none(inst)
                if ref is None:
                    raise SizeError(f"instance of size {inst.n} exceeds the exact oracle bound "
                                    f"(TSP n <= 20, CVRP <= 8 customers)")
                refs.append(ref.tour.indices)
        elif cfg["reference"] == "near-optimal":
            refs = [near_optimal(i, seed=cfg["seed"]).tour.indices for i in insts]
        else:
            refs = [nearest_neighbor(i).tour.indices for i in insts]
        hist = analysis.knn_rank_histogram(insts, refs, cfg["K"], {"reference": cfg["reference"]})
        hist.write_csv(out / "rank_histogram.csv")
        man.outputs.append(str(out / "rank_histogram.csv"))
        top = min(8, cfg["K"])
        print(f"rank<={top} mass {hist.mass_within(top):.4f}")
    if which in ("overlap", "all"):
        counts = [int(v) for v in str(cfg["added"]).split(",")]
        res = analysis.boundary_augmentation_overlap(insts, counts, held_karp, seed=cfg["seed"])
        analysis.write_overlap_csv(res, out / "overlap.csv")
        man.outputs.append(str(out / "overlap.csv"))
    if which == "all" and not cfg.get("checkpoint"):
        log.warning("no --checkpoint given; skipping attention statistics")
    elif which in ("attention", "all"):
        if not cfg.get("checkpoint"):
            raise ConfigError("attention statistics need --checkpoint of a global-view model")
        model = _load_model(dict(cfg, k=None, views=None))
        records = analysis.collect_attention(model, insts)
        hist = analysis.attention_mass_beyond_k(records, cfg["k_beyond"])
        hist.write_csv(out / "attention_mass.csv")
        man.outputs.append(str(out / "attention_mass.csv"))
        print(f"median mass beyond {cfg['k_beyond']}: {hist.median:.4f}")
    man.finished = _now()
    man.write(out)
    return man


# --------------------------------------------------------------------------
# parser


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--views", type=int, default=None, help="number of nested views (1-4)")
    g.add_argument("--k", default=None, help="comma-separated view sizes, descending")
    g.add_argument("--global-view", action="store_true", help="largest view sees all nodes")
    g.add_argument("--no-invariant", action="store_true", help="feed raw coordinates")
    for name in ("d-model", "n-heads", "d-ff", "encoder-layers", "decoder-layers"):
        g.add_argument(f"--{name}", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--out", default="out")
    common.add_argument("--force", action="store_true", help="write into a non-empty --out")
    common.add_argument("--config", default=None, help="JSON file of option defaults")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="invit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a dataset of instances")
    p.add_argument("--kind", choices=(TSP, CVRP), default=TSP)
    p.add_argument("--dist", choices=DISTRIBUTIONS, default="uniform")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--capacity", type=int, default=50)
    p.add_argument("--preset", choices=("single", "desk"), default="single")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a policy")
    p.add_argument("--preset", choices=("full", "smoke"), default="full")
    p.add_argument("--kind", choices=(TSP, CVRP), default=None)
    p.add_argument("--dist", choices=DISTRIBUTIONS, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--omega", type=int, default=None)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--eval-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default=None)
    p.add_argument("--max-steps", type=int, default=None, help="stop early after this many steps")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("solve", cmd_solve, "solve instances with a checkpoint"),
                                 ("eval", cmd_eval, "solve and report gaps to references")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("instances", nargs="+", help="instance files or directories")
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--solver", choices=("model", "exact", "near-optimal", "nearest-neighbor"),
                       default="model")
        p.add_argument("--pomo-size", type=int, default=100)
        p.add_argument("--aug", type=int, default=8)
        if name == "eval":
            p.add_argument("--references", default=None, help="directory of <id>.json tours")
            p.add_argument("--heuristic-reference", action="store_true",
                           help="fall back to NN + 2-opt when no exact reference exists")
        _model_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("stats", parents=[common], help="emit analysis CSVs")
    p.add_argument("instances", nargs="+")
    p.add_argument("--stat", choices=("rank", "overlap", "attention", "all"), default="rank")
    p.add_argument("--reference", choices=("exact", "near-optimal", "nearest-neighbor"),
                   default="exact")
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--added", default="0,1,2,5")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--k-beyond", type=int, default=100)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args, parser)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if cfg["command"] in ("solve", "eval") and cfg["solver"] == "model" and not cfg["checkpoint"]:
        print("error: --checkpoint is required with --solver model", file=sys.stderr)
        return EXIT_USAGE
    if cfg["deterministic"]:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    try:
        args.func(cfg)
    except TrainingDivergenceError:
        return EXIT_DIVERGED
    except VersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except SizeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except (ConfigError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
