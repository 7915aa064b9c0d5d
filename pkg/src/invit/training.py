"""REINFORCE training with augmentation-averaged advantages and a greedy
rollout baseline that is replaced whenever the trained policy beats it."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__, numerics
from .errors import ChecksumError, ConfigError, TrainingDivergenceError, VersionError
from .instances import GenParams, Instance, generate, instance_seed
from .model import INViT, ModelConfig, build_model
from .rollout import GREEDY, SAMPLE, augment, batch_from, run_policy

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"INVITCKP"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("step", "loss", "mean_advantage", "baseline_cost", "grad_norm")

# independent random streams, combined with (seed, counter)
_TRAIN_DATA, _AUGMENT, _SAMPLING, _EVAL, _INIT = range(5)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0] >> 1)


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    kind: str = "tsp"
    n: int = 100
    distribution: str = "uniform"
    batch_size: int = 64
    omega: int = 8
    steps_per_epoch: int = 300
    epochs: int = 500
    lr: float = 1e-4
    lr_schedule: str = "constant"  # or "cosine": decays to 0 at total_steps
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    eval_size: int = 256
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        for name in ("n", "batch_size", "omega", "steps_per_epoch", "eval_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("invalid learning rate or weight decay")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.total_steps == 0:
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, self.total_steps) / self.total_steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


PRESETS = {
    # two views at full training scale
    "full": dict(),
    "smoke": dict(
        n=20, batch_size=32, omega=4, steps_per_epoch=100, epochs=20, lr=1e-3, lr_schedule="cosine",
        eval_size=128,
        model=dict(k_list=[10, 5], d_model=32, d_ff=64, n_heads=2),
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = copy.deepcopy(PRESETS[name])
    model = base.pop("model", {})
    model.update(overrides.pop("model", {}) or {})
    base.update(overrides)
    return TrainConfig(**base, model=ModelConfig(**model))


# --------------------------------------------------------------------------
# one policy-gradient step


@dataclass
class StepStats:
    loss: float
    mean_advantage: float
    baseline_cost: float
    sample_cost: float


def _flatten(aug_sets):
    rows, specs, cost_coords = [], [], []
    for originals, group in aug_sets:
        for inst, start in group:
            rows.append(inst)
            specs.append(start)
            cost_coords.append(originals.coords)
    return rows, specs, torch.from_numpy(np.stack(cost_coords))


def rollout_costs(model, rows, specs, cost_coords, mode, generator=None):
    bs, forced = batch_from(rows, specs)
    return run_policy(model, bs, mode, generator, forced, cost_coords=cost_coords)


def reinforce_loss(model: INViT, baseline: INViT, aug_sets, generator=None,
                   force_greedy: bool = False):
    """Surrogate loss for one batch.

    ``aug_sets`` holds ``(original_instance, [(augmented_instance, start), ...])``
    per training instance, all with the same number of members. The
    advantage of instance i is the mean sampled cost over its augmented set
    minus the mean greedy baseline cost over the same set; it multiplies the
    log-probability of every sampled tour in the set. Costs are measured on
    the original coordinates.
    """
    rows, specs, cost_coords = _flatten(aug_sets)
    B = len(aug_sets)
    omega = len(rows) // B
    with torch.no_grad():
        base = rollout_costs(baseline, rows, specs, cost_coords, GREEDY)
    res = rollout_costs(model, rows, specs, cost_coords, GREEDY if force_greedy else SAMPLE,
                        generator)
    b = base.costs.view(B, omega).mean(dim=1)
    d = res.costs.view(B, omega).mean(dim=1)
    adv = (d - b).to(res.log_prob.dtype)
    loss = (adv[:, None] * res.log_prob.view(B, omega)).mean()
    stats = StepStats(float(loss.detach()), float(adv.mean()), float(b.mean()), float(d.mean()))
    return loss, stats, res, adv


def replay_loss(model: INViT, aug_sets, actions: torch.Tensor, advantages: torch.Tensor):
    """The surrogate with tours and advantages frozen; differentiable in ``model``."""
    rows, specs, _ = _flatten(aug_sets)
    B = len(aug_sets)
    bs, forced = batch_from(rows, specs)
    res = run_policy(model, bs, forced_first=forced, replay=actions)
    return (advantages[:, None] * res.log_prob.view(B, -1)).mean()


def make_aug_sets(instances: Sequence[Instance], omega: int, seed: int, k_first: int):
    return [
        (inst, [(a, spec.start) for a, spec in augment(
            inst, omega, derive_seed(seed, i), k_first, randomize_first=True)])
        for i, inst in enumerate(instances)
    ]


def reinforce_step(model, baseline, instances, omega, generator, seed=0, force_greedy=False):
    """Loss and gradients for a batch; gradients are left in ``model``'s ``.grad``."""
    aug_sets = make_aug_sets(instances, omega, seed, min(model.cfg.k_list))
    model.zero_grad(set_to_none=True)
    loss, stats, _, _ = reinforce_loss(model, baseline, aug_sets, generator, force_greedy)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(
            f"non-finite loss {float(loss.detach())} (baseline cost {stats.baseline_cost}, "
            f"sample cost {stats.sample_cost})"
        )
    numerics.backward(loss)
    return loss, stats


def greedy_costs(model, instances) -> torch.Tensor:
    specs = [None if i.is_cvrp else 0 for i in instances]
    cost_coords = torch.from_numpy(np.stack([i.coords for i in instances]))
    with torch.no_grad():
        return rollout_costs(model, instances, specs, cost_coords, GREEDY).costs


def baseline_update(model: INViT, baseline: INViT, eval_instances) -> tuple:
    """Copy ``model`` into ``baseline`` iff its mean greedy cost is strictly lower.

    Returns (replaced, policy mean cost, baseline mean cost).
    """
    policy_mean = float(greedy_costs(model, eval_instances).mean())
    base_mean = float(greedy_costs(baseline, eval_instances).mean())
    replaced = policy_mean < base_mean
    if replaced:
        baseline.load_state_dict(model.state_dict())
    return replaced, policy_mean, base_mean


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: Optional[TrainConfig]
    params: dict
    baseline_params: dict
    optimizer: dict  # {"step": int, "exp_avg": {...}, "exp_avg_sq": {...}}
    epoch: int = 0
    step: int = 0
    rng: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION


def _arrays(prefix, d):
    return [(f"{prefix}/{k}", np.ascontiguousarray(v, dtype="<f4")) for k, v in d.items()]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = (
        _arrays("theta", ckpt.params)
        + _arrays("baseline", ckpt.baseline_params)
        + _arrays("optim.exp_avg", ckpt.optimizer.get("exp_avg", {}))
        + _arrays("optim.exp_avg_sq", ckpt.optimizer.get("exp_avg_sq", {}))
    )
    index, offset = [], 0
    for name, arr in arrays:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "version": ckpt.version,
        "toolkit_version": __version__,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "optimizer_step": ckpt.optimizer.get("step", 0),
        "rng": ckpt.rng,
        "log": ckpt.log,
        "arrays": index,
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(head)))
    buf.write(head)
    for _, arr in arrays:
        buf.write(arr.tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 12 or not data.startswith(CHECKPOINT_MAGIC):
        raise ChecksumError(f"{path}: not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    pos = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack("<II", body[pos: pos + 8])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos += 8
    header = json.loads(body[pos: pos + head_len])
    blob = body[pos + head_len:]
    groups = {"theta": {}, "baseline": {}, "optim.exp_avg": {}, "optim.exp_avg_sq": {}}
    for entry in header["arrays"]:
        prefix, name = entry["name"].split("/", 1)
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        groups[prefix][name] = arr.reshape(entry["shape"]).copy()
    tc = header["train_config"]
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=None if tc is None else TrainConfig.from_dict(tc),
        params=groups["theta"],
        baseline_params=groups["baseline"],
        optimizer={
            "step": header["optimizer_step"],
            "exp_avg": groups["optim.exp_avg"],
            "exp_avg_sq": groups["optim.exp_avg_sq"],
        },
        epoch=header["epoch"],
        step=header["step"],
        rng=header["rng"],
        log=header["log"],
        version=version,
    )


def model_from_checkpoint(ckpt: Checkpoint, baseline: bool = False) -> INViT:
    model = build_model(ckpt.model_config)
    params = ckpt.baseline_params if baseline else ckpt.params
    model.load_state_dict({k: torch.from_numpy(v) for k, v in params.items()})
    return model


# --------------------------------------------------------------------------
# training loop


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


class Trainer:
    def __init__(self, config: TrainConfig, checkpoint: Optional[Checkpoint] = None):
        self.config = config
        self.model = build_model(config.model, seed=derive_seed(config.seed, _INIT))
        self.baseline = build_model(config.model)
        self.baseline.load_state_dict(self.model.state_dict())
        for p in self.baseline.parameters():
            p.requires_grad_(False)
        self.optimizer = numerics.make_optimizer(self.model.parameters(), config.lr,
                                                 config.weight_decay)
        self.step = 0
        self.epoch = 0
        self.log = []
        if checkpoint is not None:
            self._restore(checkpoint)

    def gen_params(self, seed: int) -> GenParams:
        return GenParams(self.config.distribution, self.config.n, seed)

    def batch(self, step: int) -> list:
        base = derive_seed(self.config.seed, _TRAIN_DATA, step)
        return [generate(self.gen_params(instance_seed(base, i)), self.config.kind)
                for i in range(self.config.batch_size)]

    def eval_set(self, epoch: int) -> list:
        base = derive_seed(self.config.seed, _EVAL, epoch)
        return [generate(self.gen_params(instance_seed(base, i)), self.config.kind)
                for i in range(self.config.eval_size)]

    def train_step(self) -> dict:
        cfg = self.config
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, _SAMPLING, self.step))
        self.model.train()
        for group in self.optimizer.param_groups:
            group["lr"] = cfg.lr_at(self.step)
        loss, stats = reinforce_step(
            self.model, self.baseline, self.batch(self.step), cfg.omega, gen,
            seed=derive_seed(cfg.seed, _AUGMENT, self.step),
        )
        grad_norm = numerics.optimizer_step(self.optimizer, cfg.max_grad_norm)
        self.step += 1
        return {
            "step": self.step,
            "loss": stats.loss,
            "mean_advantage": stats.mean_advantage,
            "baseline_cost": stats.baseline_cost,
            "grad_norm": grad_norm,
        }

    def end_epoch(self) -> dict:
        self.epoch += 1
        replaced, pol, base = baseline_update(self.model, self.baseline, self.eval_set(self.epoch))
        entry = {"epoch": self.epoch, "step": self.step, "policy_cost": pol,
                 "baseline_cost": base, "replaced": replaced}
        self.log.append(entry)
        log.info("epoch %d: policy %.5f baseline %.5f replaced=%s", self.epoch, pol, base, replaced)
        return entry

    def checkpoint(self) -> Checkpoint:
        def params(m):
            return {k: v.detach().cpu().numpy().copy() for k, v in m.state_dict().items()}

        names = [k for k, _ in self.model.named_parameters()]
        state = self.optimizer.state
        exp_avg, exp_avg_sq, opt_step = {}, {}, 0
        for name, p in zip(names, self.model.parameters()):
            if p in state and state[p]:
                exp_avg[name] = state[p]["exp_avg"].detach().numpy().copy()
                exp_avg_sq[name] = state[p]["exp_avg_sq"].detach().numpy().copy()
                opt_step = int(state[p]["step"])
        return Checkpoint(
            self.config.model, self.config, params(self.model), params(self.baseline),
            {"step": opt_step, "exp_avg": exp_avg, "exp_avg_sq": exp_avg_sq},
            self.epoch, self.step, {"seed": self.config.seed, "step": self.step},
            copy.deepcopy(self.log),
        )

    def _restore(self, ckpt: Checkpoint):
        if ckpt.model_config != self.config.model:
            raise VersionError("checkpoint model config does not match the training config")
        self.model.load_state_dict({k: torch.from_numpy(v) for k, v in ckpt.params.items()})
        self.baseline.load_state_dict(
            {k: torch.from_numpy(v) for k, v in ckpt.baseline_params.items()})
        opt = ckpt.optimizer
        if opt.get("exp_avg"):
            for name, p in self.model.named_parameters():
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(opt["step"])),
                    "exp_avg": torch.from_numpy(opt["exp_avg"][name].copy()),
                    "exp_avg_sq": torch.from_numpy(opt["exp_avg_sq"][name].copy()),
                }
        self.step, self.epoch, self.log = ckpt.step, ckpt.epoch, list(ckpt.log)


def write_metrics(rows: Sequence[dict], path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])


def train(config: Optional[TrainConfig], out_dir=None, resume=None, max_steps: Optional[int] = None,
          deterministic: bool = True, callback=None):
    """Run training; returns (final Checkpoint, metric rows of this run).

    With ``out_dir`` a checkpoint is written at the start and after every
    epoch, and metrics are appended to ``metrics.csv``. ``max_steps`` stops
    early (used for resume checks). Without ``config`` the one stored in the
    resumed checkpoint is used.
    """
    set_deterministic(deterministic)
    ckpt_in = load_checkpoint(resume) if isinstance(resume, (str, Path)) else resume
    if config is None:
        if ckpt_in is None or ckpt_in.train_config is None:
            raise ConfigError("no training config given")
        config = ckpt_in.train_config
    trainer = Trainer(config, ckpt_in)
    out = Path(out_dir) if out_dir is not None else None
    last_good = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if ckpt_in is None:
            write_metrics([], out / "metrics.csv")
            last_good = out / "checkpoint_0000.ckpt"
            save_checkpoint(trainer.checkpoint(), last_good)

    rows = []
    total = config.total_steps if max_steps is None else min(config.total_steps, max_steps)
    while trainer.step < total:
        try:
            row = trainer.train_step()
        except TrainingDivergenceError as exc:
            exc.last_checkpoint = last_good
            raise
        rows.append(row)
        if out is not None:
            write_metrics([row], out / "metrics.csv", append=True)
        if callback is not None:
            callback(trainer, row)
        if trainer.step % config.steps_per_epoch == 0:
            trainer.end_epoch()
            if out is not None:
                last_good = out / f"checkpoint_{trainer.epoch:04d}.ckpt"
                save_checkpoint(trainer.checkpoint(), last_good)
                save_checkpoint(trainer.checkpoint(), out / "latest.ckpt")
    return trainer.checkpoint(), rows
