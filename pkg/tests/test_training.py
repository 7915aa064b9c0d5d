import struct
import zlib

import numpy as np
import pytest
import torch

from invit import training
from invit.errors import ChecksumError, TrainingDivergenceError, VersionError
from invit.instances import TSP
from invit.model import build_model
from invit.numerics import gradcheck
from invit.rollout import rollout, transform_instance
from invit.training import (
    Checkpoint, TrainConfig, Trainer, baseline_update, load_checkpoint, make_aug_sets,
    reinforce_loss, reinforce_step, replay_loss, save_checkpoint, train,
)

from conftest import make_instance, tiny_config


def tiny_train_config(**kw):
    base = dict(n=8, batch_size=4, omega=2, steps_per_epoch=2, epochs=2, eval_size=4, lr=1e-3,
                model=tiny_config(d_model=8, d_ff=16))
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation():
    with pytest.raises(Exception):
        TrainConfig(batch_size=0)
    cfg = TrainConfig()
    assert cfg.total_steps == 150000 and cfg.batch_size == 64
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(Exception):
        TrainConfig(lr_schedule="linear")


def test_cosine_schedule():
    cfg = TrainConfig(lr=1e-3, lr_schedule="cosine", steps_per_epoch=10, epochs=10)
    assert cfg.lr_at(0) == 1e-3
    assert cfg.lr_at(50) == pytest.approx(5e-4)
    assert cfg.lr_at(100) == pytest.approx(0.0, abs=1e-18)
    assert TrainConfig(lr=1e-3).lr_at(77) == 1e-3


def test_zero_advantage_gives_zero_gradient():
    cfg = tiny_config()
    model, base = build_model(cfg, seed=1), build_model(cfg, seed=1)
    insts = [make_instance(TSP, 10, seed=s) for s in range(3)]
    loss, stats = reinforce_step(model, base, insts, 4, None, force_greedy=True)
    assert stats.mean_advantage == 0.0
    for p in model.parameters():
        assert p.grad is None or p.grad.abs().max().item() <= 1e-7
    assert all(p.grad is None for p in base.parameters())


def test_surrogate_gradient_matches_finite_differences():
    cfg = tiny_config(d_model=4, d_ff=4, n_heads=1, k_list=[4, 2], decoder_layers=1)
    model = build_model(cfg, seed=2, dtype=torch.float64)
    base = build_model(cfg, seed=3, dtype=torch.float64)
    aug = make_aug_sets([make_instance(TSP, 6, seed=1)], 2, 0, 2)
    loss, _, res, adv = reinforce_loss(model, base, aug, torch.Generator().manual_seed(0))
    actions, adv = res.actions.detach(), adv.detach()
    frozen = lambda: replay_loss(model, aug, actions, adv)
    assert frozen().item() == pytest.approx(loss.item(), abs=1e-12)
    assert gradcheck(frozen, list(model.parameters())) <= 1e-4


def test_loss_invariant_to_dihedral_image_set():
    cfg = tiny_config()
    model, base = build_model(cfg, seed=4), build_model(cfg, seed=5)
    inst = make_instance(TSP, 12, seed=2)
    image = transform_instance(inst, 3)

    def group(x):
        return [(x, [(transform_instance(x, t), 0) for t in range(8)])]

    a, _, _, _ = reinforce_loss(model, base, group(inst), force_greedy=True)
    b, _, _, _ = reinforce_loss(model, base, group(image), force_greedy=True)
    assert abs(a.item() - b.item()) <= 1e-5


def _greedy_mean(model, insts):
    return float(np.mean([rollout(i, model).cost for i in insts]))


def test_baseline_update_decisions():
    cfg = tiny_config()
    insts = [make_instance(TSP, 10, seed=s) for s in range(6)]
    model, base = build_model(cfg, seed=1), build_model(cfg, seed=1)
    replaced, pol, bl = baseline_update(model, base, insts)
    assert not replaced and pol == bl

    model, base = build_model(cfg, seed=7), build_model(cfg, seed=8)
    expect = _greedy_mean(model, insts) < _greedy_mean(base, insts)
    replaced, pol, bl = baseline_update(model, base, insts)
    assert replaced == expect
    assert pol == pytest.approx(_greedy_mean(model, insts), abs=1e-9)
    if replaced:
        for p, q in zip(model.parameters(), base.parameters()):
            assert torch.equal(p, q)


def test_checkpoint_round_trip_bytes(tmp_path):
    trainer = Trainer(tiny_train_config())
    trainer.train_step()
    save_checkpoint(trainer.checkpoint(), tmp_path / "a.ckpt")
    ck = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(ck, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert ck.step == 1 and ck.optimizer["step"] == 1


def _rewrite(path, mutate):
    data = bytearray(path.read_bytes()[:-4])
    mutate(data)
    path.write_bytes(bytes(data) + struct.pack("<I", zlib.crc32(bytes(data))))


def test_checkpoint_version_and_checksum(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(Trainer(tiny_train_config()).checkpoint(), path)
    raw = path.read_bytes()
    bad = bytearray(raw)
    bad[len(bad) // 2] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(bad))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "c.ckpt")

    def future(data):
        data[8:12] = struct.pack("<I", training.CHECKPOINT_VERSION + 1)
    _rewrite(path, future)
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_zero_epochs_returns_initial(tmp_path):
    cfg = tiny_train_config(epochs=0)
    ckpt, rows = train(cfg, tmp_path)
    assert rows == [] and ckpt.step == 0
    init = load_checkpoint(tmp_path / "checkpoint_0000.ckpt")
    fresh = Trainer(cfg).checkpoint()
    for name, arr in fresh.params.items():
        np.testing.assert_array_equal(init.params[name], arr)
        np.testing.assert_array_equal(ckpt.params[name], arr)


def test_resume_reproduces_next_step(tmp_path):
    cfg = tiny_train_config(epochs=3)
    _, full = train(cfg, tmp_path / "full")
    _, tail = train(cfg, tmp_path / "part", resume=tmp_path / "full" / "checkpoint_0001.ckpt")
    assert tail == full[2:]
    assert tail[0]["loss"] == full[2]["loss"]


def test_metrics_csv_reproducible(tmp_path):
    cfg = tiny_train_config()
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.splitlines()[0] == b"step,loss,mean_advantage,baseline_cost,grad_norm"


def test_divergence_reports_last_checkpoint(tmp_path, monkeypatch):
    def broken(model, baseline, aug_sets, generator=None, force_greedy=False):
        loss = torch.tensor(float("nan"), requires_grad=True)
        return loss, training.StepStats(float("nan"), 0.0, 0.0, 0.0), None, None

    monkeypatch.setattr(training, "reinforce_loss", broken)
    with pytest.raises(TrainingDivergenceError) as err:
        train(tiny_train_config(), tmp_path)
    assert err.value.last_checkpoint == tmp_path / "checkpoint_0000.ckpt"
