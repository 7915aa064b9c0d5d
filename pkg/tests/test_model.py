import numpy as np
import pytest
import torch

from invit.errors import ConfigError
from invit.instances import CVRP, TSP
from invit.model import INViT, ModelConfig, build_model, count_parameters, policy_step
from invit.state import (
    BatchState, ViewBatch, apply_action, build_views, candidate_set, init_state,
)

from conftest import make_instance, random_state, tiny_config, tiny_model


def _view(k, B=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return ViewBatch(
        k,
        torch.rand(B, k, 3, generator=g, dtype=dtype),
        torch.rand(B, 3, generator=g, dtype=dtype),
        torch.rand(B, 3, generator=g, dtype=dtype),
        torch.ones(B, k + 2, dtype=torch.bool),
        torch.arange(k).expand(B, k),
    )


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(k_list=[5, 10])
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        tiny_model().encode_view(_view(4), 5)


def test_encoder_permutation_equivariance():
    model = tiny_model(dtype=torch.float64)
    view = _view(7)
    perm = torch.randperm(7, generator=torch.Generator().manual_seed(3))
    pv = ViewBatch(7, view.node_feats[:, perm], view.last_feat, view.first_feat,
                   view.token_mask, view.node_idx[:, perm])
    a, _ = model.encode_view(view, 0)
    b, _ = model.encode_view(pv, 0)
    assert (a[:, perm] - b[:, :7]).abs().max().item() <= 1e-5
    assert (a[:, 7:] - b[:, 7:]).abs().max().item() <= 1e-5


def test_encoder_single_node_and_duplicates():
    model = tiny_model()
    emb, _ = model.encode_view(_view(1, dtype=torch.float32), 1)
    assert torch.isfinite(emb).all()
    view = _view(4, dtype=torch.float32)
    view.node_feats[:, 2] = view.node_feats[:, 1]
    emb, _ = model.encode_view(view, 0)
    assert (emb[:, 1] - emb[:, 2]).abs().max().item() <= 1e-6


def test_fused_width():
    cfg = ModelConfig(k_list=[50, 35, 15], d_model=128)
    model = INViT(cfg)
    bs = BatchState.from_instances([make_instance(TSP, 60)], [0])
    views, cands = build_views(bs, cfg.k_list)
    embs = [model.encode_view(v, i)[0] for i, v in enumerate(views)]
    rows, last, first = model.fuse_views(embs, views, cands)
    assert rows.shape == (1, 15, 384) and last.shape == (1, 384)


def test_single_view_is_unfused():
    model = tiny_model(k_list=[5])
    bs = BatchState.from_instances([make_instance(TSP, 12)], [0])
    views, cands = build_views(bs, [5])
    emb, _ = model.encode_view(views[0], 0)
    rows, last, first = model.fuse_views([emb], views, cands)
    torch.testing.assert_close(rows, emb[:, :5])
    torch.testing.assert_close(last, emb[:, 5])


def test_decoder_edge_cases():
    model = tiny_model(dtype=torch.float64)
    D = 32
    g = torch.Generator().manual_seed(0)
    last, first = torch.rand(1, D, generator=g, dtype=torch.float64), torch.rand(1, D, generator=g, dtype=torch.float64)
    one = model.decode(torch.rand(1, 1, D, generator=g, dtype=torch.float64), last, first,
                       torch.ones(1, 1, dtype=torch.bool))
    assert torch.log_softmax(one, -1).exp().item() == 1.0
    same = torch.rand(1, 1, D, generator=g, dtype=torch.float64).expand(1, 5, D)
    logits = model.decode(same, last, first, torch.ones(1, 5, dtype=torch.bool))
    torch.testing.assert_close(torch.softmax(logits, -1), torch.full((1, 5), 0.2, dtype=torch.float64),
                               atol=1e-6, rtol=0)
    big = model.decode(100 * torch.rand(1, 5, D, generator=g, dtype=torch.float64), last, first,
                       torch.ones(1, 5, dtype=torch.bool))
    assert big.abs().max().item() <= model.cfg.clip


def test_policy_support(rng):
    model = tiny_model()
    for _ in range(500):
        s = random_state(rng)
        probs, _ = policy_step(s, model)
        support = np.zeros(s.instance.n, dtype=bool)
        support[candidate_set(s, 3)] = True
        assert np.all(probs[~support] == 0.0)
        assert abs(probs.sum() - 1.0) <= 1e-6


def test_policy_invariant_to_translation_and_scale():
    model = tiny_model()
    for kind in (TSP, CVRP):
        inst = make_instance(kind, 25, seed=2)
        moved = inst.with_coords(inst.coords * 3.5 + np.array([-2.0, 7.0]))
        s, t = init_state(inst), init_state(moved)
        for node in [3, 7, 1, 12]:
            p, _ = policy_step(s, model)
            q, _ = policy_step(t, model)
            assert np.abs(p - q).max() <= 1e-5
            s, t = apply_action(s, node), apply_action(t, node)


def test_attention_records():
    model = tiny_model()
    bs = BatchState.from_instances([make_instance(TSP, 10)], [0])
    out = model(bs, need_weights=True)
    w = out.attention[0][0]
    assert w.shape == (1, 8, 8)
    torch.testing.assert_close(w.sum(-1), torch.ones(1, 8))


def _expected_parameters(cfg: ModelConfig) -> int:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.n_views
    linear = lambda i, o, bias=True: i * o + (o if bias else 0)
    norm = lambda w: 2 * w
    attn = lambda w: 3 * linear(w, w, False) + linear(w, w)
    block = lambda w, ff: norm(w) + attn(w) + norm(w) + linear(w, ff) + linear(ff, w)
    encoder = 3 * linear(3, d) + cfg.encoder_layers * block(d, f) + norm(d)
    D = d * V
    decoder = (linear(2 * D, D) + norm(D) + (cfg.decoder_layers - 1) * block(D, f * V)
               + norm(D) + 2 * linear(D, D, False))
    return V * encoder + decoder


def test_parameter_count_three_views():
    cfg = ModelConfig(k_list=[50, 35, 15])
    assert count_parameters(INViT(cfg)) == _expected_parameters(cfg)
    cfg = tiny_config()
    assert count_parameters(INViT(cfg)) == _expected_parameters(cfg)


def test_build_model_seeded():
    a, b = build_model(tiny_config(), seed=5), build_model(tiny_config(), seed=5)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_global_and_raw_variants_run():
    for kw in (dict(global_view=True), dict(invariant=False)):
        model = tiny_model(**kw)
        probs, _ = policy_step(init_state(make_instance(CVRP, 12)), model)
        assert abs(probs.sum() - 1) <= 1e-6
