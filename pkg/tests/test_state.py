import numpy as np
import pytest
import torch

from invit.errors import ContractError, InfeasibleTourError, TerminalStateError
from invit.instances import CVRP, TSP, Instance
from invit.state import (
    BatchState, apply_action, build_views, candidate_set, extract_views, feasible_actions,
    init_state, invariant_normalize,
)

from conftest import make_instance, random_state


def test_init_state():
    s = init_state(make_instance(TSP, 5), 2)
    assert s.partial_tour == [2] and (~s.visited).sum() == 4
    inst = make_instance(CVRP, 6)
    s = init_state(inst)
    assert s.partial_tour == [0] and s.remaining_capacity == inst.capacity
    with pytest.raises(ContractError):
        init_state(inst, 3)


def test_feasible_actions_examples():
    s = init_state(make_instance(TSP, 4), 0)
    assert list(feasible_actions(s)) == [1, 2, 3]
    inst = Instance(CVRP, np.random.default_rng(0).uniform(size=(3, 2)), 0, [0, 3, 7], 10)
    s = init_state(inst)
    s.remaining_capacity = 5
    assert list(feasible_actions(s)) == [1]
    s = apply_action(init_state(inst), 2)
    s.remaining_capacity = 0
    assert list(feasible_actions(s)) == [0]


def test_terminal_state_error():
    s = init_state(make_instance(TSP, 2), 0)
    s = apply_action(s, 1)
    assert s.terminal
    with pytest.raises(TerminalStateError):
        feasible_actions(s)


def test_apply_action_capacity_bookkeeping():
    inst = Instance(CVRP, np.random.default_rng(1).uniform(size=(3, 2)), 0, [0, 4, 3], 50)
    s = init_state(inst)
    s.remaining_capacity = 10
    s = apply_action(s, 1)
    assert s.remaining_capacity == 6
    s = apply_action(s, 0)
    assert s.remaining_capacity == 50
    with pytest.raises(InfeasibleTourError):
        apply_action(s, 1)


def test_candidate_set_truncation_and_line():
    s = init_state(make_instance(TSP, 8), 0)
    assert len(candidate_set(s, 15)) == 7
    coords = np.array([[float(i), 0.0] for i in range(21)])
    s = init_state(Instance(TSP, coords), 0)
    assert list(candidate_set(s, 15)) == list(range(1, 16))


def test_candidate_set_matches_brute_force(rng):
    for _ in range(200):
        s = random_state(rng)
        inst = s.instance
        feas = [int(v) for v in feasible_actions(s) if not (inst.is_cvrp and v == inst.depot)]
        d = lambda v: float(np.linalg.norm(inst.coords[v] - inst.coords[s.last]))
        expect = sorted(feas, key=lambda v: (d(v), v))[:5]
        got = [int(v) for v in candidate_set(s, 5) if not (inst.is_cvrp and v == inst.depot)]
        assert got == expect


def test_views_truncate_to_available():
    s = init_state(make_instance(TSP, 11), 0)
    vs = extract_views(s, [50, 35, 15])
    for v in vs.views:
        assert sorted(v.neighbors) == list(range(1, 11))


def test_views_nested(rng):
    for _ in range(1000):
        s = random_state(rng)
        vs = extract_views(s, [12, 6, 3])
        sets = [set(v.neighbors.tolist()) for v in vs.views]
        assert sets[2] <= sets[1] <= sets[0]
        assert set(vs.candidate_indices.tolist()) <= set(feasible_actions(s).tolist())
        for v in vs.views:
            assert v.coords.min() >= 0.0 and v.coords.max() <= 1.0


def test_views_reject_bad_k_list():
    s = init_state(make_instance(TSP, 6), 0)
    with pytest.raises(ContractError):
        extract_views(s, [])
    with pytest.raises(ContractError):
        extract_views(s, [3, 5])


def test_invariant_normalize_examples():
    out, _ = invariant_normalize(np.array([[0.2, 0.2], [0.4, 0.2]]))
    np.testing.assert_allclose(out, [[0, 0], [1, 0]], atol=1e-15)
    pts = np.array([[0.0, 0.0], [1.0, 1.0]])
    _, proj = invariant_normalize(pts, np.array([[1.7, -0.3]]))
    np.testing.assert_array_equal(proj, [[1.0, 0.0]])
    pts = np.array([[0.25, 0.5], [0.75, 0.0], [0.5, 1.0]])
    np.testing.assert_array_equal(invariant_normalize(pts + 0.125)[0], invariant_normalize(pts)[0])


def test_invariant_normalize_degenerate(caplog):
    out, _ = invariant_normalize(np.array([[0.3, 0.3], [0.3, 0.3]]))
    assert np.all(out == 0) and "degenerate" in caplog.text


def test_batched_views_match_single_state(rng):
    for _ in range(100):
        s = random_state(rng, n=int(rng.integers(6, 20)))
        bs = BatchState.from_states([s])
        views, cands = build_views(bs, [8, 4])
        ref = extract_views(s, [8, 4])
        for vb, v in zip(views, ref.views):
            k = len(v.neighbors)
            assert vb.node_idx[0, :k].tolist() == v.neighbors.tolist()
            np.testing.assert_allclose(vb.node_feats[0, :k, :2].numpy(), v.coords[:k], atol=1e-12)
            np.testing.assert_allclose(vb.last_feat[0, :2].numpy(), v.coords[k], atol=1e-12)
            np.testing.assert_allclose(vb.first_feat[0, :2].numpy(), v.coords[k + 1], atol=1e-12)
        chosen = cands.idx[0][cands.mask[0]].tolist()
        assert sorted(chosen) == sorted(ref.candidate_indices.tolist())
        assert bool(bs.feasible_mask()[0].numpy()[feasible_actions(s)].all())
        assert int(bs.feasible_mask()[0].sum()) == len(feasible_actions(s))


def test_rollout_by_apply_action_terminates(rng):
    for kind in (TSP, CVRP):
        inst = make_instance(kind, 15, seed=4, capacity=20)
        s = init_state(inst)
        steps = 0
        while not s.terminal:
            s = apply_action(s, int(rng.choice(feasible_actions(s))))
            steps += 1
        assert steps <= 2 * inst.n
        if kind == TSP:
            assert steps == inst.n - 1
