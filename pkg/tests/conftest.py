import warnings

import numpy as np
import pytest
import torch

from invit.instances import CVRP, DISTRIBUTIONS, TSP, GenParams, generate
from invit.model import ModelConfig, build_model
from invit.state import apply_action, feasible_actions, init_state

warnings.filterwarnings("ignore", category=UserWarning, module="torch")


def tiny_config(**kw):
    base = dict(k_list=[6, 3], d_model=16, d_ff=32, n_heads=2, encoder_layers=1,
                decoder_layers=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float32, **kw):
    model = build_model(tiny_config(**kw), seed=seed, dtype=dtype)
    model.eval()
    return model


def make_instance(kind=TSP, n=10, seed=0, dist="uniform", capacity=50):
    return generate(GenParams(dist, n, seed, capacity=capacity), kind)


def random_state(rng, kind=None, n=None, dist=None):
    """A reachable non-terminal state: random instance, random feasible prefix."""
    kind = kind or (TSP if rng.random() < 0.5 else CVRP)
    dist = dist or DISTRIBUTIONS[int(rng.integers(len(DISTRIBUTIONS)))]
    n = n or int(rng.integers(5, 30))
    inst = make_instance(kind, n, int(rng.integers(1 << 30)), dist, capacity=int(rng.integers(10, 40)))
    state = init_state(inst, 0 if kind == CVRP else int(rng.integers(inst.n)))
    steps = int(rng.integers(0, 2 * inst.n))
    for _ in range(steps):
        feas = feasible_actions(state)
        nxt = apply_action(state, int(rng.choice(feas)))
        if nxt.terminal:
            break
        state = nxt
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
