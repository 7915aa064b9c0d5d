import math

import pytest
import torch

from invit import numerics
from invit.errors import ContractError, ShapeError, TrainingDivergenceError


def test_softmax_uniform_and_masked():
    torch.testing.assert_close(numerics.softmax(torch.zeros(3)), torch.full((3,), 1 / 3))
    mask = torch.tensor([True, False, True])
    p = numerics.softmax(torch.tensor([1.0, 5.0, 2.0]), mask)
    assert p[1].item() == 0.0
    assert p.sum().item() == pytest.approx(1.0)


def test_matmul_identity_and_shape_error():
    a = torch.randn(3, 4)
    torch.testing.assert_close(numerics.matmul(torch.eye(3), a), a)
    with pytest.raises(ShapeError, match=r"\(3, 4\)"):
        numerics.matmul(a, a)


def test_concat_and_masked_fill_shape_errors():
    with pytest.raises(ShapeError):
        numerics.concat([torch.zeros(2, 3), torch.zeros(3, 3)])
    assert numerics.concat([torch.zeros(2, 3), torch.zeros(2, 5)]).shape == (2, 8)
    with pytest.raises(ShapeError):
        numerics.masked_fill(torch.zeros(2, 3), torch.ones(4, dtype=torch.bool))


def test_backward_examples():
    w = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    numerics.backward(w.sum())
    torch.testing.assert_close(w.grad, torch.ones_like(w))
    x = torch.randn(2, dtype=torch.float64)
    w.grad = None
    numerics.backward((w * x).sum())
    torch.testing.assert_close(w.grad, x.expand(3, 2))
    with pytest.raises(ContractError):
        numerics.backward(w * 2)


def test_gradcheck_linear_and_two_layer():
    torch.manual_seed(0)
    w = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    x = torch.randn(5, 4, dtype=torch.float64)
    assert numerics.gradcheck(lambda: (x @ w).sum(), [w]) <= 1e-8

    w1 = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    w2 = torch.randn(8, 1, dtype=torch.float64, requires_grad=True)
    f = lambda: (torch.tanh(x @ w1) @ w2).pow(2).sum()
    assert numerics.gradcheck(f, [w1, w2]) <= 1e-5


def test_gradcheck_softmax_cross_entropy():
    torch.manual_seed(1)
    w = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    x = torch.randn(6, 4, dtype=torch.float64)
    y = torch.tensor([0, 2, 1, 1, 0, 2])
    f = lambda: -numerics.log_softmax(x @ w).gather(1, y[:, None]).mean()
    assert numerics.gradcheck(f, [w]) <= 1e-5


def test_gradcheck_requires_float64():
    w = torch.zeros(2, requires_grad=True)
    with pytest.raises(ContractError):
        numerics.gradcheck(lambda: w.sum(), [w])


def _param(value):
    return torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))


def test_optimizer_zero_gradient():
    p = _param(2.0)
    opt = numerics.make_optimizer([p], lr=1e-4, weight_decay=0.0)
    p.grad = torch.zeros_like(p)
    numerics.optimizer_step(opt)
    assert p.item() == 2.0

    p = _param(2.0)
    opt = numerics.make_optimizer([p], lr=1e-4, weight_decay=0.01)
    p.grad = torch.zeros_like(p)
    numerics.optimizer_step(opt)
    assert p.item() == pytest.approx(2.0 * (1 - 1e-6), rel=1e-12)


def test_optimizer_minimizes_quadratic():
    p = _param(1.0)
    opt = numerics.make_optimizer([p], lr=1e-2, weight_decay=0.0)
    for _ in range(5000):
        opt.zero_grad()
        numerics.backward(p.pow(2).sum())
        numerics.optimizer_step(opt)
    assert abs(p.item()) < 1e-3


def test_optimizer_rejects_nan_and_clips():
    p = _param(1.0)
    opt = numerics.make_optimizer([p])
    p.grad = torch.tensor([math.nan], dtype=torch.float64)
    with pytest.raises(TrainingDivergenceError):
        numerics.optimizer_step(opt)
    p.grad = torch.tensor([30.0], dtype=torch.float64)
    assert numerics.optimizer_step(opt, max_grad_norm=1.0) == pytest.approx(30.0)
    assert p.grad.abs().item() <= 1.0
