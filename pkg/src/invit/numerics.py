"""Tensor helpers on top of torch: shape-checked primitives, masked softmax,
the AdamW optimizer with a divergence guard, and a finite-difference gradient check."""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch

from .errors import ContractError, ShapeError, TrainingDivergenceError

NEG_INF = float("-inf")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    """Channel-wise (last axis by default) concatenation with a readable shape error."""
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(ref, other)) if i != dim % len(ref)
        ):
            raise ShapeError(f"concat shape mismatch: {tuple(ref)} vs {tuple(other)}")
    return torch.cat(list(tensors), dim=dim)


def masked_fill(x: torch.Tensor, mask: torch.Tensor, value: float = NEG_INF) -> torch.Tensor:
    """Fill positions where ``mask`` is False."""
    try:
        shape = torch.broadcast_shapes(mask.shape, x.shape)
    except RuntimeError as exc:
        raise ShapeError(
            f"mask shape {tuple(mask.shape)} incompatible with {tuple(x.shape)}"
        ) from exc
    if shape != x.shape:
        raise ShapeError(f"mask shape {tuple(mask.shape)} incompatible with {tuple(x.shape)}")
    return x.masked_fill(~mask, value)


def softmax(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis; masked slots get probability exactly 0."""
    if mask is not None:
        x = masked_fill(x, mask)
    return torch.softmax(x, dim=-1)


def log_softmax(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    if mask is not None:
        x = masked_fill(x, mask)
    return torch.log_softmax(x, dim=-1)


def backward(loss: torch.Tensor) -> None:
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


# --------------------------------------------------------------------------
# optimizer

BETAS = (0.9, 0.999)
EPS = 1e-8


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float = 1e-4,
                   weight_decay: float = 0.01) -> torch.optim.AdamW:
    """Adaptive moments with weight decay decoupled from the gradient step."""
    return torch.optim.AdamW(
        list(params), lr=lr, betas=BETAS, eps=EPS, weight_decay=weight_decay,
        foreach=False,
    )


def grad_global_norm(params: Iterable[torch.nn.Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def optimizer_step(optimizer: torch.optim.Optimizer, max_grad_norm: float | None = None) -> float:
    """Check gradients, optionally clip them, step. Returns the pre-clip gradient norm."""
    params = [p for group in optimizer.param_groups for p in group["params"]]
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingDivergenceError("non-finite gradient encountered")
    norm = grad_global_norm(params)
    if max_grad_norm is not None and norm > max_grad_norm:
        scale = max_grad_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad.mul_(scale)
    optimizer.step()
    return norm


# --------------------------------------------------------------------------
# gradient check


def gradcheck(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
              eps: float = 1e-4) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` takes no arguments and evaluates a scalar from ``params`` (64-bit
    leaf tensors). The error for one parameter tensor is
    ``max|analytic - numeric| / (max|numeric| + 1e-8)``; the maximum over
    tensors is returned.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise ContractError("gradcheck requires 64-bit parameters")
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params
    ]
    worst = 0.0
    with torch.no_grad():
        for p, ana in zip(params, analytic):
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            num_flat = numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                num_flat[i] = (up - down) / (2 * eps)
            err = (ana - numeric).abs().max().item() / (numeric.abs().max().item() + 1e-8)
            worst = max(worst, err)
    return worst
