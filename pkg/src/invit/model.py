"""Invariant nested-view policy network.

Each view of the state goes through its own encoder (role-specific input
projections followed by pre-norm attention blocks, no positional encoding).
Embeddings of the rows shared by every view (candidates, last node,
first node / depot) are concatenated channel-wise and decoded by a stack of
cross-attention layers whose final clipped compatibility scores give the
action distribution over the candidate set.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import numerics
from .errors import ConfigError, ContractError
from .state import N_FEATURES, BatchState, Candidates, State, ViewBatch, build_views


@dataclass
class ModelConfig:
    k_list: list = field(default_factory=lambda: [35, 15])
    d_model: int = 128
    d_ff: int = 512
    n_heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 3
    clip: float = 10.0
    global_view: bool = False
    invariant: bool = True

    def __post_init__(self):
        self.k_list = [int(k) for k in self.k_list]
        self.validate()

    @property
    def n_views(self) -> int:
        return len(self.k_list)

    def validate(self):
        if not self.k_list:
            raise ConfigError("k_list must not be empty")
        if any(a <= b for a, b in zip(self.k_list, self.k_list[1:])):
            raise ConfigError(f"k_list must be strictly descending, got {self.k_list}")
        if min(self.k_list) < 1:
            raise ConfigError("k values must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.clip <= 0:
            raise ConfigError("clip constant must be positive")
        if self.decoder_layers < 1 or self.encoder_layers < 0:
            raise ConfigError("need at least one decoder layer")
        if self.global_view and self.n_views < 2:
            raise ConfigError("the global variant replaces the largest of several views")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d)

    def forward(self, x_q, x_kv, key_mask, need_weights=False):
        B, Tq, d = x_q.shape
        Tk = x_kv.shape[1]
        h = self.n_heads
        q = self.q(x_q).view(B, Tq, h, -1).transpose(1, 2)
        k = self.k(x_kv).view(B, Tk, h, -1).transpose(1, 2)
        v = self.v(x_kv).view(B, Tk, h, -1).transpose(1, 2)
        mask = key_mask[:, None, None, :]
        if need_weights:
            scores = numerics.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
            weights = numerics.softmax(scores, mask)
            ctx = weights @ v
            avg = weights.mean(dim=1)
        else:
            ctx = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
            avg = None
        ctx = ctx.transpose(1, 2).reshape(B, Tq, d)
        return self.out(ctx), avg


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d_ff)
        self.fc2 = nn.Linear(d_ff, d)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, d_ff)

    def forward(self, x, mask, need_weights=False):
        y = self.norm1(x)
        a, w = self.attn(y, y, mask, need_weights)
        x = x + a
        x = x + self.ff(self.norm2(x))
        return x, w


class ViewEncoder(nn.Module):
    """Embeds one view: separate input layers for neighbor, last and first rows."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.embed_node = nn.Linear(N_FEATURES, d)
        self.embed_last = nn.Linear(N_FEATURES, d)
        self.embed_first = nn.Linear(N_FEATURES, d)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.encoder_layers)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, view: ViewBatch, need_weights=False):
        dtype = self.embed_node.weight.dtype
        x = torch.cat(
            [
                self.embed_node(view.node_feats.to(dtype)),
                self.embed_last(view.last_feat.to(dtype))[:, None],
                self.embed_first(view.first_feat.to(dtype))[:, None],
            ],
            dim=1,
        )
        records = []
        for block in self.blocks:
            x, w = block(x, view.token_mask, need_weights)
            records.append(w)
        return self.norm(x), records


class DecoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, d_ff)

    def forward(self, q, keys, mask):
        a, _ = self.attn(self.norm1(q), keys, mask)
        q = q + a
        return q + self.ff(self.norm2(q))


@dataclass
class StepOutput:
    log_probs: torch.Tensor   # [B, K] over candidate slots, -inf where masked
    logits: torch.Tensor      # [B, K] clipped scores before masking
    candidates: Candidates
    views: list
    attention: Optional[list] = None  # per view, per encoder layer: [B, T, T]


class INViT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.d_model * cfg.n_views
        self.encoders = nn.ModuleList(ViewEncoder(cfg) for _ in range(cfg.n_views))
        self.query = nn.Linear(2 * D, D)
        self.key_norm = nn.LayerNorm(D)
        self.decoder = nn.ModuleList(
            DecoderBlock(D, cfg.n_heads, cfg.d_ff * cfg.n_views)
            for _ in range(cfg.decoder_layers - 1)
        )
        self.final_norm = nn.LayerNorm(D)
        self.final_q = nn.Linear(D, D, bias=False)
        self.final_k = nn.Linear(D, D, bias=False)

    # the pieces below are public so they can be exercised one at a time

    def encode_view(self, view: ViewBatch, view_index: int, need_weights=False):
        if not 0 <= view_index < self.cfg.n_views:
            raise ConfigError(f"view index {view_index} outside [0, {self.cfg.n_views})")
        return self.encoders[view_index](view, need_weights)

    def fuse_views(self, embeddings: Sequence[torch.Tensor], views: Sequence[ViewBatch],
                   cands: Candidates):
        """Concatenate rows shared by all views, smallest view first.

        Returns (candidate rows [B, K, V*d], last row [B, V*d], first row [B, V*d]).
        """
        order = sorted(range(len(views)), key=lambda i: (views[i].k, i))
        cand_parts, last_parts, first_parts = [], [], []
        for i in order:
            emb, k = embeddings[i], views[i].k
            if k < cands.k_min:
                raise ContractError(f"view of size {k} misses candidate rows (k_min={cands.k_min})")
            rows = emb[:, : cands.k_min]
            if cands.has_depot_slot:
                rows = torch.cat([rows, emb[:, k + 1: k + 2]], dim=1)
            cand_parts.append(rows)
            last_parts.append(emb[:, k])
            first_parts.append(emb[:, k + 1])
        return (
            numerics.concat(cand_parts),
            numerics.concat(last_parts),
            numerics.concat(first_parts),
        )

    def decode(self, cand_rows, last_row, first_row, cand_mask):
        """Clipped compatibility logits over candidate slots (before masking)."""
        if not bool(cand_mask.any(dim=1).all()):
            raise ContractError("every row needs at least one candidate")
        q = self.query(numerics.concat([last_row, first_row]))[:, None]
        keys = self.key_norm(cand_rows)
        for block in self.decoder:
            q = block(q, keys, cand_mask)
        q = self.final_q(self.final_norm(q))
        k = self.final_k(keys)
        scores = numerics.matmul(q, k.transpose(-1, -2))[:, 0] / math.sqrt(q.shape[-1])
        return self.cfg.clip * torch.tanh(scores)

    def forward(self, bs: BatchState, need_weights: bool = False) -> StepOutput:
        cfg = self.cfg
        views, cands = build_views(bs, cfg.k_list, cfg.global_view, cfg.invariant)
        embeddings, attention = [], []
        for i, view in enumerate(views):
            emb, rec = self.encode_view(view, i, need_weights)
            embeddings.append(emb)
            attention.append(rec)
        cand_rows, last_row, first_row = self.fuse_views(embeddings, views, cands)
        logits = self.decode(cand_rows, last_row, first_row, cands.mask)
        log_probs = numerics.log_softmax(logits, cands.mask)
        return StepOutput(log_probs, logits, cands, views, attention if need_weights else None)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> INViT:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = INViT(cfg)
    return model.to(dtype)


def full_distribution(out: StepOutput, n: int) -> torch.Tensor:
    """Scatter candidate-slot probabilities onto all ``n`` nodes."""
    probs = out.log_probs.exp()
    full = torch.zeros(probs.shape[0], n, dtype=probs.dtype)
    return full.scatter_add(1, out.candidates.idx, probs * out.candidates.mask)


def policy_step(state: State, model: INViT, need_weights: bool = False):
    """Probability of every node as the next action, plus the raw step output."""
    bs = BatchState.from_states([state])
    with torch.no_grad():
        out = model(bs, need_weights)
    return full_distribution(out, state.instance.n)[0].double().numpy(), out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
