"""Self-attention, cross-attention and gated self-attention.

All three are pre-norm single-block attention ops that return only the
attention update; adding the residual is left to the caller. Inputs may be
unbatched ``(N, d)`` or batched ``(B, N, d)``.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ShapeError


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v/o projections."""

    def __init__(self, d_model: int, d_context: int | None = None, heads: int = 1):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        d_context = d_model if d_context is None else d_context
        self.d_model = d_model
        self.d_context = d_context
        self.heads = heads
        self.norm = nn.LayerNorm(d_model)
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_context, d_model)
        self.v = nn.Linear(d_context, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, -1).transpose(-3, -2)

    def attend(self, h_q: torch.Tensor, h_kv: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        q, k, v = self._split(self.q(h_q)), self._split(self.k(h_kv)), self._split(self.v(h_kv))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_mask is not None:
            # (..., N_kv) -> broadcast over heads and queries
            scores = scores.masked_fill(~key_mask[..., None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(-3, -2)
        return self.o(out.reshape(*out.shape[:-2], -1))

    def _check_features(self, F: torch.Tensor, name: str = "features"):
        if F.dim() < 2 or F.shape[-1] != self.d_model:
            raise ShapeError(f"{name} must have trailing dim {self.d_model}, got shape {tuple(F.shape)}")


class SelfAttention(Attention):
    def forward(self, F: torch.Tensor) -> torch.Tensor:
        self._check_features(F)
        h = self.norm(F)
        return self.attend(h, h)


class CrossAttention(Attention):
    """Queries from visual features, keys and values from the prompt embedding."""

    def forward(self, F: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        self._check_features(F)
        if c.dim() < 2 or c.shape[-1] != self.d_context:
            raise ShapeError(f"prompt must have trailing dim {self.d_context}, got shape {tuple(c.shape)}")
        if c.shape[-2] == 0:
            raise ShapeError("prompt embedding is empty (S=0)")
        return self.attend(self.norm(F), c)


class GatedSelfAttention(Attention):
    """Self-attention over visual tokens joined with grounding tokens.

    Only the visual rows of the output are kept, scaled by ``tanh(gate_alpha)``.
    ``gate_alpha`` starts at 0, so a fresh module contributes nothing.
    """

    def __init__(self, d_model: int, heads: int = 1):
        super().__init__(d_model, d_model, heads)
        self.gate_alpha = nn.Parameter(torch.zeros(()))

    def forward(
        self, F: torch.Tensor, G: torch.Tensor | None = None, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """``G`` is ``(..., M, d)`` grounding tokens; ``mask`` ``(..., M)`` flags real ones."""
        self._check_features(F)
        n = F.shape[-2]
        if G is None or G.shape[-2] == 0:
            h = self.norm(F)
            return torch.tanh(self.gate_alpha) * self.attend(h, h)
        if G.shape[-1] != self.d_model:
            raise ShapeError(f"grounding tokens have dim {G.shape[-1]}, expected {self.d_model}")
        if G.shape[:-2] != F.shape[:-2]:
            raise ShapeError(f"grounding batch shape {tuple(G.shape[:-2])} != features {tuple(F.shape[:-2])}")
        h = self.norm(torch.cat([F, G], dim=-2))
        key_mask = None
        if mask is not None:
            visible = torch.ones(*mask.shape[:-1], n, dtype=torch.bool, device=mask.device)
            key_mask = torch.cat([visible, mask], dim=-1)
        out = self.attend(h, h, key_mask)[..., :n, :]
        return torch.tanh(self.gate_alpha) * out


def self_attention(params: SelfAttention, F: torch.Tensor) -> torch.Tensor:
    return params(F)


def cross_attention(params: CrossAttention, F: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    return params(F, c)


def gated_self_attention(params: GatedSelfAttention, F: torch.Tensor, G=None, mask=None) -> torch.Tensor:
    """Functional form; ``G`` may also be a list of ``(d,)`` token vectors."""
    if isinstance(G, (list, tuple)):
        for i, g in enumerate(G):
            if g.shape[-1] != params.d_model:
                raise ShapeError(f"grounding token {i} has dim {g.shape[-1]}, expected {params.d_model}")
        G = torch.stack(list(G), dim=-2) if G else None
    return params(F, G, mask)
