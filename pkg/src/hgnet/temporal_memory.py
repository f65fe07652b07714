"""Autoregressive per-head memory over future timesteps.

Each prediction head owns a stacked GRU that runs independently at every
spatial position (shared weights). At step t it absorbs the head's previous
output y_{t-1} together with the covariate embedding c_t and emits a memory
feature m that is fused into that step's guiding feature.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .context_encoder import ContextTokens
from .layers import MultiHeadAttention


class SequencingError(RuntimeError):
    pass


@dataclass
class MemoryState:
    h: torch.Tensor            # [L, B*S, C]
    t: int                     # number of steps already absorbed
    head_tag: str
    m: torch.Tensor | None = None


class Covariates(nn.Module):
    """Learned embedding per future timestep index 1..T."""

    def __init__(self, horizon, dim=32):
        super().__init__()
        self.horizon = horizon
        self.table = nn.Parameter(torch.randn(horizon, dim) * 0.02)

    def forward(self, t: int):
        if not 1 <= t <= self.horizon:
            raise IndexError(f"timestep {t} outside 1..{self.horizon}")
        return self.table[t - 1]


class TimeSeriesMemory(nn.Module):
    def __init__(self, dim, cov_dim=32, layers=2, head_tag="flow"):
        super().__init__()
        self.dim, self.layers, self.head_tag = dim, layers, head_tag
        self.gru = nn.GRU(dim + cov_dim, dim, num_layers=layers, batch_first=True)

    def initial_state(self, batch, positions, device=None, dtype=torch.float32) -> MemoryState:
        h = torch.zeros(self.layers, batch * positions, self.dim, device=device, dtype=dtype)
        return MemoryState(h=h, t=0, head_tag=self.head_tag)

    def step(self, y_prev, c_t, state: MemoryState, t: int):
        """One factor of the autoregressive rollout: (y_{t-1}, c_t, h) -> (m, h')."""
        if state.t != t - 1:
            raise SequencingError(f"{self.head_tag}: state at step {state.t}, asked for step {t}")
        b, s, c = y_prev.shape
        cov = c_t.expand(b, s, -1)
        inp = torch.cat([y_prev, cov], dim=-1).reshape(b * s, 1, -1)
        out, h = self.gru(inp, state.h)
        m = out.view(b, s, c)
        return m, MemoryState(h=h, t=t, head_tag=self.head_tag, m=m)


class HeadReadout(nn.Module):
    """Cross-attention from a head's feature map onto the agent context tokens."""

    def __init__(self, dim, heads=None):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, feat, context: ContextTokens, need_weights=False):
        out, w = self.attn(self.norm(feat), context.tokens, key_mask=context.agent_mask, need_weights=True)
        y = feat + out
        return (y, w) if need_weights else y
