"""Vectorised agent / map context encoding."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import AttentionBlock, mlp, zero_masked

AGENT_FEATURES = 9  # x, y, vx, vy, cos h, sin h, length, width, valid
MAP_FEATURES = 4    # x, y, dx, dy per waypoint


class EmptySceneError(ValueError):
    pass


@dataclass
class ContextTokens:
    tokens: torch.Tensor      # [B, N_A, D]
    agent_mask: torch.Tensor  # [B, N_A] bool


@dataclass
class MapTokens:
    tokens: torch.Tensor      # [B, N_M, D]
    map_mask: torch.Tensor    # [B, N_M] bool


def agent_features(states, valid):
    """[B, N, T, 7] raw states -> [B, N, T, 9] features; invalid steps zero-filled."""
    x, y, vx, vy, h, length, width = states.unbind(-1)
    feats = torch.stack(
        [x / 10, y / 10, vx / 5, vy / 5, torch.cos(h), torch.sin(h), length / 5, width / 5,
         torch.ones_like(x)], dim=-1,
    )
    return zero_masked(feats, valid)


def map_features(polylines):
    """[B, M, P, 2] waypoints -> [B, M, P, 4]."""
    delta = torch.zeros_like(polylines)
    delta[..., :-1, :] = polylines[..., 1:, :] - polylines[..., :-1, :]
    return torch.cat([polylines / 10, delta / 2], dim=-1)


def check_nonempty(mask):
    if (~mask).all(dim=-1).any():
        raise EmptySceneError("scene has no valid agents")


class AgentHistoryEncoder(nn.Module):
    def __init__(self, dim, num_types=3, in_dim=AGENT_FEATURES):
        super().__init__()
        self.rnn = nn.LSTM(in_dim, dim, batch_first=True)
        self.type_embed = nn.Embedding(num_types, dim)
        self.proj = nn.Linear(2 * dim, dim)

    def forward(self, feats, types):
        b, n, t, f = feats.shape
        _, (h_n, _) = self.rnn(feats.reshape(b * n, t, f))
        h = h_n[-1].view(b, n, -1)
        return self.proj(torch.cat([h, self.type_embed(types)], dim=-1))


class AgentInteraction(nn.Module):
    def __init__(self, dim, heads=None, depth=2, dropout=0.1):
        super().__init__()
        self.blocks = nn.ModuleList(AttentionBlock(dim, heads, dropout=dropout) for _ in range(depth))

    def forward(self, tokens, mask, need_weights=False):
        check_nonempty(mask)
        weights = []
        for blk in self.blocks:
            tokens, w = blk(tokens, key_mask=mask, need_weights=True)
            weights.append(w)
        tokens = zero_masked(tokens, mask)
        return (tokens, weights) if need_weights else tokens


class MapEncoder(nn.Module):
    def __init__(self, dim, points, heads=None, dropout=0.1):
        super().__init__()
        self.points = points
        self.embed = mlp(points * MAP_FEATURES, dim, dim, dropout=dropout)
        self.attn = AttentionBlock(dim, heads, dropout=dropout)

    def segment_embedding(self, polylines):
        b, m, p, _ = polylines.shape
        return self.embed(map_features(polylines).reshape(b, m, p * MAP_FEATURES))

    def forward(self, polylines, mask) -> MapTokens:
        x = self.attn(self.segment_embedding(polylines), key_mask=mask)
        return MapTokens(zero_masked(x, mask), mask)


class AgentMapAttention(nn.Module):
    def __init__(self, dim, heads=None, dropout=0.1):
        super().__init__()
        self.block = AttentionBlock(dim, heads, dropout=dropout)

    def forward(self, agent_tokens, agent_mask, map_tokens: MapTokens, need_weights=False):
        x, w = self.block(agent_tokens, map_tokens.tokens, key_mask=map_tokens.map_mask, need_weights=True)
        ctx = ContextTokens(zero_masked(x, agent_mask), agent_mask)
        return (ctx, w) if need_weights else ctx


class ContextEncoder(nn.Module):
    def __init__(self, dim, map_points, heads=None, dropout=0.1):
        super().__init__()
        self.history = AgentHistoryEncoder(dim)
        self.interaction = AgentInteraction(dim, heads, dropout=dropout)
        self.map = MapEncoder(dim, map_points, heads, dropout=dropout)
        self.cross = AgentMapAttention(dim, heads, dropout=dropout)

    def forward(self, agent_states, agent_types, agent_valid, polylines, map_mask) -> ContextTokens:
        mask = agent_valid.any(dim=-1)
        tokens = self.history(agent_features(agent_states, agent_valid), agent_types)
        tokens = self.interaction(tokens, mask)
        map_tokens = self.map(polylines, map_mask)
        return self.cross(tokens, mask, map_tokens)
