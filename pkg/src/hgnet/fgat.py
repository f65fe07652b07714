"""Feature-guided attention.

Keys and values come from the projected query map, bilinearly resampled at a
uniform reference mesh displaced by offsets that an MLP predicts from a
separate guiding feature map.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from .layers import MultiHeadAttention, RelativePositionBias, attend, default_heads


class TargetTag(str, Enum):
    FLOW = "flow"
    OBSERVED = "observed"
    OCCLUDED = "occluded"


@dataclass
class GuidedFeature:
    feat: torch.Tensor  # [B, h, w, C]
    target_tag: TargetTag
    timestep: int


def reference_grid(h, w, device=None, dtype=torch.float32):
    """r[y, x] = (x, y)."""
    ys, xs = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype), torch.arange(w, device=device, dtype=dtype),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def bilinear_sample(m, points):
    """Sum over grid points of g(px, x) g(py, y) m[y, x] with g(i, j) = max(0, 1 - |i - j|).

    m: [B, h, w, C]; points: [B, hp, wp, 2] in (x, y) cell-index coordinates.
    Points further than one cell outside the map sample zero.
    """
    b, h, w, c = m.shape
    px, py = points[..., 0], points[..., 1]
    x0, y0 = torch.floor(px), torch.floor(py)
    fx, fy = px - x0, py - y0
    flat = m.reshape(b, h * w, c)
    out = torch.zeros(*points.shape[:-1], c, dtype=m.dtype, device=m.device)
    for dx, wx in ((0, 1 - fx), (1, fx)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long().reshape(b, -1)
            vals = torch.gather(flat, 1, idx[..., None].expand(-1, -1, c)).view(*points.shape[:-1], c)
            out = out + (wx * wy * inside)[..., None] * vals
    return out


class OffsetGenerator(nn.Module):
    def __init__(self, dim, sigma=1.0, dropout=0.1):
        super().__init__()
        self.sigma = sigma
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(dim, 2))

    def zero_init(self):
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, g):
        # float tanh rounds to +-1 once saturated; keep offsets strictly inside the bound
        lim = 1.0 - torch.finfo(g.dtype).eps
        return self.sigma * torch.tanh(self.net(g)).clamp(-lim, lim)


class FeatureGuidedAttention(nn.Module):
    def __init__(self, dim, h, w, heads=None, sigma=1.0, dropout=0.1):
        super().__init__()
        self.h, self.w = h, w
        self.heads = heads or default_heads(dim)
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.w_o = nn.Linear(dim, dim)
        self.offsets = OffsetGenerator(dim, sigma, dropout)
        self.rel_bias = RelativePositionBias(h, w, self.heads)
        self.register_buffer("ref", reference_grid(h, w), persistent=False)

    def forward(self, q, g, need_weights=False, return_offsets=False):
        """q, g: [B, S, C] with S = h*w in row-major order."""
        if q.shape != g.shape:
            raise ValueError(f"query {tuple(q.shape)} and guide {tuple(g.shape)} differ")
        b, s, c = q.shape
        if s != self.h * self.w:
            raise ValueError(f"expected {self.h * self.w} positions, got {s}")
        q_proj = self.w_q(q)
        delta = self.offsets(g).view(b, self.h, self.w, 2)
        x = bilinear_sample(q_proj.view(b, self.h, self.w, c), self.ref.to(q.dtype) + delta).view(b, s, c)
        out, weights = attend(q_proj, self.w_k(x), self.w_v(x), self.heads, bias=self.rel_bias())
        out = self.w_o(out)
        extras = (weights,) * need_weights + (delta,) * return_offsets
        return (out, *extras) if extras else out


class PlainCrossAttention(nn.Module):
    """Standard cross-attention: queries from q, keys/values from g."""

    def __init__(self, dim, heads=None):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, q, g, need_weights=False):
        return self.attn(q, g, need_weights=need_weights)
