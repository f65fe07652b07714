"""Windowed-attention pyramid over rasterised history and map inputs."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import RelativePositionBias, attend, default_heads, mlp


class VisualConfigError(ValueError):
    pass


@dataclass
class VisualPyramid:
    v1: torch.Tensor  # [B, H/4, W/4, D/4]
    v2: torch.Tensor  # [B, H/8, W/8, D/2]
    v3: torch.Tensor  # [B, H/16, W/16, D]


class StreamEmbedding(nn.Module):
    """Per-cell MLP followed by 4x strided patch aggregation."""

    def __init__(self, in_ch, out_ch, dropout=0.1):
        super().__init__()
        self.cell = mlp(in_ch, out_ch, out_ch, dropout=dropout)
        self.patch = nn.Conv2d(out_ch, out_ch, kernel_size=4, stride=4)

    def forward(self, x):  # [B, H, W, C_in]
        x = self.cell(x).permute(0, 3, 1, 2)
        return self.patch(x).permute(0, 2, 3, 1)


class VisualEmbedding(nn.Module):
    def __init__(self, history, dim, dropout=0.1):
        super().__init__()
        c0 = dim // 4
        self.occ = StreamEmbedding(history + 1, c0, dropout)
        self.flow = StreamEmbedding(2 * history, c0, dropout)
        self.map = StreamEmbedding(3, c0, dropout)
        self.proj = nn.Linear(3 * c0, c0)

    def forward(self, hist_occ, hist_flow, map_raster):
        b, th1, h, w = hist_occ.shape
        if h % 16 or w % 16:
            raise VisualConfigError(f"grid {h}x{w} is not divisible by 16")
        occ = hist_occ.permute(0, 2, 3, 1)
        flow = hist_flow.permute(0, 2, 3, 1, 4).reshape(b, h, w, -1)
        x = torch.cat([self.occ(occ), self.flow(flow), self.map(map_raster)], dim=-1)
        return self.proj(x)


def window_partition(x, ws):
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def window_merge(xw, ws, b, h, w):
    c = xw.shape[-1]
    x = xw.view(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def _region_ids(h, w, ws, shift):
    ids = torch.zeros(h, w, dtype=torch.long)
    if shift == 0:
        return ids
    cuts = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    n = 0
    for hs in cuts:
        for wsl in cuts:
            ids[hs, wsl] = n
            n += 1
    return ids


class WindowAttention(nn.Module):
    def __init__(self, dim, heads, window):
        super().__init__()
        self.heads, self.window = heads, window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = RelativePositionBias(window, window, heads)

    def forward(self, xw, allowed=None, need_weights=False):
        # xw: [B*nW, ws*ws, C]; allowed: [B*nW, 1, N, N] bool
        q, k, v = self.qkv(xw).chunk(3, dim=-1)
        out, w = attend(q, k, v, self.heads, bias=self.rel_bias(), attn_mask=allowed)
        out = self.proj(out)
        return (out, w) if need_weights else out


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, window, shifted, dropout=0.1):
        super().__init__()
        self.window, self.shifted = window, shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = mlp(dim, 2 * dim, dim, dropout=dropout)

    def geometry(self, h, w):
        ws = self.window
        shift = ws // 2 if self.shifted and ws < min(h, w) else 0
        return ws, shift

    def forward(self, x, need_weights=False):
        b, h, w, c = x.shape
        ws, shift = self.geometry(h, w)
        pad_h, pad_w = (-h) % ws, (-w) % ws
        hp, wp = h + pad_h, w + pad_w

        y = F.pad(self.norm1(x), (0, 0, 0, pad_w, 0, pad_h))
        valid = torch.zeros(hp, wp, dtype=torch.bool, device=x.device)
        valid[:h, :w] = True
        region = _region_ids(hp, wp, ws, shift).to(x.device)
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
            valid = torch.roll(valid, shifts=(-shift, -shift), dims=(0, 1))
        # region ids are laid out in the shifted frame; padding is masked as keys
        yw = window_partition(y, ws)
        vw = window_partition(valid[None, ..., None].float(), ws)[..., 0] > 0   # [nW, N]
        rw = window_partition(region[None, ..., None].float(), ws)[..., 0]      # [nW, N]
        allowed = (rw[:, :, None] == rw[:, None, :]) & vw[:, None, :]
        allowed = allowed.repeat(b, 1, 1)[:, None]
        out, weights = self.attn(yw, allowed, need_weights=True)
        out = window_merge(out, ws, b, hp, wp)
        if shift:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        x = x + out[:, :h, :w]
        x = x + self.ff(self.norm2(x))
        return (x, weights) if need_weights else x


class PatchMerging(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim)

    def forward(self, x):
        x0, x1 = x[:, 0::2, 0::2], x[:, 1::2, 0::2]
        x2, x3 = x[:, 0::2, 1::2], x[:, 1::2, 1::2]
        return self.reduce(self.norm(torch.cat([x0, x1, x2, x3], dim=-1)))


class WindowedStage(nn.Module):
    def __init__(self, dim, heads, window, downsample, dropout=0.1):
        super().__init__()
        # incoming resolution is halved (and channels doubled) before the blocks
        self.merge = PatchMerging(dim // 2) if downsample else None
        self.blocks = nn.ModuleList([
            SwinBlock(dim, heads, window, shifted=False, dropout=dropout),
            SwinBlock(dim, heads, window, shifted=True, dropout=dropout),
        ])

    def forward(self, x):
        if self.merge is not None:
            x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class VisualEncoder(nn.Module):
    def __init__(self, history, dim, window=4, heads=None, dropout=0.1):
        super().__init__()
        if dim % 4:
            raise VisualConfigError("dim must be divisible by 4")
        self.embed = VisualEmbedding(history, dim, dropout)
        dims = (dim // 4, dim // 2, dim)
        self.stages = nn.ModuleList(
            WindowedStage(d, heads or default_heads(d), window, downsample=i > 0, dropout=dropout)
            for i, d in enumerate(dims)
        )

    def forward(self, hist_occ, hist_flow, map_raster) -> VisualPyramid:
        x = self.embed(hist_occ, hist_flow, map_raster)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return VisualPyramid(*outs)
