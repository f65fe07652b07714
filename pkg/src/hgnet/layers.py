"""Shared attention / MLP building blocks."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def default_heads(dim: int) -> int:
    return max(1, dim // 32)


def split_heads(x, heads):
    b, n, c = x.shape
    return x.view(b, n, heads, c // heads).transpose(1, 2)


def merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def attend(q, k, v, heads, bias=None, key_mask=None, attn_mask=None):
    """Scaled dot-product attention over already-projected q, k, v.

    q: [B, Nq, C], k/v: [B, Nk, C]. bias broadcasts to [B, heads, Nq, Nk].
    key_mask: [B, Nk] bool (True = valid). attn_mask: bool, broadcast to
    [B, heads, Nq, Nk]. Queries with no valid key receive zero weights.
    Returns (out [B, Nq, C], weights [B, heads, Nq, Nk]).
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    if bias is not None:
        logits = logits + bias
    allowed = None
    if key_mask is not None:
        allowed = key_mask[:, None, None, :]
    if attn_mask is not None:
        allowed = attn_mask if allowed is None else allowed & attn_mask
    if allowed is not None:
        allowed = allowed.expand_as(logits)
        logits = logits.masked_fill(~allowed, torch.finfo(logits.dtype).min)
    weights = logits.softmax(dim=-1)
    if allowed is not None:
        weights = weights * allowed
    return merge_heads(weights @ vh), weights


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads=None, kv_dim=None):
        super().__init__()
        self.heads = heads or default_heads(dim)
        kv_dim = kv_dim or dim
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(kv_dim, dim)
        self.to_v = nn.Linear(kv_dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, ctx=None, key_mask=None, bias=None, attn_mask=None, need_weights=False):
        ctx = x if ctx is None else ctx
        out, weights = attend(
            self.to_q(x), self.to_k(ctx), self.to_v(ctx), self.heads,
            bias=bias, key_mask=key_mask, attn_mask=attn_mask,
        )
        out = self.to_out(out)
        if key_mask is not None:
            # no valid key: contribution is zero, including the output bias
            out = out * key_mask.any(dim=-1).to(out.dtype)[:, None, None]
        return (out, weights) if need_weights else out


def mlp(in_dim, hidden, out_dim, act=nn.GELU, dropout=0.1):
    return nn.Sequential(
        nn.Linear(in_dim, hidden), act(), nn.Dropout(dropout),
        nn.Linear(hidden, out_dim), nn.Dropout(dropout),
    )


class AttentionBlock(nn.Module):
    """Pre-norm attention + feed-forward block with residuals."""

    def __init__(self, dim, heads=None, kv_dim=None, act=nn.GELU, dropout=0.1, ffn_mult=2):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim or dim)
        self.attn = MultiHeadAttention(dim, heads, kv_dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = mlp(dim, dim * ffn_mult, dim, act=act, dropout=dropout)

    def forward(self, x, ctx=None, key_mask=None, bias=None, need_weights=False):
        h = self.norm_q(x)
        kv = h if ctx is None else self.norm_kv(ctx)
        attn, weights = self.attn(h, kv, key_mask=key_mask, bias=bias, need_weights=True)
        x = x + attn
        x = x + self.ff(self.norm_ff(x))
        return (x, weights) if need_weights else x


def relative_position_index(h, w):
    """[h*w, h*w] index into a (2h-1)(2w-1) bias table by discrete displacement."""
    coords = torch.stack(torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + h - 1) * (2 * w - 1) + (rel[1] + w - 1)


class RelativePositionBias(nn.Module):
    def __init__(self, h, w, heads):
        super().__init__()
        self.table = nn.Parameter(torch.zeros((2 * h - 1) * (2 * w - 1), heads))
        self.register_buffer("index", relative_position_index(h, w), persistent=False)

    def forward(self):
        n = self.index.shape[0]
        return self.table[self.index.view(-1)].view(n, n, -1).permute(2, 0, 1)


def init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def zero_masked(x, mask):
    return x * mask[..., None].to(x.dtype)


def upsample2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
