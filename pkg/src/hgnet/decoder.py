"""Hierarchical feature-guided decoder: flow -> observed -> occluded."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import torch
from torch import nn

from .context_encoder import ContextTokens
from .fgat import FeatureGuidedAttention, PlainCrossAttention, TargetTag
from .layers import AttentionBlock, MultiHeadAttention, mlp, upsample2
from .temporal_memory import Covariates, HeadReadout, MemoryState, TimeSeriesMemory
from .visual_encoder import VisualPyramid

TAGS = (TargetTag.FLOW.value, TargetTag.OBSERVED.value, TargetTag.OCCLUDED.value)


@dataclass
class PathwayState:
    encoded_hist: torch.Tensor
    guide: torch.Tensor | None = None
    memory: MemoryState | None = None


class RasterEncoder(nn.Module):
    """Per-cell MLP then strided convolutions down to stride 16."""

    def __init__(self, in_ch, dim, dropout=0.1):
        super().__init__()
        c0 = dim // 4
        self.cell = mlp(in_ch, c0, c0, dropout=dropout)
        self.down = nn.Sequential(
            nn.Conv2d(c0, c0, 4, stride=4), nn.GELU(),
            nn.Conv2d(c0, dim // 2, 2, stride=2), nn.GELU(),
            nn.Conv2d(dim // 2, dim, 2, stride=2),
        )

    def forward(self, x):  # [B, H, W, C_in] -> [B, S, D]
        x = self.down(self.cell(x).permute(0, 3, 1, 2))
        return x.flatten(2).transpose(1, 2)


class PathwayEncoder(nn.Module):
    def __init__(self, history, dim, positions, heads=None, dropout=0.1):
        super().__init__()
        self.flow = RasterEncoder(2 * history, dim, dropout)
        self.occ = RasterEncoder(history + 1, dim, dropout)
        self.fuse = mlp(2 * dim, dim, dim, act=nn.ReLU, dropout=dropout)
        self.pos = nn.ParameterDict({t: nn.Parameter(torch.zeros(positions, dim)) for t in TAGS})
        self.attn = nn.ModuleDict({t: AttentionBlock(dim, heads, act=nn.ReLU, dropout=dropout) for t in TAGS})
        for p in self.pos.values():
            nn.init.trunc_normal_(p, std=0.02)

    def raw(self, hist_occ, hist_flow):
        b, th1, h, w = hist_occ.shape
        f = self.flow(hist_flow.permute(0, 2, 3, 1, 4).reshape(b, h, w, -1))
        o = self.occ(hist_occ.permute(0, 2, 3, 1))
        return {"flow": f, "observed": o, "occluded": self.fuse(torch.cat([f, o], dim=-1))}

    def forward(self, hist_occ, hist_flow):
        raw = self.raw(hist_occ, hist_flow)
        return {t: self.attn[t](raw[t] + self.pos[t]) for t in TAGS}


class GuideAttention(nn.Module):
    """Guide feature attends to v3; the memory feature is added afterwards."""

    def __init__(self, dim, heads=None):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.norm_v = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, raw_guide, v3_flat, m_prev=None, need_weights=False):
        out, w = self.attn(self.norm(raw_guide), self.norm_v(v3_flat), need_weights=True)
        if m_prev is not None:
            out = out + m_prev
        return (out, w) if need_weights else out


class FPNHead(nn.Module):
    def __init__(self, dim, out_ch):
        super().__init__()
        c2, c1 = dim // 2, dim // 4
        act = nn.ReLU
        self.top = nn.Sequential(nn.Conv2d(dim, c2, 3, padding=1), act())
        self.lat2 = nn.Conv2d(c2, c2, 1)
        self.mid = nn.Sequential(nn.Conv2d(c2, c1, 3, padding=1), act())
        self.lat1 = nn.Conv2d(c1, c1, 1)
        self.fine = nn.Sequential(nn.Conv2d(c1, c1, 3, padding=1), act())
        self.fine2 = nn.Sequential(nn.Conv2d(c1, c1, 3, padding=1), act())
        self.out = nn.Conv2d(c1, out_ch, 3, padding=1)

    def forward(self, feat, v1, v2, hw):
        """feat: [B, S, D] at stride 16; v1/v2 channel-last. Returns [B, H, W, out_ch]."""
        b, s, d = feat.shape
        h16, w16 = hw
        x = self.top(feat.transpose(1, 2).reshape(b, d, h16, w16))
        x = upsample2(x) + self.lat2(v2.permute(0, 3, 1, 2))
        x = self.mid(x)
        x = upsample2(x) + self.lat1(v1.permute(0, 3, 1, 2))
        x = self.fine(x)
        x = self.fine2(upsample2(x))
        x = self.out(upsample2(x))
        return x.permute(0, 2, 3, 1)


class HierarchicalDecoder(nn.Module):
    def __init__(self, history, horizon, dim, grid, heads=None, sigma=1.0, cov_dim=32,
                 gru_layers=2, dropout=0.1, fgat_enabled=True, memory_enabled=True):
        super().__init__()
        self.h16 = self.w16 = grid // 16
        s = self.h16 * self.w16
        self.horizon = horizon
        self.fgat_enabled, self.memory_enabled = fgat_enabled, memory_enabled
        self.pathways = PathwayEncoder(history, dim, s, heads, dropout)
        self.covariates = Covariates(horizon, cov_dim)
        self.step_proj = nn.Linear(cov_dim, dim)
        self.memory = nn.ModuleDict({t: TimeSeriesMemory(dim, cov_dim, gru_layers, t) for t in TAGS})
        self.guides = nn.ModuleDict({t: GuideAttention(dim, heads) for t in TAGS[1:]})
        self.merge = nn.Sequential(nn.Linear(2 * dim, dim), nn.ReLU(), nn.Dropout(dropout),
                                   nn.Linear(dim, dim), nn.ReLU(), nn.Dropout(dropout))
        self.q_norm = nn.ModuleDict({t: nn.LayerNorm(dim) for t in TAGS})
        self.g_norm = nn.ModuleDict({t: nn.LayerNorm(dim) for t in TAGS})
        self.fgat = nn.ModuleDict({
            t: FeatureGuidedAttention(dim, self.h16, self.w16, heads, sigma, dropout) for t in TAGS
        })
        self.fallback = nn.ModuleDict({t: PlainCrossAttention(dim, heads) for t in TAGS})
        self.ff_norm = nn.ModuleDict({t: nn.LayerNorm(dim) for t in TAGS})
        self.ff = nn.ModuleDict({t: mlp(dim, 2 * dim, dim, act=nn.ReLU, dropout=dropout) for t in TAGS})
        self.readout = nn.ModuleDict({t: HeadReadout(dim, heads) for t in TAGS})
        self.fpn = nn.ModuleDict({"flow": FPNHead(dim, 2), "observed": FPNHead(dim, 1),
                                  "occluded": FPNHead(dim, 1)})
        self.calls = Counter()

    # -- pieces ------------------------------------------------------------

    def pathway_parameters(self, tag):
        """Named parameters used only by one pathway."""
        exclusive = {"occluded": ("pathways.fuse.", "merge.")}.get(tag, ())
        return {
            name: p for name, p in self.named_parameters()
            if tag in name.split(".") or name.startswith(exclusive)
        }

    def guide_feature(self, tag, raw_guide, v3_flat, m_prev):
        if tag == "flow":
            raise AssertionError("the top-level flow pathway takes no v3 guide attention")
        self.calls[f"guide:{tag}"] += 1
        return self.guides[tag](raw_guide, v3_flat, m_prev)

    def attend(self, tag, q, g):
        qn, gn = self.q_norm[tag](q), self.g_norm[tag](g)
        if self.fgat_enabled:
            self.calls[f"fgat:{tag}"] += 1
            z = q + self.fgat[tag](qn, gn)
        else:
            self.calls[f"fallback:{tag}"] += 1
            z = q + self.fallback[tag](qn, gn)
        return z + self.ff[tag](self.ff_norm[tag](z))

    def fpn_decode(self, tag, feat, pyramid: VisualPyramid):
        return self.fpn[tag](feat, pyramid.v1, pyramid.v2, (self.h16, self.w16))

    # -- rollout -----------------------------------------------------------

    def init_pathways(self, hist_occ, hist_flow):
        enc = self.pathways(hist_occ, hist_flow)
        states = {}
        for tag in TAGS:
            b, s, _ = enc[tag].shape
            mem = self.memory[tag].initial_state(b, s, enc[tag].device, enc[tag].dtype) if self.memory_enabled else None
            states[tag] = PathwayState(encoded_hist=enc[tag], memory=mem)
        return states

    def decode_timestep(self, t, states, y_prev, pyramid: VisualPyramid, context: ContextTokens):
        c_t = self.covariates(t)
        step = self.step_proj(c_t)
        v3 = pyramid.v3.flatten(1, 2)
        m = {}
        if self.memory_enabled:
            for tag in TAGS:
                m[tag], states[tag].memory = self.memory[tag].step(y_prev[tag], c_t, states[tag].memory, t)

        q = states["flow"].encoded_hist + step
        g = q + m["flow"] if "flow" in m else q
        states["flow"].guide = g
        y_f = self.readout["flow"](self.attend("flow", q, g), context)

        q = states["observed"].encoded_hist + step
        g = self.guide_feature("observed", y_f, v3, m.get("observed"))
        states["observed"].guide = g
        y_b = self.readout["observed"](self.attend("observed", q, g), context)

        q = states["occluded"].encoded_hist + step
        merged = self.merge(torch.cat([y_f, y_b], dim=-1))
        g = self.guide_feature("occluded", merged, v3, m.get("occluded"))
        states["occluded"].guide = g
        y_c = self.readout["occluded"](self.attend("occluded", q, g), context)
        return {"flow": y_f, "observed": y_b, "occluded": y_c}

    def forward(self, hist_occ, hist_flow, pyramid: VisualPyramid, context: ContextTokens, horizon=None):
        horizon = horizon or self.horizon
        states = self.init_pathways(hist_occ, hist_flow)
        y_prev = {tag: states[tag].encoded_hist for tag in TAGS}
        flows, obs, occ, feats = [], [], [], []
        for t in range(1, horizon + 1):
            y = self.decode_timestep(t, states, y_prev, pyramid, context)
            flows.append(self.fpn_decode("flow", y["flow"], pyramid))
            obs.append(self.fpn_decode("observed", y["observed"], pyramid)[..., 0])
            occ.append(self.fpn_decode("occluded", y["occluded"], pyramid)[..., 0])
            feats.append(y)
            y_prev = y
        return {
            "flow": torch.stack(flows, 1),
            "observed_logits": torch.stack(obs, 1),
            "occluded_logits": torch.stack(occ, 1),
            "features": feats,
        }
