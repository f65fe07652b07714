"""Full occupancy-flow network: encoders + hierarchical decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .context_encoder import ContextEncoder
from .decoder import HierarchicalDecoder
from .layers import init_weights
from .scenegen import SceneSample
from .visual_encoder import VisualEncoder

# logits are clamped only when forming probabilities so those stay inside (0, 1) in float32
_PROB_LOGIT_CLAMP = 15.0


@dataclass
class ModelConfig:
    grid: int = 64
    history: int = 5
    horizon: int = 4
    map_points: int = 8
    dim: int = 64
    heads: int = 0          # 0 -> dim // 32
    sigma_off: float = 1.0
    window: int = 4
    gru_layers: int = 2
    cov_dim: int = 32
    dropout: float = 0.1
    fgat_enabled: bool = True
    memory_enabled: bool = True


class HGNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        heads = cfg.heads or None
        self.context = ContextEncoder(cfg.dim, cfg.map_points, heads, cfg.dropout)
        self.visual = VisualEncoder(cfg.history, cfg.dim, cfg.window, None, cfg.dropout)
        self.decoder = HierarchicalDecoder(
            cfg.history, cfg.horizon, cfg.dim, cfg.grid, heads, cfg.sigma_off, cfg.cov_dim,
            cfg.gru_layers, cfg.dropout, cfg.fgat_enabled, cfg.memory_enabled,
        )
        init_weights(self)
        for fg in self.decoder.fgat.values():
            fg.offsets.zero_init()

    def set_ablation(self, fgat_enabled=None, memory_enabled=None):
        if fgat_enabled is not None:
            self.cfg.fgat_enabled = self.decoder.fgat_enabled = fgat_enabled
        if memory_enabled is not None:
            self.cfg.memory_enabled = self.decoder.memory_enabled = memory_enabled

    def forward(self, batch, horizon=None):
        context = self.context(batch["agent_states"], batch["agent_types"], batch["agent_valid"],
                               batch["map_polylines"], batch["map_mask"])
        pyramid = self.visual(batch["hist_occupancy"], batch["hist_backward_flow"], batch["map_raster"])
        out = self.decoder(batch["hist_occupancy"], batch["hist_backward_flow"], pyramid, context, horizon)
        for key in ("observed", "occluded"):
            out[key] = torch.sigmoid(out[f"{key}_logits"].clamp(-_PROB_LOGIT_CLAMP, _PROB_LOGIT_CLAMP))
        out["pyramid"], out["context"] = pyramid, context
        return out


_FLOAT_FIELDS = ("agent_states", "map_polylines", "hist_occupancy", "hist_backward_flow",
                 "map_raster", "gt_observed", "gt_occluded", "gt_flow")
_BOOL_FIELDS = ("agent_valid", "map_mask")


def stack_samples(samples: Sequence[SceneSample]) -> dict[str, torch.Tensor]:
    """Stack scenes into batched tensors (the whole dataset, or one minibatch)."""
    if not samples:
        raise ValueError("no samples to stack")
    out = {}
    for name in _FLOAT_FIELDS:
        out[name] = torch.from_numpy(np.stack([getattr(s, name) for s in samples]).astype(np.float32))
    for name in _BOOL_FIELDS:
        out[name] = torch.from_numpy(np.stack([getattr(s, name) for s in samples]).astype(bool))
    out["agent_types"] = torch.from_numpy(np.stack([s.agent_types for s in samples]).astype(np.int64))
    out["ego_index"] = torch.tensor([int(s.ego_index) for s in samples])
    return out


def index_batch(data: dict[str, torch.Tensor], idx) -> dict[str, torch.Tensor]:
    return {k: v[idx] for k, v in data.items()}


def to_dtype(batch, dtype):
    return {k: v.to(dtype) if v.is_floating_point() else v for k, v in batch.items()}
