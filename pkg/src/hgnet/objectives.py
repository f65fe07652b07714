"""Multi-task grid loss and occupancy-flow metrics."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .fgat import bilinear_sample

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
OCC_WEIGHT = 100.0
NUM_THRESHOLDS = 100


class EmptySupportWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# losses (torch, differentiable)


def focal_term(p, y, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    p_t = torch.where(y > 0.5, p, 1 - p)
    alpha_t = torch.where(y > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1 - alpha))
    return -alpha_t * (1 - p_t) ** gamma * torch.log(p_t)


def bce_term(p, y):
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def _check_prob(p):
    if not torch.all((p > 0) & (p < 1)):
        raise ValueError("occupancy predictions must lie strictly inside (0, 1)")


def occupancy_loss(pred_obs, gt_obs, pred_occ, gt_occ):
    """Summed focal + BCE over cells and timesteps, observed and occluded weighted equally."""
    total = 0.0
    for p, y in ((pred_obs, gt_obs), (pred_occ, gt_occ)):
        if p.shape != y.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
        _check_prob(p)
        total = total + (focal_term(p, y) + bce_term(p, y)).sum()
    return total


def _focal_bce_logits(logits, y, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    log_p = F.logsigmoid(logits)
    log_1mp = F.logsigmoid(-logits)
    log_pt = torch.where(y > 0.5, log_p, log_1mp)
    alpha_t = torch.where(y > 0.5, torch.full_like(logits, alpha), torch.full_like(logits, 1 - alpha))
    focal = -alpha_t * (1 - log_pt.exp()) ** gamma * log_pt
    return focal - log_pt


def occupancy_loss_logits(logit_obs, gt_obs, logit_occ, gt_occ):
    """Same quantity as occupancy_loss, computed stably from logits."""
    return _focal_bce_logits(logit_obs, gt_obs).sum() + _focal_bce_logits(logit_occ, gt_occ).sum()


def smooth_l1(x, beta=1.0):
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def flow_loss(pred_flow, gt_flow, gt_occ):
    """Smooth-L1 per component summed over gt-occupied cells. gt_occ: [..., H, W]."""
    if pred_flow.shape != gt_flow.shape:
        raise ValueError(f"shape mismatch {tuple(pred_flow.shape)} vs {tuple(gt_flow.shape)}")
    mask = (gt_occ > 0).to(pred_flow.dtype)[..., None]
    return (smooth_l1(pred_flow - gt_flow) * mask).sum()


@dataclass
class LossBreakdown:
    l_occ: torch.Tensor
    l_flow: torch.Tensor
    total: torch.Tensor
    h: int
    w: int
    T: int

    def as_floats(self):
        val = lambda x: float(x.detach()) if isinstance(x, torch.Tensor) else float(x)
        return {"l_occ": val(self.l_occ), "l_flow": val(self.l_flow), "total": val(self.total)}


def total_loss(l_occ, l_flow, h, w, T) -> LossBreakdown:
    if min(h, w, T) <= 0:
        raise ValueError("h, w and T must be positive")
    return LossBreakdown(l_occ, l_flow, (OCC_WEIGHT * l_occ + l_flow) / (h * w * T), h, w, T)


def batch_loss(out, batch) -> LossBreakdown:
    """Per-scene loss averaged over the batch."""
    gt_obs, gt_occ, gt_flow = batch["gt_observed"], batch["gt_occluded"], batch["gt_flow"]
    b, T, h, w = gt_obs.shape
    l_occ = occupancy_loss_logits(out["observed_logits"], gt_obs, out["occluded_logits"], gt_occ) / b
    union = torch.clamp(gt_obs + gt_occ, max=1)
    l_flow = flow_loss(out["flow"], gt_flow, union) / b
    return total_loss(l_occ, l_flow, h, w, T)


# ---------------------------------------------------------------------------
# metrics (numpy)


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def pr_thresholds(n=NUM_THRESHOLDS):
    return np.linspace(0.0, 1.0, n + 2)[1:-1]


def pr_curve(pred, gt, thresholds=None):
    """(precision, recall) at each threshold, positives = pred >= threshold."""
    pred, gt = _np(pred).ravel(), _np(gt).ravel() > 0.5
    thresholds = pr_thresholds() if thresholds is None else thresholds
    order = np.argsort(pred)
    sp, sg = pred[order], gt[order]
    # positives at threshold th: suffix starting at searchsorted(sp, th)
    tp_suffix = np.concatenate([np.cumsum(sg[::-1])[::-1], [0]])
    start = np.searchsorted(sp, thresholds, side="left")
    tp = tp_suffix[start].astype(np.float64)
    npos = (len(sp) - start).astype(np.float64)
    precision = np.divide(tp, npos, out=np.ones_like(tp), where=npos > 0)
    recall = tp / gt.sum() if gt.sum() else np.zeros_like(tp)
    return precision, recall


def compute_auc(pred, gt):
    """Area under the PR curve from a 100-threshold sweep (trapezoidal over recall).

    The curve is anchored at (recall 0, precision 1). Returns 0.0 with an
    EmptySupportWarning when gt has no positives.
    """
    pred, gt = _np(pred), _np(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt shapes differ")
    if not (gt > 0.5).any():
        warnings.warn("AUC undefined for empty ground truth; reporting 0", EmptySupportWarning)
        return 0.0
    precision, recall = pr_curve(pred, gt)
    # thresholds ascend -> recall descends; walk from high threshold to low
    r = np.concatenate([[0.0], recall[::-1]])
    p = np.concatenate([[1.0], precision[::-1]])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2))


def compute_soft_iou(pred, gt):
    pred, gt = _np(pred), _np(gt)
    inter = np.sum(pred * gt)
    denom = np.sum(pred) + np.sum(gt) - inter
    return float(inter / denom) if denom > 0 else 0.0


def compute_epe(pred_flow, gt_flow, gt_occ):
    pred_flow, gt_flow, gt_occ = _np(pred_flow), _np(gt_flow), _np(gt_occ)
    mask = gt_occ > 0
    if not mask.any():
        warnings.warn("EPE has no occupied cells; reporting 0", EmptySupportWarning)
        return 0.0
    err = np.linalg.norm(pred_flow - gt_flow, axis=-1)
    return float(err[mask].mean())


def flow_warp(occ_prev, flow):
    """occ_prev sampled at x + flow[x]. occ_prev: [..., H, W]; flow: [..., H, W, 2]."""
    occ_prev = torch.as_tensor(occ_prev, dtype=torch.float64)
    flow = torch.as_tensor(flow, dtype=torch.float64)
    lead = occ_prev.shape[:-2]
    h, w = occ_prev.shape[-2:]
    m = occ_prev.reshape(-1, h, w, 1)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=flow.dtype), torch.arange(w, dtype=flow.dtype), indexing="ij")
    pts = torch.stack([xs, ys], dim=-1) + flow.reshape(-1, h, w, 2)
    return bilinear_sample(m, pts)[..., 0].reshape(*lead, h, w)


def flow_grounded_occupancy(pred_flow_t, gt_occ_prev, pred_occ_t):
    warped = flow_warp(gt_occ_prev, pred_flow_t)
    return (warped * torch.as_tensor(pred_occ_t, dtype=torch.float64)).numpy()


@dataclass
class MetricReport:
    auc_observed: float = 0.0
    soft_iou_observed: float = 0.0
    auc_occluded: float = 0.0
    soft_iou_occluded: float = 0.0
    epe: float = 0.0
    auc_fg: float = 0.0
    soft_iou_fg: float = 0.0
    flags: list[str] = field(default_factory=list)

    def as_dict(self):
        return asdict(self)

    def to_text(self):
        lines = [f"{k} = {v:.6f}" for k, v in self.as_dict().items() if k != "flags"]
        lines.append("flags = " + ",".join(self.flags))
        return "\n".join(lines) + "\n"


_METRIC_KEYS = ("auc_observed", "soft_iou_observed", "auc_occluded", "soft_iou_occluded",
                "epe", "auc_fg", "soft_iou_fg")


def scene_metrics(pred, gt, gt_occ_t0):
    """Per-timestep metrics of one scene.

    pred: dict of numpy arrays flow [T,H,W,2], observed [T,H,W], occluded [T,H,W].
    gt: dict with gt_observed, gt_occluded, gt_flow. gt_occ_t0: [H, W] occupancy
    at the current step (start of the flow-grounded chain).
    Returns {metric: [T] values with NaN where undefined}.
    """
    T = gt["gt_observed"].shape[0]
    union_gt = np.clip(gt["gt_observed"] + gt["gt_occluded"], 0, 1)
    union_pred = np.clip(pred["observed"] + pred["occluded"], 0, 1)
    out = {k: np.full(T, np.nan) for k in _METRIC_KEYS}
    for t in range(T):
        for key, p, y in (("observed", pred["observed"][t], gt["gt_observed"][t]),
                          ("occluded", pred["occluded"][t], gt["gt_occluded"][t])):
            if y.any():
                out[f"auc_{key}"][t] = compute_auc(p, y)
                out[f"soft_iou_{key}"][t] = compute_soft_iou(p, y)
        if union_gt[t].any():
            out["epe"][t] = compute_epe(pred["flow"][t], gt["gt_flow"][t], union_gt[t])
            prev = gt_occ_t0 if t == 0 else union_gt[t - 1]
            fg = flow_grounded_occupancy(pred["flow"][t], prev, union_pred[t])
            out["auc_fg"][t] = compute_auc(fg, union_gt[t])
            out["soft_iou_fg"][t] = compute_soft_iou(fg, union_gt[t])
    return out


def aggregate(per_scene: list[dict]) -> MetricReport:
    """Mean over scenes, then over timesteps; undefined entries are skipped and flagged."""
    if not per_scene:
        raise ValueError("no scenes to aggregate")
    report, flags = {}, []
    for key in _METRIC_KEYS:
        vals = np.stack([s[key] for s in per_scene])  # [N, T]
        missing = int(np.isnan(vals).sum())
        if missing:
            flags.append(f"{key}:empty_support={missing}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            per_t = np.nanmean(vals, axis=0)
        report[key] = float(np.nanmean(per_t)) if np.isfinite(per_t).any() else 0.0
    return MetricReport(**report, flags=flags)
