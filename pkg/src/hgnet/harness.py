"""Training, evaluation, checkpointing, ablations and rendering."""
from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, config_from_dict
from .model import HGNet, ModelConfig, index_batch, stack_samples
from .objectives import MetricReport, aggregate, batch_loss, scene_metrics

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# ablation variants: name -> (fgat_enabled, memory_enabled)
ABLATIONS = {
    "full": (True, True),
    "no_memory": (True, False),
    "no_fgat": (False, False),
}
ABLATION_MATRIX = {
    "fgat+memory": (True, True),
    "fgat": (True, False),
    "memory": (False, True),
    "plain": (False, False),
}


class NonFiniteError(RuntimeError):
    pass


class IncompatibleDataError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def build_model(cfg: RunConfig) -> HGNet:
    seed_everything(cfg.train.seed)
    return HGNet(cfg.model_config())


def make_optimizer(model, cfg: RunConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.lr, betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.train.lr_decay_every, gamma=cfg.train.lr_decay_factor)
    return opt, sched


def first_non_finite(named):
    for name, t in named:
        if t is not None and not torch.isfinite(t).all():
            return name
    return None


def check_geometry(model_cfg: ModelConfig, samples):
    s = samples[0]
    got = (s.grid_size, s.history, s.horizon, s.map_polylines.shape[1])
    want = (model_cfg.grid, model_cfg.history, model_cfg.horizon, model_cfg.map_points)
    if got != want:
        raise IncompatibleDataError(
            f"dataset geometry (grid, history, horizon, map points) = {got} does not match model {want}"
        )


def train_step(model, optimizer, batch, grad_clip=1.0):
    """One optimizer step. Returns the LossBreakdown floats."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(batch)
    loss = batch_loss(out, batch)
    bad = first_non_finite([
        ("output.flow", out["flow"]), ("output.observed_logits", out["observed_logits"]),
        ("output.occluded_logits", out["occluded_logits"]),
        ("loss.l_occ", loss.l_occ), ("loss.l_flow", loss.l_flow), ("loss.total", loss.total),
    ])
    if bad:
        raise NonFiniteError(f"non-finite value in {bad}")
    loss.total.backward()
    bad = first_non_finite((f"grad.{n}", p.grad) for n, p in model.named_parameters())
    if bad:
        raise NonFiniteError(f"non-finite value in {bad}")
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return loss.as_floats()


@dataclass
class TrainResult:
    model: HGNet
    optimizer: torch.optim.Optimizer
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    checkpoint: Path | None = None


def split_validation(samples, fraction):
    n_val = int(round(len(samples) * fraction))
    if fraction > 0 and len(samples) > 1:
        n_val = max(n_val, 1)
    return samples[:len(samples) - n_val], samples[len(samples) - n_val:]


def train(cfg: RunConfig, train_samples, val_samples=None, out_dir=None, model=None) -> TrainResult:
    """Minibatch training with the step-decayed Adam schedule.

    Writes ``train_log.jsonl`` (one record per epoch) and ``checkpoint.pt`` to
    out_dir when given.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    model = model or build_model(cfg)
    check_geometry(model.cfg, train_samples)
    optimizer, scheduler = make_optimizer(model, cfg)
    data = stack_samples(train_samples)
    n = len(train_samples)
    gen = torch.Generator().manual_seed(cfg.train.seed)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.toml").write_text(cfg.to_text())
        log_file = (out_dir / "train_log.jsonl").open("w")
    result = TrainResult(model, optimizer)
    try:
        for epoch in range(cfg.train.epochs):
            lr = optimizer.param_groups[0]["lr"]
            perm = torch.randperm(n, generator=gen)
            sums = {"l_occ": 0.0, "l_flow": 0.0, "total": 0.0}
            steps = 0
            for start in range(0, n, cfg.train.batch):
                losses = train_step(model, optimizer, index_batch(data, perm[start:start + cfg.train.batch]),
                                    cfg.train.grad_clip)
                result.step_losses.append(losses["total"])
                for k in sums:
                    sums[k] += losses[k]
                steps += 1
            scheduler.step()
            record = {"epoch": epoch, "lr": lr, "steps": steps, **{k: v / steps for k, v in sums.items()}}
            if val_samples:
                record["val"] = evaluate(model, val_samples).as_dict()
            result.history.append(record)
            log.info("epoch %d lr %.2e loss %.5f", epoch, lr, record["total"])
            if out_dir:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
        if out_dir:
            result.checkpoint = save_checkpoint(out_dir / "checkpoint.pt", model, optimizer, cfg.train.epochs, cfg)
    finally:
        if out_dir:
            log_file.close()
    return result


@torch.no_grad()
def predict(model, samples, batch=8):
    """Eval-mode predictions as numpy arrays, one dict per scene."""
    model.eval()
    preds = []
    for start in range(0, len(samples), batch):
        out = model(stack_samples(samples[start:start + batch]))
        for i in range(out["flow"].shape[0]):
            preds.append({k: out[k][i].numpy() for k in ("flow", "observed", "occluded")})
    return preds


def evaluate(model, samples, batch=8) -> MetricReport:
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    check_geometry(model.cfg, samples)
    per_scene = []
    for s, pred in zip(samples, predict(model, samples, batch)):
        gt = {"gt_observed": s.gt_observed.astype(np.float64), "gt_occluded": s.gt_occluded.astype(np.float64),
              "gt_flow": s.gt_flow}
        per_scene.append(scene_metrics(pred, gt, (s.hist_occupancy[-1] >= 0.5).astype(np.float64)))
    return aggregate(per_scene)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, optimizer, epoch, cfg: RunConfig):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "params": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "config": cfg.to_dict(),
        "model_config": {**vars(model.cfg)},
    }, path)
    return path


def load_checkpoint(path):
    """Returns (model in eval mode, RunConfig, raw checkpoint dict)."""
    path = Path(path)
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    cfg = config_from_dict(ckpt["config"])
    model = HGNet(ModelConfig(**ckpt["model_config"]))
    model.load_state_dict(ckpt["params"])
    return model.eval(), cfg, ckpt


def restore_optimizer(model, cfg, ckpt):
    opt, sched = make_optimizer(model, cfg)
    if ckpt.get("optimizer"):
        opt.load_state_dict(ckpt["optimizer"])
    return opt, sched


# ---------------------------------------------------------------------------
# ablations


def run_ablations(cfg: RunConfig, train_samples, val_samples, variants=None, out_dir=None):
    """Train one model per variant from the same seed; returns {name: MetricReport}."""
    variants = ABLATIONS if variants is None else variants
    reports = {}
    for name, (fgat, memory) in variants.items():
        vcfg = copy.deepcopy(cfg)
        vcfg.ablations.fgat_enabled, vcfg.ablations.memory_enabled = fgat, memory
        res = train(vcfg, train_samples, None, Path(out_dir) / name if out_dir else None)
        reports[name] = evaluate(res.model, val_samples)
        log.info("ablation %s: auc_observed %.4f", name, reports[name].auc_observed)
    return reports


# ---------------------------------------------------------------------------
# rendering


def occupancy_image(grid):
    """[H, W] values in [0, 1] -> 8-bit grayscale image."""
    return Image.fromarray(np.clip(np.rint(np.asarray(grid) * 255), 0, 255).astype(np.uint8), mode="L")


def flow_image(flow, max_mag=None):
    """[H, W, 2] (dx, dy) -> RGB; hue = direction, value = magnitude / max_mag."""
    flow = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    max_mag = mag.max() if max_mag is None else max_mag
    hue = (np.arctan2(flow[..., 1], flow[..., 0]) % (2 * math.pi)) / (2 * math.pi)
    val = mag / max_mag if max_mag > 0 else np.zeros_like(mag)
    hsv = np.stack([np.rint(hue * 255) % 256, np.full_like(mag, 255), np.rint(np.clip(val, 0, 1) * 255)], -1)
    return Image.fromarray(hsv.astype(np.uint8), mode="HSV").convert("RGB")


def render(sample, bundle, out_dir, prefix="scene"):
    """Writes T grayscale images per occupancy target and T HSV flow images; returns the paths."""
    out_dir = Path(out_dir)
    flow = np.asarray(bundle["flow"])
    T = flow.shape[0]
    if flow.shape[1:3] != (sample.grid_size, sample.grid_size) or T != sample.horizon:
        raise IncompatibleDataError("prediction bundle does not match the scene geometry")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    max_mag = float(np.hypot(flow[..., 0], flow[..., 1]).max())
    paths = []
    for t in range(T):
        for name, img in (("observed", occupancy_image(bundle["observed"][t])),
                          ("occluded", occupancy_image(bundle["occluded"][t])),
                          ("flow", flow_image(flow[t], max_mag))):
            p = out_dir / f"{prefix}_{name}_t{t + 1}.png"
            img.save(p)
            paths.append(p)
    return paths
