import json

import numpy as np
import pytest
import torch
from PIL import Image

from hgnet import cli
from hgnet.config import ConfigError, load_config, parse_config
from hgnet.dataset import read_dataset, write_dataset
from hgnet.harness import (
    ABLATION_MATRIX, CheckpointError, IncompatibleDataError, NonFiniteError, build_model, evaluate,
    flow_image, load_checkpoint, make_optimizer, occupancy_image, predict, render, restore_optimizer,
    run_ablations, save_checkpoint, split_validation, train, train_step,
)
from hgnet.model import stack_samples
from hgnet.scenegen import simulate_scene

TINY_BASE = """
grid.size = 32
horizons.history = 3
horizons.horizon = 2
model.dim = 32
train.batch = 2
scene.num_agents = 4
scene.min_agents = 2
"""
TINY = TINY_BASE + "train.epochs = 1\n"


@pytest.fixture(scope="module")
def tiny_cfg():
    return parse_config(TINY, environ={})


@pytest.fixture(scope="module")
def tiny_samples(tiny_cfg):
    sc = tiny_cfg.scene_config()
    return [simulate_scene(i, sc) for i in range(4)]


# ---------------------------------------------------------------------------
# config


def test_defaults():
    cfg = load_config(environ={})
    assert cfg.train.dropout == 0.1 and cfg.train.lr == 1e-4
    assert cfg.train.lr_decay_factor == 0.5 and cfg.train.lr_decay_every == 2
    assert cfg.train.epochs == 16 and cfg.grid.size == 64


def test_table_and_dotted_forms_agree():
    a = parse_config("[train]\nlr = 0.001\nbatch = 3\n[grid]\nsize = 32\n", environ={})
    b = parse_config("train.lr = 1e-3\ntrain.batch = 3\ngrid.size = 32\n", environ={})
    assert a.to_dict() == b.to_dict()
    assert a.train.lr == 1e-3 and isinstance(a.train.lr, float)


def test_text_roundtrip(tiny_cfg):
    assert parse_config(tiny_cfg.to_text(), environ={}).to_dict() == tiny_cfg.to_dict()


@pytest.mark.parametrize("text", [
    "grid.size = 40", "horizons.horizon = 0", "train.bogus = 1", "nosuch.key = 1", "train.lr = 'fast'",
    "ablations.fgat_enabled = 1", "train.batch = 1.5", "grid.size = ", "model.dim = 30",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text, environ={})


def test_seed_env_override():
    assert parse_config("train.seed = 3", environ={"HGNET_SEED": "11"}).train.seed == 11
    assert parse_config("train.seed = 3", environ={}).train.seed == 3
    with pytest.raises(ConfigError):
        parse_config("", environ={"HGNET_SEED": "x"})


def test_model_and_scene_config_mapping(tiny_cfg):
    mc, sc = tiny_cfg.model_config(), tiny_cfg.scene_config()
    assert (mc.grid, mc.history, mc.horizon, mc.dim, mc.dropout) == (32, 3, 2, 32, 0.1)
    assert (sc.grid_size, sc.history, sc.horizon, sc.num_agents) == (32, 3, 2, 4)


# ---------------------------------------------------------------------------
# training


def test_lr_schedule(tiny_cfg, tiny_samples):
    cfg = parse_config(TINY_BASE + "train.epochs = 4\n", environ={})
    res = train(cfg, tiny_samples[:2])
    assert [h["lr"] for h in res.history] == pytest.approx([1e-4, 1e-4, 5e-5, 5e-5])


def test_same_seed_same_first_epoch(tiny_cfg, tiny_samples):
    a = train(tiny_cfg, tiny_samples[:2]).history[0]["total"]
    b = train(tiny_cfg, tiny_samples[:2]).history[0]["total"]
    assert a == b


def test_nan_abort_names_tensor(tiny_cfg, tiny_samples):
    model = build_model(tiny_cfg)
    opt, _ = make_optimizer(model, tiny_cfg)
    with torch.no_grad():
        model.decoder.fpn["flow"].out.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match="output.flow"):
        train_step(model, opt, stack_samples(tiny_samples[:1]))


def test_disabled_submodules_stay_at_init(tiny_cfg, tiny_samples):
    cfg = parse_config(TINY_BASE + "train.epochs = 2\nablations.fgat_enabled = false\n"
                       "ablations.memory_enabled = false\n", environ={})
    model = build_model(cfg)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train(cfg, tiny_samples, model=model)
    frozen = [n for n in before if n.startswith(("decoder.fgat.", "decoder.memory."))]
    assert frozen
    for n, p in model.named_parameters():
        if n in frozen:
            assert torch.equal(p, before[n]), n
    assert not torch.equal(model.decoder.fallback["flow"].attn.to_q.weight,
                           before["decoder.fallback.flow.attn.to_q.weight"])


def test_train_writes_log_and_checkpoint(tiny_cfg, tiny_samples, tmp_path):
    res = train(tiny_cfg, tiny_samples[:3], tiny_samples[3:], tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == tiny_cfg.train.epochs
    rec = json.loads(lines[0])
    assert {"epoch", "lr", "l_occ", "l_flow", "total", "val"} <= set(rec)
    assert 0 <= rec["val"]["auc_observed"] <= 1
    assert res.checkpoint.exists() and (tmp_path / "config.toml").exists()


def test_split_validation():
    tr, va = split_validation(list(range(10)), 0.2)
    assert tr == list(range(8)) and va == [8, 9]
    assert split_validation([1], 0.5) == ([1], [])


# ---------------------------------------------------------------------------
# evaluation and checkpoints


def test_checkpoint_roundtrip_bitwise(tiny_cfg, tiny_samples, tmp_path):
    res = train(tiny_cfg, tiny_samples[:2])
    path = save_checkpoint(tmp_path / "c.pt", res.model, res.optimizer, 1, tiny_cfg)
    model, cfg, ckpt = load_checkpoint(path)
    assert cfg.to_dict() == tiny_cfg.to_dict() and ckpt["epoch"] == 1
    batch = stack_samples(tiny_samples)
    res.model.eval()
    with torch.no_grad():
        a, b = res.model(batch), model(batch)
    for k in ("flow", "observed", "occluded"):
        assert torch.equal(a[k], b[k])
    opt, _ = restore_optimizer(model, cfg, ckpt)
    s0 = next(iter(res.optimizer.state.values()))
    s1 = next(iter(opt.state.values()))
    assert torch.equal(s0["exp_avg"], s1["exp_avg"])


def test_bad_checkpoint(tmp_path):
    p = tmp_path / "bad.pt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    torch.save({"format_version": 99}, p)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_evaluate_rejects_empty_and_mismatch(tiny_cfg):
    model = build_model(tiny_cfg)
    with pytest.raises(ValueError):
        evaluate(model, [])
    with pytest.raises(IncompatibleDataError):
        evaluate(model, [simulate_scene(0)])


def test_self_consistency_auc(tiny_cfg, tiny_samples):
    model = build_model(tiny_cfg)
    with torch.no_grad():
        for tag in ("observed", "occluded"):
            model.decoder.fpn[tag].out.weight.mul_(1e4)
    preds = predict(model, tiny_samples)
    own = []
    for s, p in zip(tiny_samples, preds):
        obs = (p["observed"] >= 0.5).astype(np.uint8)
        occ = ((p["occluded"] >= 0.5) & (obs == 0)).astype(np.uint8)
        own.append(type(s)(**{**{k: getattr(s, k) for k in s.__dataclass_fields__},
                              "gt_observed": obs, "gt_occluded": occ}))
    assert any(s.gt_observed.any() for s in own)
    rep = evaluate(model, own)
    assert rep.auc_observed == pytest.approx(1.0)


def test_ablation_matrix_gives_four_reports(tiny_cfg, tiny_samples):
    reports = run_ablations(tiny_cfg, tiny_samples[:2], tiny_samples[2:], ABLATION_MATRIX)
    assert set(reports) == set(ABLATION_MATRIX) and len(reports) == 4
    assert all(0 <= r.auc_observed <= 1 for r in reports.values())


# ---------------------------------------------------------------------------
# rendering


def test_zero_occupancy_renders_black():
    img = occupancy_image(np.zeros((8, 8)))
    assert img.mode == "L" and np.asarray(img).max() == 0


def test_unit_flow_uniform_hue():
    flow = np.zeros((8, 8, 2))
    flow[..., 0] = 1.0
    rgb = np.asarray(flow_image(flow))
    assert np.all(rgb == rgb[0, 0]) and rgb[0, 0].max() == 255
    hsv = np.asarray(Image.fromarray(rgb).convert("HSV"))
    assert np.all(hsv[..., 0] == hsv[0, 0, 0])
    # opposite direction gets a different hue
    assert not np.array_equal(np.asarray(flow_image(-flow)), rgb)
    assert np.asarray(flow_image(np.zeros((4, 4, 2)))).max() == 0


def test_render_writes_images_per_target(tiny_cfg, tiny_samples, tmp_path):
    (bundle,) = predict(build_model(tiny_cfg), tiny_samples[:1])
    paths = render(tiny_samples[0], bundle, tmp_path / "img")
    T = tiny_samples[0].horizon
    assert len(paths) == 3 * T and all(p.exists() for p in paths)
    with pytest.raises(IncompatibleDataError):
        render(simulate_scene(0), bundle, tmp_path / "img2")


def test_render_unwritable_path(tiny_cfg, tiny_samples, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    (bundle,) = predict(build_model(tiny_cfg), tiny_samples[:1])
    with pytest.raises(OSError):
        render(tiny_samples[0], bundle, blocker / "sub")


# ---------------------------------------------------------------------------
# command line


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(TINY)
    data = tmp_path / "data"
    assert cli.main(["generate", "--config", str(cfg_path), "--out", str(data), "--num", "5"]) == 0
    assert len(read_dataset(data)) == 5
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(run),
                     "--no-memory"]) == 0
    ckpt = run / "checkpoint.pt"
    _, cfg, _ = load_checkpoint(ckpt)
    assert cfg.ablations.memory_enabled is False and cfg.ablations.fgat_enabled is True
    report = tmp_path / "rep" / "report.json"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert set(rep) >= {"auc_observed", "soft_iou_observed", "auc_occluded", "epe", "auc_fg"}
    assert report.with_suffix(".txt").read_text().startswith("auc_observed = ")
    out = tmp_path / "render"
    assert cli.main(["render", "--ckpt", str(ckpt), "--scene", "1", "--out", str(out), "--data", str(data)]) == 0
    assert len(list(out.glob("*.png"))) == 3 * 2
    # no dataset on disk: the scene is regenerated from its seed
    out2 = tmp_path / "render2"
    assert cli.main(["render", "--ckpt", str(ckpt), "--scene", "1", "--out", str(out2)]) == 0
    assert sorted(p.name for p in out2.glob("*.png")) == sorted(p.name for p in out.glob("*.png"))


def test_cli_errors(tmp_path, capsys):
    cfg_path = tmp_path / "bad.toml"
    cfg_path.write_text("grid.size = 40\n")
    assert cli.main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "d"), "--num", "1"]) == 2
    assert "grid.size" in capsys.readouterr().err
    empty = tmp_path / "empty"
    write_dataset([], empty)
    ok_cfg = tmp_path / "ok.toml"
    ok_cfg.write_text(TINY)
    assert cli.main(["train", "--config", str(ok_cfg), "--data", str(empty), "--out", str(tmp_path / "r")]) == 2
