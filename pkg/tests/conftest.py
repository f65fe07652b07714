import copy

import numpy as np
import pytest
import torch

from hgnet.model import HGNet, ModelConfig, stack_samples
from hgnet.scenegen import SceneConfig, simulate_scene

GRAD_RTOL = 1e-3


def _sample_coords(numel, k, gen):
    if numel <= k:
        return torch.arange(numel)
    return torch.randperm(numel, generator=gen)[:k]


def fd_check(fn, inputs, module=None, coords=24, eps=1e-6, seed=0, rtol=GRAD_RTOL,
             check_params=True):
    """Compare float32 autograd gradients with float64 central differences.

    ``fn(module, *inputs)`` returns a tensor; it is reduced to a scalar with a
    fixed random projection. Up to ``coords`` coordinates of every input and
    every parameter are checked; the norm-wise relative error over all checked
    coordinates must be <= rtol. Returns that error.
    """
    gen = torch.Generator().manual_seed(seed)
    inputs32 = [x.detach().float().clone().requires_grad_(x.is_floating_point()) for x in inputs]
    if module is not None:
        module = module.float().eval()
    out32 = fn(module, *inputs32)
    proj = torch.randn(out32.shape, generator=gen, dtype=torch.float64)
    (out32 * proj.float()).sum().backward()

    mod64 = copy.deepcopy(module).double().eval() if module is not None else None
    inputs64 = [x.detach().double() if x.is_floating_point() else x.detach() for x in inputs]

    def f64():
        with torch.no_grad():
            return float((fn(mod64, *inputs64) * proj).sum())

    targets = [(x64, x32.grad) for x64, x32 in zip(inputs64, inputs32) if x32.requires_grad]
    if check_params and module is not None:
        p32 = dict(module.named_parameters())
        for name, p64 in mod64.named_parameters():
            g = p32[name].grad
            targets.append((p64.data, torch.zeros_like(p32[name]) if g is None else g))

    analytic, numeric = [], []
    for t64, g32 in targets:
        flat = t64.view(-1)
        for i in _sample_coords(flat.numel(), coords, gen):
            old = flat[i].item()
            flat[i] = old + eps
            fp = f64()
            flat[i] = old - eps
            fm = f64()
            flat[i] = old
            numeric.append((fp - fm) / (2 * eps))
            analytic.append(g32.reshape(-1)[i].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    assert err <= rtol, f"gradient mismatch: relative error {err:.3e} > {rtol}"
    return err


@pytest.fixture(scope="session")
def small_scene_cfg():
    return SceneConfig(num_agents=4, min_agents=2, grid_size=32, history=3, horizon=2)


@pytest.fixture(scope="session")
def small_samples(small_scene_cfg):
    return [simulate_scene(seed, small_scene_cfg) for seed in range(3)]


@pytest.fixture(scope="session")
def small_batch(small_samples):
    return stack_samples(small_samples)


def small_model_cfg(**kw):
    base = dict(grid=32, history=3, horizon=2, dim=32, dropout=0.1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return HGNet(small_model_cfg()).eval()


# one summary line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, title, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
