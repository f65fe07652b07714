import numpy as np
import pytest
import torch

from conftest import fd_check
from hgnet.context_encoder import ContextTokens
from hgnet.layers import init_weights
from hgnet.temporal_memory import Covariates, HeadReadout, SequencingError, TimeSeriesMemory


def _gru_oracle(x, h0, params, layers):
    """Stacked GRU gate equations (reset, update, candidate) evaluated in numpy."""
    sig = lambda z: 1 / (1 + np.exp(-z))
    inp, hs = x, []
    for layer in range(layers):
        w_ih, w_hh = params[f"weight_ih_l{layer}"], params[f"weight_hh_l{layer}"]
        b_ih, b_hh = params[f"bias_ih_l{layer}"], params[f"bias_hh_l{layer}"]
        h = h0[layer]
        c = h.shape[-1]
        gi, gh = inp @ w_ih.T + b_ih, h @ w_hh.T + b_hh
        r = sig(gi[:, :c] + gh[:, :c])
        z = sig(gi[:, c:2 * c] + gh[:, c:2 * c])
        n = np.tanh(gi[:, 2 * c:] + r * gh[:, 2 * c:])
        h = (1 - z) * n + z * h
        hs.append(h)
        inp = h
    return inp, np.stack(hs)


def test_zero_weight_recurrence_gives_zero_memory():
    mem = TimeSeriesMemory(8, cov_dim=4, layers=2)
    for p in mem.parameters():
        torch.nn.init.zeros_(p)
    state = mem.initial_state(2, 4)
    assert torch.all(state.h == 0) and state.t == 0
    m, state = mem.step(torch.randn(2, 4, 8), torch.randn(4), state, t=1)
    # update gate 0.5, candidate tanh(0) = 0, prior 0
    assert torch.all(m == 0) and state.t == 1


@pytest.mark.parametrize("steps", [1, 3])
def test_step_matches_hand_stepped_gates(steps):
    torch.manual_seed(0)
    mem = TimeSeriesMemory(8, cov_dim=4, layers=2).double()
    params = {k: v.detach().numpy() for k, v in mem.gru.named_parameters()}
    b, s = 2, 4
    state = mem.initial_state(b, s, dtype=torch.float64)
    h = np.zeros((2, b * s, 8))
    for t in range(1, steps + 1):
        y, c = torch.randn(b, s, 8, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
        m, state = mem.step(y, c, state, t)
        x = np.concatenate([y.numpy(), np.broadcast_to(c.numpy(), (b, s, 4))], -1).reshape(b * s, -1)
        m_ref, h = _gru_oracle(x, h, params, 2)
        np.testing.assert_allclose(m.detach().numpy().reshape(b * s, 8), m_ref, atol=1e-12)
        np.testing.assert_allclose(state.h.detach().numpy(), h, atol=1e-12)


def test_step_is_deterministic():
    torch.manual_seed(0)
    mem = TimeSeriesMemory(8, cov_dim=4)
    y, c = torch.randn(1, 4, 8), torch.randn(4)
    s0 = mem.initial_state(1, 4)
    m1, s1 = mem.step(y, c, s0, 1)
    m2, s2 = mem.step(y, c, s0, 1)
    assert torch.equal(m1, m2) and torch.equal(s1.h, s2.h)


def test_sequencing_error():
    mem = TimeSeriesMemory(8, cov_dim=4)
    state = mem.initial_state(1, 4)
    with pytest.raises(SequencingError):
        mem.step(torch.zeros(1, 4, 8), torch.zeros(4), state, t=2)
    _, state = mem.step(torch.zeros(1, 4, 8), torch.zeros(4), state, t=1)
    with pytest.raises(SequencingError):
        mem.step(torch.zeros(1, 4, 8), torch.zeros(4), state, t=1)


def test_positions_are_independent():
    torch.manual_seed(0)
    mem = TimeSeriesMemory(8, cov_dim=4)
    y, c = torch.randn(1, 4, 8), torch.randn(4)
    m1, _ = mem.step(y, c, mem.initial_state(1, 4), 1)
    y2 = y.clone()
    y2[0, 2] += 3.0
    m2, _ = mem.step(y2, c, mem.initial_state(1, 4), 1)
    changed = (m1 - m2).abs().sum(-1)[0] > 0
    assert changed.tolist() == [False, False, True, False]


def test_memory_gradient_matches_finite_differences():
    torch.manual_seed(1)
    mem = TimeSeriesMemory(8, cov_dim=4)
    h0 = torch.randn(2, 4, 8) * 0.5

    def fn(mod, y, c, h):
        state = mod.initial_state(1, 4, dtype=y.dtype)
        state.h = h
        m, _ = mod.step(y, c, state, 1)
        return m

    fd_check(fn, [torch.randn(1, 4, 8), torch.randn(4), h0], module=mem)


def test_hidden_state_bounded_over_long_rollout():
    torch.manual_seed(2)
    mem = TimeSeriesMemory(8, cov_dim=4)
    for p in mem.parameters():
        p.data.normal_(0, 2.0)
    state = mem.initial_state(3, 4)
    with torch.no_grad():
        for t in range(1, 101):
            _, state = mem.step(torch.randn(3, 4, 8) * 100, torch.randn(4) * 100, state, t)
            assert state.h.abs().max() < 1e3


def test_covariates_are_one_indexed():
    cov = Covariates(4, 8)
    assert torch.equal(cov(1), cov.table[0]) and torch.equal(cov(4), cov.table[3])
    for bad in (0, 5):
        with pytest.raises(IndexError):
            cov(bad)


def _readout(seed=0):
    torch.manual_seed(seed)
    r = HeadReadout(8, heads=2)
    init_weights(r)
    for p in r.parameters():
        p.data += 0.2 * torch.randn_like(p)
    return r.eval()


def test_readout_rows_sum_over_valid_agents():
    r = _readout()
    mask = torch.tensor([[True, False, True]])
    ctx = ContextTokens(torch.randn(1, 3, 8), mask)
    _, w = r(torch.randn(1, 16, 8), ctx, need_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones(1, 2, 16), atol=1e-5, rtol=0)
    assert torch.all(w[..., 1] == 0)


def test_readout_single_agent_is_value_projection_plus_residual():
    r = _readout()
    feat = torch.randn(2, 16, 8)
    tok = torch.randn(2, 1, 8)
    y = r(feat, ContextTokens(tok, torch.ones(2, 1, dtype=torch.bool)))
    expect = feat + r.attn.to_out(r.attn.to_v(tok))
    torch.testing.assert_close(y, expect.expand_as(feat), atol=1e-6, rtol=1e-6)


def test_readout_masked_agents_have_no_influence():
    r = _readout()
    feat = torch.randn(1, 16, 8)
    mask = torch.tensor([[True, False, True, False]])
    tok = torch.randn(1, 4, 8)
    tok2 = tok.clone()
    tok2[0, 1] = 1e3
    tok2[0, 3] = -7.0
    assert torch.equal(r(feat, ContextTokens(tok, mask)), r(feat, ContextTokens(tok2, mask)))
