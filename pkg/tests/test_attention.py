import numpy as np
import pytest

from densebam_gi import tensor as T
from densebam_gi.attention import AttentionState, CoverageAttention
from densebam_gi.encoder import FeatureGrid
from densebam_gi.tensor import ContractError, Tensor

from oracles import conv_oracle


def make(hidden=3, feat=4, attn=5, cov=2, kernel=3, seed=0):
    return CoverageAttention(hidden, feat, attn, cov, kernel, np.random.default_rng(seed))


def grid_of(rng, n=1, c=4, h=2, w=3):
    return FeatureGrid(Tensor(rng.normal(size=(n, c, h, w))))


def energy_oracle(att, h, feats, beta):
    """Scalar evaluation of the additive energy at every position of one sample."""
    c, hh, ww = feats.shape
    k = att.cov_kernel.shape[-1]
    cov = conv_oracle(beta.reshape(1, 1, hh, ww), att.cov_kernel.data, padding=k // 2)[0]
    energies = []
    for i in range(hh):
        for j in range(ww):
            pre = att.w_h.data @ h + att.w_a.data @ feats[:, i, j] + att.w_f.data @ cov[:, i, j] + att.b.data
            energies.append(float(att.nu.data @ np.tanh(pre)))
    return np.array(energies)


def test_single_position_grid():
    rng = np.random.default_rng(1)
    att = make()
    grid = grid_of(rng, h=1, w=1)
    ctx, alpha, _ = att.attend(Tensor(rng.normal(size=3)), grid, AttentionState.initial(grid))
    assert alpha.data.tolist() == [1.0]
    assert np.array_equal(ctx.data, grid.features.data.reshape(-1))


def test_zero_nu_gives_uniform_attention():
    rng = np.random.default_rng(2)
    att = make()
    att.nu.data[...] = 0.0
    grid = grid_of(rng)
    ctx, alpha, _ = att.attend(Tensor(rng.normal(size=3)), grid, AttentionState.initial(grid))
    assert np.allclose(alpha.data, 1 / 6, rtol=0, atol=1e-15)
    assert np.allclose(ctx.data, grid.features.data[0].reshape(4, -1).mean(axis=1), rtol=0, atol=1e-12)


def test_two_position_grid_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    att = make()
    grid = grid_of(rng, h=1, w=2)
    beta = np.array([[[[0.3, 0.7]]]])
    h = rng.normal(size=3)
    ctx, alpha, _ = att.attend(Tensor(h), grid, AttentionState(Tensor(beta)))
    e = energy_oracle(att, h, grid.features.data[0], beta[0, 0])
    a = np.exp(e - e.max()) / np.exp(e - e.max()).sum()
    assert np.allclose(alpha.data, a, rtol=0, atol=1e-12)
    assert np.allclose(ctx.data, grid.features.data[0].reshape(4, 2) @ a, rtol=0, atol=1e-12)


def test_batched_matches_per_sample():
    rng = np.random.default_rng(4)
    att = make()
    grid = grid_of(rng, n=3, h=3, w=3)
    beta = Tensor(rng.random((3, 1, 3, 3)))
    hs = rng.normal(size=(3, 3))
    ctx, alpha, _ = att.attend(Tensor(hs), grid, AttentionState(beta))
    for i in range(3):
        one = FeatureGrid(Tensor(grid.features.data[i:i + 1]))
        c1, a1, _ = att.attend(Tensor(hs[i]), one, AttentionState(Tensor(beta.data[i:i + 1])))
        assert np.allclose(ctx.data[i], c1.data, rtol=0, atol=1e-12)
        assert np.allclose(alpha.data[i], a1.data, rtol=0, atol=1e-12)


def test_invariants_over_a_decode():
    rng = np.random.default_rng(5)
    att = make(cov=3, kernel=5)
    grid = grid_of(rng, n=2, h=3, w=4)
    state = AttentionState.initial(grid)
    feats = grid.as_sequence().data
    for _ in range(12):
        prev_beta = state.beta.data.copy()
        ctx, alpha, state = att.attend(Tensor(rng.normal(size=(2, 3))), grid, state)
        assert np.all(alpha.data >= 0)
        assert np.all(np.abs(alpha.data.sum(axis=-1) - 1) < 1e-9)
        assert np.array_equal(state.beta.data, prev_beta + alpha.data.reshape(prev_beta.shape))
        assert np.all(ctx.data >= feats.min(axis=1) - 1e-12) and np.all(ctx.data <= feats.max(axis=1) + 1e-12)
        assert state.last_alpha is alpha and state.last_context is ctx


def test_zero_coverage_projection_ignores_history():
    rng = np.random.default_rng(6)
    att = make()
    att.w_f.data[...] = 0.0
    grid = grid_of(rng)
    h = Tensor(rng.normal(size=3))
    _, a0, _ = att.attend(h, grid, AttentionState(Tensor(np.zeros((1, 1, 2, 3)))))
    _, a1, _ = att.attend(h, grid, AttentionState(Tensor(rng.random((1, 1, 2, 3)))))
    assert np.array_equal(a0.data, a1.data)


def test_coverage_changes_attention_when_live():
    rng = np.random.default_rng(7)
    att = make()
    grid = grid_of(rng)
    h = Tensor(rng.normal(size=3))
    beta = np.zeros((1, 1, 2, 3))
    _, a0, _ = att.attend(h, grid, AttentionState(Tensor(beta)))
    beta[0, 0, 1, 2] = 1.0
    _, a1, _ = att.attend(h, grid, AttentionState(Tensor(beta)))
    assert not np.allclose(a0.data, a1.data)


def test_fused_coverage_filter_equals_separate_projection():
    rng = np.random.default_rng(8)
    att = make(cov=3, kernel=3)
    beta = rng.random((2, 1, 4, 5))
    separate = conv_oracle(beta, att.cov_kernel.data, padding=1)
    projected = np.einsum("dq,nqhw->ndhw", att.w_f.data, separate)
    fused = T.conv2d(Tensor(beta), att.coverage_filter(), padding=1).data
    assert np.allclose(fused, projected, rtol=0, atol=1e-12)


def test_contract_errors():
    with pytest.raises(ContractError):
        make(kernel=4)
    rng = np.random.default_rng(9)
    grid = grid_of(rng)
    with pytest.raises(ContractError):
        make().attend(Tensor(np.zeros(3)), grid, AttentionState(Tensor(np.zeros((1, 1, 3, 2)))))
