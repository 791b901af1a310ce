import copy

import numpy as np
import pytest
import torch

from conftest import finite_difference_check
from lanerep import dataset as D
from lanerep.encoder import (
    EncoderConfig,
    LaneEncoder,
    StreamNorm,
    apply_geometry_dropout,
    pairwise_features,
)
from lanerep.errors import ConfigurationError


@pytest.fixture(scope="module")
def enc():
    e = LaneEncoder(EncoderConfig(seed=3))
    e.eval()
    return e


@pytest.fixture(scope="module")
def enc64():
    e = copy.deepcopy(LaneEncoder(EncoderConfig(seed=4))).double()
    e.eval()
    return e


def test_geometry_stream(enc):
    g = torch.rand(16, 2)
    out = enc.encode_geometry(g)
    assert out.shape == (64,)
    perm = g[torch.randperm(16, generator=torch.Generator().manual_seed(0))]
    assert not torch.equal(out, enc.encode_geometry(perm))
    assert torch.equal(out, enc.encode_geometry(g))
    with pytest.raises(ValueError):
        enc.encode_geometry(torch.full((16, 2), float("nan")))


def test_trajectory_single_slot_is_its_encoding(enc):
    t = torch.rand(1, 16, 2)
    out = enc.encode_trajectories(t, torch.tensor([True]))
    single = enc.trajectory(t)[0]
    torch.testing.assert_close(out, single, rtol=0, atol=1e-6)


def test_trajectory_padding_is_exact(enc):
    T = torch.rand(3, 16, 2)
    m = torch.tensor([True, True, False])
    base = enc.encode_trajectories(T, m)
    padded = torch.cat([T, torch.rand(4, 16, 2)])
    mp = torch.cat([m, torch.zeros(4, dtype=torch.bool)])
    assert torch.equal(base, enc.encode_trajectories(padded, mp))
    # garbage in the padded slot is never read
    T2 = T.clone()
    T2[2] = 1e6
    assert torch.equal(base, enc.encode_trajectories(T2, m))


def test_trajectory_duplicate_and_permutation(enc):
    T = torch.rand(3, 16, 2)
    m = torch.tensor([True, False, False])
    base = enc.encode_trajectories(T, m)
    dup = T.clone()
    dup[1] = T[0]
    torch.testing.assert_close(enc.encode_trajectories(dup, torch.tensor([True, True, False])), base, rtol=0, atol=1e-5)
    m3 = torch.tensor([True, True, True])
    a = enc.encode_trajectories(T, m3)
    b = enc.encode_trajectories(T[[2, 0, 1]], m3)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-5)
    with pytest.raises(ValueError):
        enc.encode_trajectories(T, torch.tensor([True, False]))


def test_descriptor_stream(enc, enc64):
    x = torch.rand(9)
    assert enc.encode_descriptor(x).shape == (64,)
    assert torch.equal(enc.encode_descriptor(x), enc.encode_descriptor(x))
    with pytest.raises(ValueError):
        enc.encode_descriptor(torch.rand(8))
    xi = torch.rand(9, dtype=torch.float64, requires_grad=True)
    w = torch.randn(64, dtype=torch.float64)
    assert finite_difference_check(lambda: enc64.encode_descriptor(xi) @ w, [xi], n_probe=9) < 1e-4


def test_fuse(enc):
    a, b, c = torch.randn(3, 2, 64)
    out = enc.fuse(a, b, c)
    assert out.shape == (2, 128)
    assert torch.equal(out, enc.fuse(a, b, c))
    assert not torch.allclose(enc.fuse(2 * a, b, c), 2 * out, atol=1e-4)


def test_pool_lane():
    v, w = torch.randn(2, 128)
    pooled, ok = LaneEncoder.pool_lane(v[None, None], torch.tensor([[True]]))
    assert torch.equal(pooled[0], v) and ok.item()
    pooled, _ = LaneEncoder.pool_lane(torch.stack([v, w])[None], torch.tensor([[True, True]]))
    torch.testing.assert_close(pooled[0], (v + w) / 2)
    junk = torch.stack([v, torch.full((128,), 1e9)])[None]
    pooled, _ = LaneEncoder.pool_lane(junk, torch.tensor([[True, False]]))
    assert torch.equal(pooled[0], v)
    pooled, ok = LaneEncoder.pool_lane(junk, torch.tensor([[False, False]]))
    assert not ok.item() and torch.all(pooled == 0)


def _plain_attention(att, z, pad):
    """Masked multi-head self-attention with the same weights, no pair bias."""
    S, D = z.shape
    H = att.heads
    W, b = att.qkv.weight.detach().numpy(), att.qkv.bias.detach().numpy()
    x = z.detach().numpy().astype(np.float64)
    qkv = x @ W.T + b
    q, k, v = qkv[:, :D], qkv[:, D : 2 * D], qkv[:, 2 * D :]
    out = np.zeros_like(x)
    dh = D // H
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        s[:, pad] = -np.inf
        e = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, sl] = (e / e.sum(axis=1, keepdims=True)) @ v[:, sl]
    y = x + out @ att.out.weight.detach().numpy().T + att.out.bias.detach().numpy()
    mu, var = y.mean(axis=1, keepdims=True), y.var(axis=1, keepdims=True)
    y = (y - mu) / np.sqrt(var + att.norm.eps) * att.norm.weight.detach().numpy() + att.norm.bias.detach().numpy()
    y[pad] = 0
    return y


def test_attention_zero_bias_matches_plain(enc):
    z = torch.randn(4, 128)
    phi = torch.randn(4, 4, 3)
    pad = torch.tensor([False, False, False, True])
    out = enc.cross_lane_attention(z, phi, pad)
    np.testing.assert_allclose(out.detach().numpy(), _plain_attention(enc.attention, z, pad.numpy()), atol=1e-5)


def test_attention_singleton_and_padding(enc):
    z = torch.randn(1, 128)
    out = enc.cross_lane_attention(z, torch.zeros(1, 1, 3), torch.tensor([False]))
    np.testing.assert_allclose(out.detach().numpy(), _plain_attention(enc.attention, z, np.array([False])), atol=1e-5)
    z = torch.randn(3, 128)
    phi = torch.randn(3, 3, 3)
    pad = torch.tensor([False, True, False])
    a = enc.cross_lane_attention(z, phi, pad)
    z2, phi2 = z.clone(), phi.clone()
    z2[1] = torch.randn(128) * 50
    phi2[1, :] = 7.0
    phi2[:, 1] = -3.0
    b = enc.cross_lane_attention(z2, phi2, pad)
    assert torch.equal(a[[0, 2]], b[[0, 2]])
    assert torch.all(a[1] == 0)
    with pytest.raises(ValueError):
        enc.cross_lane_attention(z, phi, torch.ones(3, dtype=torch.bool))


def test_attention_permutation_equivariance():
    e = LaneEncoder(EncoderConfig(seed=5))
    torch.nn.init.normal_(e.attention.bias.weight)
    e.eval()
    z = torch.randn(4, 128)
    stats = torch.rand(4, 4)
    phi = pairwise_features(stats)
    pad = torch.zeros(4, dtype=torch.bool)
    perm = torch.tensor([2, 0, 3, 1])
    a = e.cross_lane_attention(z, phi, pad)
    b = e.cross_lane_attention(z[perm], phi[perm][:, perm], pad)
    torch.testing.assert_close(b, a[perm], rtol=0, atol=1e-5)
    # the bias path is live once its weights are nonzero
    assert not torch.allclose(a, e.cross_lane_attention(z, torch.zeros_like(phi), pad), atol=1e-4)


def test_pairwise_features():
    s = torch.tensor([[0.01, 1.0, 0.002, 0.5], [0.02, 2.0, -0.001, 0.0], [0.015, 0.0, 0.0, 0.25]])
    phi = pairwise_features(s)
    assert phi.shape == (3, 3, 3)
    torch.testing.assert_close(phi[..., :2], -phi.transpose(0, 1)[..., :2])
    assert torch.all(phi[torch.arange(3), torch.arange(3), :2] == 0)
    assert phi[..., 2].abs().max() <= 10
    assert phi[0, 1, 2] == 10.0
    torch.testing.assert_close(phi[0, 0, 2], torch.tensor(1.0), atol=1e-4, rtol=0)


def test_projection(enc):
    p = enc.project(torch.randn(5, 128))
    torch.testing.assert_close(p.norm(dim=1), torch.ones(5), atol=1e-6, rtol=0)
    torch.testing.assert_close((p * p).sum(1), torch.ones(5), atol=1e-6, rtol=0)
    cos = torch.nn.functional.cosine_similarity(p[0], p[1], dim=0)
    torch.testing.assert_close(p[0] @ p[1], cos, atol=1e-6, rtol=0)
    zero = enc.projection.net[2].bias.detach().clone()
    with torch.no_grad():
        enc.projection.net[2].bias.zero_()
        w = enc.projection.net[2].weight.detach().clone()
        enc.projection.net[2].weight.zero_()
        assert torch.all(torch.isfinite(enc.project(torch.randn(2, 128))))
        enc.projection.net[2].weight.copy_(w)
        enc.projection.net[2].bias.copy_(zero)


def test_role_heads(enc):
    r, e, s = enc.role_heads(torch.randn(128))
    assert r.shape == () and e.shape == (2,) and s.shape == ()
    assert 0 < torch.sigmoid(r).item() < 1


def test_geometry_dropout():
    f = torch.randn(64)
    assert torch.equal(apply_geometry_dropout(f, 0.0, True), f)
    g = torch.Generator().manual_seed(0)
    outs = [apply_geometry_dropout(f, 0.5, True, g) for _ in range(20)]
    for o in outs:
        assert torch.equal(o, 2 * f) or torch.all(o == 0)
    assert torch.equal(apply_geometry_dropout(f, 0.3, False), f)
    assert torch.all(apply_geometry_dropout(f, 0.3, False, absent=True) == 0)
    with pytest.raises(ConfigurationError):
        apply_geometry_dropout(f, 1.0, True)


def test_geometry_dropout_expectation():
    f = torch.linspace(0.5, 2.0, 8, dtype=torch.float64)
    g = torch.Generator().manual_seed(1)
    draws = apply_geometry_dropout(f.expand(100_000, 8), 0.3, True, g)
    mean = draws.mean(dim=0)
    assert torch.all((mean - f).abs() <= 0.02 * f.abs())


def test_streamnorm_single_row_uses_running_stats():
    bn = StreamNorm(4)
    bn.running_mean.fill_(1.0)
    bn.running_var.fill_(4.0)
    bn.train()
    x = torch.tensor([[3.0, 1.0, -1.0, 5.0]])
    torch.testing.assert_close(bn(x), (x - 1.0) / torch.sqrt(torch.tensor(4.0 + bn.eps)))


def test_full_forward_on_batch(tiny_dataset):
    e = LaneEncoder(EncoderConfig(seed=1))
    recs = tiny_dataset.records
    b = D.collate_batch(recs, [0, 1, 2])
    out = e.embed(b)
    n = len(recs)
    assert out.per_window.shape == (n, 3, 128)
    assert out.pooled.shape == (n, 128) and out.attended.shape == (n, 128)
    assert out.projection.shape == (n, 64)
    again = e.embed(b)
    assert torch.equal(out.attended, again.attended)
    absent = e.embed(b, geometry_absent=torch.ones(n, dtype=torch.bool))
    assert not torch.allclose(absent.pooled, out.pooled)


def test_extra_padding_slots_do_not_change_forward(tiny_dataset):
    e = LaneEncoder(EncoderConfig(seed=1))
    e.eval()
    b = D.collate_batch(tiny_dataset.records, [0, 1])
    out = e(b)
    extra = 3
    B, W, T = b.mask.shape
    traj = torch.cat([b.trajectories, torch.rand(B, W, extra, 16, 2)], dim=2)
    mask = torch.cat([b.mask, torch.zeros(B, W, extra, dtype=torch.bool)], dim=2)
    b2 = D.Batch(b.geometry, traj, mask, b.descriptor, b.window_valid, b.lane_stats, b.group_index, b.group_slots, b.lane_ids)
    out2 = e(b2)
    assert torch.equal(out.per_window, out2.per_window)
    assert torch.equal(out.attended, out2.attended)


def test_ablation_streams_zeroed(tiny_dataset):
    b = D.collate_batch(tiny_dataset.records[:6], [0])
    e = LaneEncoder(EncoderConfig(seed=2, streams=("geometry",), pairwise=False))
    e.eval()
    out = e(b)
    b2 = D.Batch(b.geometry, torch.rand_like(b.trajectories), b.mask, torch.rand_like(b.descriptor), b.window_valid, b.lane_stats, b.group_index, b.group_slots, b.lane_ids)
    assert torch.equal(out.pooled, e(b2).pooled)
    with pytest.raises(ConfigurationError):
        LaneEncoder(EncoderConfig(streams=("nothing",)))


@pytest.mark.parametrize("block", ["geometry", "trajectory", "descriptor", "fusion", "attention", "projection", "roles"])
def test_gradients_every_block(enc64, block):
    torch.manual_seed(0)
    e = enc64
    dt = torch.float64
    if block == "geometry":
        x = torch.rand(3, 16, 2, dtype=dt)
        mod, fn = e.geometry, lambda: (e.geometry(x) ** 2).sum()
    elif block == "trajectory":
        T = torch.rand(2, 3, 16, 2, dtype=dt)
        m = torch.tensor([[True, True, False], [True, False, False]])
        mod, fn = e.trajectory, lambda: (e.encode_trajectories(T, m) ** 2).sum()
    elif block == "descriptor":
        x = torch.rand(4, 9, dtype=dt)
        mod, fn = e.descriptor, lambda: (e.encode_descriptor(x) ** 2).sum()
    elif block == "fusion":
        a, b, c = torch.randn(3, 2, 64, dtype=dt)
        mod, fn = e.fusion, lambda: (e.fuse(a, b, c) ** 2).sum()
    elif block == "attention":
        torch.nn.init.normal_(e.attention.bias.weight, std=0.3)
        z = torch.randn(1, 3, 128, dtype=dt)
        phi = torch.randn(1, 3, 3, 3, dtype=dt)
        pad = torch.tensor([[False, False, True]])
        mod, fn = e.attention, lambda: (e.attention(z, phi, pad) * torch.linspace(-1, 1, 128, dtype=dt)).sum()
    elif block == "projection":
        z = torch.randn(3, 128, dtype=dt)
        mod, fn = e.projection, lambda: (e.project(z) * torch.linspace(-1, 1, 64, dtype=dt)).sum()
    else:
        z = torch.randn(3, 128, dtype=dt)
        mod = e.roles

        def fn():
            r, ed, s = e.role_heads(z)
            return (r**2).sum() + (ed**2).sum() + (s**2).sum()

    params = [p for p in mod.parameters() if p.requires_grad]
    assert finite_difference_check(fn, params, n_probe=6) <= 1e-3
