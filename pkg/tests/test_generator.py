import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_difference_check
from lanerep import generator as G
from lanerep import geomkit as gk
from lanerep.errors import ConfigurationError

SMALL = G.DiffusionConfig(denoiser_hidden=32, denoiser_layers=2, time_embed_dim=8, embed_dim=8, train_steps=10, batch_size=16)


def _curve(n=16, bend=0.3):
    x = np.linspace(0, 1, n)
    return np.c_[x, bend * x**2]


def test_alpha_bar_hand_product():
    np.testing.assert_allclose(G.alpha_bars([0.5, 0.5])[1:], [0.5, 0.25])
    betas, abar = G.beta_schedule(G.DiffusionConfig())
    assert abar[0] == 1.0 and len(abar) == 101 and len(betas) == 100
    assert np.all(np.diff(abar) < 0)
    assert betas[0] == pytest.approx(1e-4) and betas[-1] == pytest.approx(0.02)
    _, a1 = G.beta_schedule(G.DiffusionConfig(T_diff=1, t0=1))
    assert a1[1] == pytest.approx(1 - 1e-4)


def test_config_validation():
    for kw in ({"beta_start": 0.0}, {"beta_start": 0.03}, {"beta_end": 1.0}, {"t0": 101}, {"T_diff": 0}):
        with pytest.raises(ConfigurationError):
            G.DiffusionConfig(**kw).validate()


def test_canonicalize_roundtrip_and_shape():
    g = _curve() * 0.4 + 0.2
    w, frame = G.canonicalize_anchor(g)
    assert w.shape == (32,)
    np.testing.assert_allclose(G.decanonicalize(w, frame), g, atol=1e-9)
    c = w.reshape(-1, 2)
    assert np.abs(c.mean(axis=0)).max() < 1e-9
    assert gk.arc_length(c) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        G.canonicalize_anchor(np.zeros((16, 2)))


@settings(max_examples=40, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.2, 3.0), st.floats(-0.8, 0.8))
def test_congruent_anchors_match(theta, tx, ty, s, bend):
    g = _curve(bend=bend)
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    moved = s * g @ R.T + [tx, ty]
    np.testing.assert_allclose(G.canonicalize_anchor(moved)[0], G.canonicalize_anchor(g)[0], atol=1e-6)


def test_forward_diffuse_boundaries_and_moments():
    _, abar = G.beta_schedule(G.DiffusionConfig())
    w = np.linspace(-1, 1, 32)
    assert np.array_equal(G.forward_diffuse(w, 0, abar, np.ones(32)), w)
    np.testing.assert_allclose(G.forward_diffuse(w, 30, abar, np.zeros(32)), np.sqrt(abar[30]) * w)
    eps = np.random.default_rng(0).standard_normal((100_000, 32))
    x = G.forward_diffuse(w, 30, abar, eps)
    np.testing.assert_allclose(x.var(axis=0), 1 - abar[30], rtol=0.03)
    assert np.abs(x.mean(axis=0) - np.sqrt(abar[30]) * w).max() < 0.03 * np.sqrt(1 - abar[30]) * 4


def test_film_zero_conditioning():
    den = G.FiLMDenoiser(SMALL)
    x = torch.randn(3, 32)
    a = G.film_denoise_step(x, 7, torch.randn(8), den)
    b = G.film_denoise_step(x, 7, torch.randn(8) * 10, den)
    assert a.shape == (3, 32)
    assert torch.equal(a, b)
    assert G.film_denoise_step(x[0], 7, torch.zeros(8), den).shape == (32,)
    with pytest.raises(ValueError):
        G.film_denoise_step(x, 7, torch.zeros(8), None)


def test_film_layer_matches_formula():
    layer = G.FiLMLayer(4, 6, 3)
    torch.nn.init.normal_(layer.gamma.weight)
    torch.nn.init.normal_(layer.beta.weight)
    h, z = torch.randn(2, 4), torch.randn(2, 3)
    pre = torch.nn.functional.layer_norm(layer.linear(h), (6,), layer.norm.weight, layer.norm.bias)
    ref = torch.nn.functional.gelu(pre * (1 + layer.gamma(z)) + layer.beta(z))
    torch.testing.assert_close(layer(h, z), ref)


def test_denoiser_gradients_wrt_input():
    den = G.FiLMDenoiser(SMALL).double()
    for layer in den.layers:
        torch.nn.init.normal_(layer.gamma.weight, std=0.3)
    x = torch.randn(2, 32, dtype=torch.float64, requires_grad=True)
    z = torch.randn(2, 8, dtype=torch.float64)
    fn = lambda: (den(x, torch.tensor([3, 40]), z) ** 2).sum()
    assert finite_difference_check(fn, [x], n_probe=16) <= 1e-3
    assert finite_difference_check(fn, list(den.parameters()), n_probe=16) <= 1e-3


def _toy_set(n=5):
    W = np.stack([G.canonicalize_anchor(_curve(bend=b))[0] for b in np.linspace(-0.4, 0.4, n)])
    Z = np.eye(n, 8)
    return W, Z


def test_toy_overfit_and_determinism():
    W, Z = _toy_set()
    cfg = G.DiffusionConfig(denoiser_hidden=128, denoiser_layers=2, embed_dim=8, train_steps=1000, batch_size=64, seed=3)
    den, losses = G.train_denoiser(W, Z, cfg)
    assert np.mean(losses[:20]) > np.mean(losses[-50:])
    assert np.mean(losses[-50:]) < 0.05
    den2, losses2 = G.train_denoiser(W, Z, cfg)
    assert losses == losses2
    with pytest.raises(ValueError):
        G.train_denoiser(np.zeros((0, 32)), np.zeros((0, 8)), cfg)


def _spec(t_emb=None):
    return G.GenerationSpec(np.ones(8) if t_emb is None else t_emb, _curve() * 0.3 + 0.3, "leftmost", "g0")


def test_sample_identity_at_t0_zero():
    den = G.FiLMDenoiser(SMALL)
    cfg = G.DiffusionConfig(**{**G.diffusion_config_to_dict(SMALL), "t0": 0})
    spec = _spec()
    out = G.sample(spec, cfg, den, None)
    assert len(out) == 5
    for c in out:
        assert np.array_equal(c.points, spec.anchor)


def test_sample_shapes_diversity_and_frame():
    W, Z = _toy_set()
    den, _ = G.train_denoiser(W, Z, G.DiffusionConfig(**{**G.diffusion_config_to_dict(SMALL), "train_steps": 50}))
    spec = _spec()
    out = G.sample(spec, SMALL, den, None, torch.Generator().manual_seed(0))
    assert len(out) == 5 and all(c.points.shape == (16, 2) for c in out)
    P = np.stack([c.points.reshape(-1) for c in out])
    d = np.linalg.norm(P[:, None] - P[None], axis=-1)
    assert d[np.triu_indices(5, 1)].mean() > 0
    lo, hi = spec.anchor.min(0), spec.anchor.max(0)
    pad = 0.25 * (hi - lo)
    for c in out:
        m = c.points.mean(0)
        assert np.all(m >= lo - pad) and np.all(m <= hi + pad)
    again = G.sample(spec, SMALL, den, None, torch.Generator().manual_seed(0))
    assert all(np.array_equal(a.points, b.points) for a, b in zip(out, again))


def test_zero_film_sampler_ignores_target():
    den = G.FiLMDenoiser(SMALL)
    a = G.sample(_spec(np.ones(8)), SMALL, den, None, torch.Generator().manual_seed(1))
    b = G.sample(_spec(-3 * np.ones(8)), SMALL, den, None, torch.Generator().manual_seed(1))
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a, b))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        G.GenerationSpec(np.ones(8), _curve(), "interior", "g").validate()
    with pytest.raises(ValueError):
        G.GenerationSpec(np.full(8, np.nan), _curve(), "merge", "g").validate()
    with pytest.raises(ValueError):
        G.GenerationSpec(np.ones(8), _curve(8), "merge", "g").validate()


def test_specs_and_export(tiny_dataset, tmp_path):
    from lanerep.encoder import EncoderConfig, LaneEncoder

    recs = tiny_dataset.records
    enc = LaneEncoder(EncoderConfig(seed=0))
    Z = np.random.default_rng(0).standard_normal((len(recs), 128))
    specs, skipped = G.build_specs(recs, Z)
    groups = {r.group_id for r in recs}
    assert len(specs) + skipped == 3 * len(groups)
    for s in specs:
        ref = next(r for r in recs if r.lane_id == s.reference_id)
        assert ref.role_class == s.spec_role
        assert ref.camera_id != next(r for r in recs if r.group_id == s.group_id).camera_id
    W, Zt = G.training_pairs(recs, Z)
    cfg = G.DiffusionConfig(denoiser_hidden=32, denoiser_layers=2, train_steps=20, n_candidates=2)
    den, _ = G.train_denoiser(W, Zt, cfg)
    cands = G.generate_all(specs[:3], cfg, den, enc, 1.0)
    assert len(cands) == 6
    scores = [c.score for c in cands[:2]]
    assert scores[0] >= scores[1]
    G.export_candidates(cands, tmp_path)
    lines = (tmp_path / "candidates.jsonl").read_text().splitlines()
    assert len(lines) == 6
    assert (tmp_path / "candidates.bin").stat().st_size > 0
