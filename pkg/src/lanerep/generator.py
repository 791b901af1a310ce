"""Warm-start diffusion over lane centerlines, conditioned on a lane embedding.

Geometries live in the canonical frame of their group anchor (the group-mean
centerline): centroid at the origin, travel direction along +x, unit arc
length. Sampling noises the anchor to step ``t0`` and denoises it back under
FiLM conditioning on a target embedding, so a candidate keeps the anchor's
placement while moving toward the lateral slot the embedding describes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dataset as D
from . import geomkit as gk
from .arrayio import ArrayWriter, write_jsonl
from .errors import ConfigurationError

SPEC_ROLES = ("leftmost", "rightmost", "merge")


@dataclass(frozen=True)
class DiffusionConfig:
    T_diff: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t0: int = 30
    denoiser_hidden: int = 256
    denoiser_layers: int = 4
    time_embed_dim: int = 32
    n_candidates: int = 5
    seed: int = 0
    train_steps: int = 3000
    batch_size: int = 128
    learning_rate: float = 1e-3
    embed_dim: int = 128

    def validate(self):
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigurationError("need 0 < beta_start <= beta_end < 1")
        if self.T_diff < 1:
            raise ConfigurationError("T_diff must be >= 1")
        if not 0 <= self.t0 <= self.T_diff:
            raise ConfigurationError("t0 must lie in [0, T_diff]")
        if self.n_candidates < 1 or self.train_steps < 1:
            raise ConfigurationError("n_candidates and train_steps must be >= 1")


def alpha_bars(betas) -> np.ndarray:
    """Cumulative products with the ``t = 0`` entry fixed at 1, length ``T + 1``."""
    b = np.asarray(betas, np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - b)])


def beta_schedule(cfg: DiffusionConfig):
    """``(betas[1..T], alpha_bar[0..T])``; index 0 of ``betas`` is step 1."""
    cfg.validate()
    betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.T_diff)
    return betas, alpha_bars(betas)


@dataclass(frozen=True)
class Frame:
    centroid: tuple[float, float]
    rotation: tuple[tuple[float, float], tuple[float, float]]
    scale: float

    def to_canonical(self, pts) -> np.ndarray:
        R = np.asarray(self.rotation)
        return (gk.as_points(pts) - np.asarray(self.centroid)) @ R.T / self.scale

    def from_canonical(self, pts) -> np.ndarray:
        R = np.asarray(self.rotation)
        return np.asarray(pts, np.float64) * self.scale @ R + np.asarray(self.centroid)


def anchor_frame(g) -> Frame:
    g = gk.as_points(g)
    L = gk.arc_length(g)
    if L < 1e-9:
        raise ValueError("degenerate anchor: zero arc length")
    c = g.mean(axis=0)
    _, _, vt = np.linalg.svd(g - c, full_matrices=False)
    axis = vt[0]
    # principal axis points along travel
    if axis @ (g[-1] - g[0]) < 0:
        axis = -axis
    R = np.array([[axis[0], axis[1]], [-axis[1], axis[0]]])
    return Frame((float(c[0]), float(c[1])), tuple(map(tuple, R.tolist())), float(L))


def canonicalize_anchor(g, frame: Frame | None = None):
    """``(w, frame)``: 32-dim row-major canonical geometry and its frame."""
    frame = frame or anchor_frame(g)
    return frame.to_canonical(g).reshape(-1), frame


def decanonicalize(w, frame: Frame) -> np.ndarray:
    return frame.from_canonical(np.asarray(w, np.float64).reshape(-1, 2))


def forward_diffuse(w, t0: int, abar, noise):
    """Closed-form forward marginal at step ``t0`` (``abar`` indexed from 0)."""
    a = float(abar[t0])
    if torch.is_tensor(w):
        return math.sqrt(a) * w + math.sqrt(1.0 - a) * noise
    return math.sqrt(a) * np.asarray(w) + math.sqrt(1.0 - a) * np.asarray(noise)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class FiLMLayer(nn.Module):
    def __init__(self, d_in: int, hidden: int, cond_dim: int):
        super().__init__()
        self.linear = nn.Linear(d_in, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.gamma = nn.Linear(cond_dim, hidden)
        self.beta = nn.Linear(cond_dim, hidden)
        # zero init: the layer starts unconditioned
        for m in (self.gamma, self.beta):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, h, z):
        return F.gelu(self.norm(self.linear(h)) * (1.0 + self.gamma(z)) + self.beta(z))


class FiLMDenoiser(nn.Module):
    """Noise predictor ``(x_t, t, z) -> eps`` for 32-dim canonical geometries."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        dims = [32 + cfg.time_embed_dim] + [cfg.denoiser_hidden] * cfg.denoiser_layers
        self.layers = nn.ModuleList(FiLMLayer(a, b, cfg.embed_dim) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(cfg.denoiser_hidden, 32)
        # fixed conditioning standardization, fitted on training embeddings
        self.register_buffer("z_mean", torch.zeros(cfg.embed_dim))
        self.register_buffer("z_std", torch.ones(cfg.embed_dim))

    def fit_conditioning(self, Z) -> None:
        Z = torch.as_tensor(np.asarray(Z, np.float64))
        sd = Z.std(dim=0, unbiased=False)
        self.z_mean.copy_(Z.mean(dim=0).float())
        self.z_std.copy_(torch.where(sd > 1e-8, sd, torch.ones_like(sd)).float())

    def forward(self, x, t, z):
        z = (z - self.z_mean.to(z.dtype)) / self.z_std.to(z.dtype)
        t = torch.as_tensor(t).reshape(-1).expand(len(x))
        h = torch.cat([x, timestep_embedding(t, self.cfg.time_embed_dim).to(x.dtype)], dim=1)
        for layer in self.layers:
            h = layer(h, z)
        return self.out(h)


def film_denoise_step(x_t, t: int, z, denoiser: FiLMDenoiser | None):
    if denoiser is None:
        raise ValueError("no trained denoiser")
    single = x_t.dim() == 1
    x = x_t[None] if single else x_t
    zz = z[None] if z.dim() == 1 else z
    eps = denoiser(x, torch.full((len(x),), int(t)), zz)
    return eps[0] if single else eps


# training data


def group_anchor(records) -> np.ndarray:
    """Point-wise mean of the group's resampled centerlines."""
    return np.mean([r.geometry for r in records], axis=0)


def group_frames(records) -> dict[str, Frame]:
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.group_id, []).append(r)
    return {g: anchor_frame(group_anchor(rs)) for g, rs in sorted(groups.items())}


def training_pairs(records, embeddings) -> tuple[np.ndarray, np.ndarray]:
    """Each lane in its group-anchor frame, paired with its own embedding."""
    frames = group_frames(records)
    W = np.stack([canonicalize_anchor(r.geometry, frames[r.group_id])[0] for r in records])
    return W, np.asarray(embeddings, np.float64)


def train_denoiser(geometries, embeddings, cfg: DiffusionConfig, log=None) -> tuple[FiLMDenoiser, list[float]]:
    """Noise-prediction training; ``geometries`` are canonical ``(n, 32)`` rows."""
    cfg.validate()
    W = torch.as_tensor(np.asarray(geometries, np.float32))
    Z = torch.as_tensor(np.asarray(embeddings, np.float32))
    if len(W) == 0:
        raise ValueError("no training geometries")
    _, abar = beta_schedule(cfg)
    abar_t = torch.as_tensor(abar, dtype=torch.float32)
    model = FiLMDenoiser(cfg)
    model.fit_conditioning(Z)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.train_steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    losses = []
    for step in range(cfg.train_steps):
        idx = torch.randint(len(W), (cfg.batch_size,), generator=gen)
        t = torch.randint(1, cfg.T_diff + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(cfg.batch_size, 32, generator=gen)
        a = abar_t[t][:, None]
        x = a.sqrt() * W[idx] + (1 - a).sqrt() * eps
        loss = F.mse_loss(model(x, t, Z[idx]), eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss.detach()))
        if log is not None and (step + 1) % 500 == 0:
            log({"step": step + 1, "loss": float(np.mean(losses[-500:]))})
    model.eval()
    return model, losses


# sampling


@dataclass
class Candidate:
    spec_role: str
    group_id: str
    points: np.ndarray
    score: float
    smooth: float = 0.0
    outlier: bool = False
    reference_id: str = ""


@dataclass
class GenerationSpec:
    target_embedding: np.ndarray
    anchor: np.ndarray
    spec_role: str
    group_id: str
    descriptor: np.ndarray | None = None
    reference_id: str = ""

    def validate(self):
        if self.spec_role not in SPEC_ROLES:
            raise ConfigurationError(f"unknown spec role {self.spec_role!r}")
        if not np.all(np.isfinite(self.target_embedding)):
            raise ValueError("target embedding is not finite")
        if np.asarray(self.anchor).shape != (16, 2):
            raise ValueError("anchor must be 16x2")


def reverse_diffuse(x, t0: int, z, denoiser, betas, abar, gen: torch.Generator):
    """Ancestral reverse steps ``t0 -> 1``; no noise is added at the last step."""
    with torch.no_grad():
        for t in range(t0, 0, -1):
            b = float(betas[t - 1])
            eps = denoiser(x, torch.full((len(x),), t), z)
            mean = (x - b / math.sqrt(1.0 - abar[t]) * eps) / math.sqrt(1.0 - b)
            if t > 1:
                var = (1.0 - abar[t - 1]) / (1.0 - abar[t]) * b
                x = mean + math.sqrt(var) * torch.randn(x.shape, generator=gen, dtype=x.dtype)
            else:
                x = mean
    return x


def reencode(encoder, geometries, descriptor) -> np.ndarray:
    """Lane embedding of bare geometries: no tracklets, the given descriptor."""
    with torch.no_grad():
        encoder.eval()
        g = torch.as_tensor(np.asarray(geometries, np.float32))
        f_g = encoder.encode_geometry(g) if "geometry" in encoder.cfg.streams else g.new_zeros(len(g), encoder.cfg.stream_dim)
        f_x = g.new_zeros(len(g), encoder.cfg.stream_dim)
        d = torch.as_tensor(np.asarray(descriptor, np.float32)).expand(len(g), 9)
        f_s = encoder.encode_descriptor(d) if "descriptor" in encoder.cfg.streams else f_x
        return encoder.fuse(f_g, f_x, f_s).numpy().astype(np.float64)


def _cosine(a, b) -> np.ndarray:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return (a @ b) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b) + 1e-12)


def sample(spec: GenerationSpec, cfg: DiffusionConfig, denoiser, encoder, gen: torch.Generator | None = None) -> list[Candidate]:
    """``n_candidates`` geometries ranked by re-encoded cosine to the target."""
    spec.validate()
    cfg.validate()
    if denoiser is None:
        raise ValueError("no trained denoiser")
    gen = gen or torch.Generator().manual_seed(cfg.seed)
    betas, abar = beta_schedule(cfg)
    w, frame = canonicalize_anchor(spec.anchor)
    z = torch.as_tensor(np.asarray(spec.target_embedding, np.float32)).expand(cfg.n_candidates, -1)
    w0 = torch.as_tensor(w, dtype=torch.float32).expand(cfg.n_candidates, -1)

    def draw(n):
        eps = torch.randn(n, 32, generator=gen)
        x = forward_diffuse(w0[:n], cfg.t0, abar, eps)
        return reverse_diffuse(x, cfg.t0, z[:n], denoiser, betas, abar, gen).numpy().astype(np.float64)

    X = draw(cfg.n_candidates)
    bad = ~np.all(np.isfinite(X), axis=1)
    if bad.any():
        X[bad] = draw(int(bad.sum()))
        if not np.all(np.isfinite(X)):
            raise FloatingPointError("sampler produced non-finite geometry twice")
    if cfg.t0 == 0:
        pts = [np.asarray(spec.anchor, np.float64).copy() for _ in X]
    else:
        pts = [gk.resample_arclength(decanonicalize(x, frame), 16) for x in X]
    desc = np.zeros(9) if spec.descriptor is None else spec.descriptor
    emb = reencode(encoder, pts, desc) if encoder is not None else np.zeros((len(pts), len(spec.target_embedding)))
    scores = [float(_cosine(e, spec.target_embedding)) for e in emb]
    cands = [Candidate(spec.spec_role, spec.group_id, p, s, reference_id=spec.reference_id) for p, s in zip(pts, scores)]
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].score, i))
    return [cands[i] for i in order]


def reference_for(record_role: str, group_records, all_records, exclude_camera: str):
    """Deterministic same-role lane from another camera, preferring an equal-size group."""
    pool = [r for r in all_records if r.role_class == record_role and r.camera_id != exclude_camera]
    if not pool:
        return None
    target = next((r for r in group_records if r.role_class == record_role), None)
    rank = target.lateral_rank if target is not None else 0.5
    # cycle through cameras so groups do not all share one reference
    cams = sorted({r.camera_id for r in all_records})
    start = cams.index(exclude_camera)
    order = {c: (i - start) % len(cams) for i, c in enumerate(cams)}
    size = len(group_records)
    return min(pool, key=lambda r: (r.group_size != size, order[r.camera_id], abs(r.lateral_rank - rank), r.lane_id))


def build_specs(records, embeddings, roles=SPEC_ROLES):
    """One spec per (group, role) with a real lane of that role; returns ``(specs, skipped)``."""
    by_id = {r.lane_id: i for i, r in enumerate(records)}
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.group_id, []).append(r)
    specs, skipped = [], 0
    for gid, lanes in sorted(groups.items()):
        for role in roles:
            if not any(r.role_class == role for r in lanes):
                skipped += 1
                continue
            ref = reference_for(role, lanes, records, lanes[0].camera_id)
            if ref is None:
                skipped += 1
                continue
            desc = D.fused_descriptor(ref.lane_stats, ref.role_vector)
            specs.append(GenerationSpec(np.asarray(embeddings[by_id[ref.lane_id]]), group_anchor(lanes), role, gid, desc, ref.lane_id))
    return specs, skipped


def generate_all(specs, cfg: DiffusionConfig, denoiser, encoder, smooth_threshold: float) -> list[Candidate]:
    out = []
    for k, spec in enumerate(specs):
        gen = torch.Generator().manual_seed(cfg.seed * 100003 + k)
        for c in sample(spec, cfg, denoiser, encoder, gen):
            c.smooth = gk.curvature_smoothness(c.points)
            c.outlier = bool(c.smooth > smooth_threshold)
            out.append(c)
    return out


def export_candidates(cands, root) -> None:
    """``candidates.bin`` (16x2 float32 arrays) plus ``candidates.jsonl`` records."""
    from pathlib import Path

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    with ArrayWriter(root / "candidates.bin") as wr:
        for c in cands:
            rows.append({
                "spec_role": c.spec_role,
                "group_id": c.group_id,
                "reference_id": c.reference_id,
                "offset": wr.write(c.points),
                "score": round(float(c.score), 6),
                "smoothness": round(float(c.smooth), 9),
                "outlier": bool(c.outlier),
            })
    write_jsonl(rows, root / "candidates.jsonl")


def diffusion_config_to_dict(cfg: DiffusionConfig) -> dict:
    return asdict(cfg)
