"""Three-stream lane encoder.

Geometry and trajectory polylines share one stream design (per-point linear
lift, fixed sinusoidal position code, a small post-norm transformer, token
mean-pool, batch norm); the fused descriptor goes through a two-layer
perceptron. Per-window embeddings are fused from the three streams, pooled
over valid windows, and then mixed across the lanes of a group by attention
with a learned per-head bias from pairwise behavior features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError

STREAMS = ("geometry", "trajectory", "descriptor")


@dataclass(frozen=True)
class EncoderConfig:
    K: int = 16
    stream_dim: int = 64
    embed_dim: int = 128
    fusion_hidden: int = 256
    transformer_layers: int = 2
    attention_heads: int = 4
    ff_dim: int = 128
    dropout_rate: float = 0.1
    geometry_dropout_p: float = 0.3
    projection_dim: int = 64
    seed: int = 0
    # active input streams; ablations switch some off
    streams: tuple[str, ...] = STREAMS
    pairwise: bool = True

    def validate(self):
        if not 0.0 <= self.geometry_dropout_p < 1.0:
            raise ConfigurationError("geometry_dropout_p must lie in [0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.stream_dim % self.attention_heads or self.embed_dim % self.attention_heads:
            raise ConfigurationError("attention_heads must divide stream_dim and embed_dim")
        unknown = set(self.streams) - set(STREAMS)
        if unknown or not self.streams:
            raise ConfigurationError(f"bad streams {self.streams!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["streams"] = list(self.streams)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        d = dict(d)
        if "streams" in d:
            d["streams"] = tuple(d["streams"])
        return cls(**d)


class StreamNorm(nn.BatchNorm1d):
    """Batch norm that uses running statistics whenever the batch has one row."""

    def forward(self, x):
        if self.training and x.shape[0] > 1:
            return super().forward(x)
        return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias, False, 0.0, self.eps)


def sinusoidal_table(n: int, dim: int, base: float = 10000.0) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    ang = pos / base ** (i / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(ang)
    pe[:, 1::2] = torch.cos(ang)
    return pe.float()


class PolylineStream(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.lift = nn.Linear(2, cfg.stream_dim)
        self.register_buffer("pe", sinusoidal_table(cfg.K, cfg.stream_dim))
        layer = nn.TransformerEncoderLayer(
            cfg.stream_dim,
            cfg.attention_heads,
            cfg.ff_dim,
            cfg.dropout_rate,
            activation="gelu",
            batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, cfg.transformer_layers, enable_nested_tensor=False)
        self.norm = StreamNorm(cfg.stream_dim)

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Token mean of the transformer output, before normalization."""
        h = self.lift(x) + self.pe.to(x.dtype)
        return self.transformer(h).mean(dim=1)

    def forward(self, x):
        return self.norm(self.pooled(x))


class DescriptorStream(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_in: int = 9):
        super().__init__()
        # fixed input standardization, fitted on training descriptors
        self.register_buffer("in_mean", torch.zeros(n_in))
        self.register_buffer("in_std", torch.ones(n_in))
        self.net = nn.Sequential(nn.Linear(n_in, cfg.stream_dim), nn.GELU(), nn.Linear(cfg.stream_dim, cfg.stream_dim))
        self.norm = StreamNorm(cfg.stream_dim)

    def forward(self, x):
        x = (x - self.in_mean.to(x.dtype)) / self.in_std.to(x.dtype)
        return self.norm(F.gelu(self.net(x)))


class Fusion(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.up = nn.Linear(3 * cfg.stream_dim, cfg.fusion_hidden)
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.down = nn.Linear(cfg.fusion_hidden, cfg.embed_dim)

    def forward(self, f_g, f_x, f_s):
        h = torch.cat([f_g, f_x, f_s], dim=-1)
        return self.down(self.drop(F.gelu(self.up(h))))


class PairBiasAttention(nn.Module):
    """Masked multi-head self-attention over the lanes of each group.

    ``z`` is ``(G, S, D)``, ``phi`` is ``(G, S, S, 3)`` and ``pad`` marks padded
    slots. Padded slots never act as keys and their output rows are zero.
    """

    def __init__(self, dim: int, heads: int, n_pair: int = 3):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.bias = nn.Linear(n_pair, heads)
        nn.init.zeros_(self.bias.weight)
        nn.init.zeros_(self.bias.bias)
        self.norm = nn.LayerNorm(dim)

    def forward(self, z, phi, pad):
        G, S, D = z.shape
        if bool(pad.all(dim=1).any()):
            raise ValueError("group with no real lanes")
        H = self.heads
        q, k, v = self.qkv(z).view(G, S, 3, H, D // H).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(D // H)
        logits = logits + self.bias(phi).permute(0, 3, 1, 2)
        logits = logits.masked_fill(pad[:, None, None, :], float("-inf"))
        att = torch.softmax(logits, dim=-1)
        o = (att @ v).transpose(1, 2).reshape(G, S, D)
        out = self.norm(z + self.out(o))
        return out.masked_fill(pad[..., None], 0.0)


class ProjectionHead(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cfg.embed_dim, cfg.embed_dim), nn.GELU(), nn.Linear(cfg.embed_dim, cfg.projection_dim))

    def forward(self, z):
        h = self.net(z)
        return h / (h.norm(dim=-1, keepdim=True) + 1e-12)


class RoleHeads(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.rank = nn.Sequential(nn.Linear(cfg.embed_dim, 32), nn.GELU(), nn.Linear(32, 1))
        self.edge = nn.Linear(cfg.embed_dim, 2)
        self.size = nn.Linear(cfg.embed_dim, 1)

    def forward(self, z):
        return self.rank(z).squeeze(-1), self.edge(z), self.size(z).squeeze(-1)


def apply_geometry_dropout(f_g, p: float, training: bool, rng: torch.Generator | None = None, absent=False):
    """Lane-level inverted dropout of the geometry embedding.

    ``f_g`` is ``(..., C)``; one keep/drop draw per leading index. ``absent``
    (bool or per-row bool tensor) zeroes rows regardless of mode.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigurationError("geometry dropout p must lie in [0, 1)")
    out = f_g
    if training and p > 0:
        keep = torch.rand(f_g.shape[:-1], generator=rng, dtype=torch.float64) >= p
        out = out * keep.to(f_g.dtype)[..., None] / (1.0 - p)
    if isinstance(absent, torch.Tensor):
        out = out.masked_fill(absent.bool()[..., None], 0.0)
    elif absent:
        out = torch.zeros_like(out)
    return out


def pairwise_features(lane_stats: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """``[d_lateral, d_speed, density_ratio]`` for every ordered lane pair.

    ``lane_stats`` is ``(..., n, 4)`` in window-stat order
    (speed, curvature, lateral offset, count); returns ``(..., n, n, 3)``.
    """
    spd = lane_stats[..., 0]
    lat = lane_stats[..., 2]
    cnt = lane_stats[..., 3]
    d_lat = lat[..., :, None] - lat[..., None, :]
    d_spd = spd[..., :, None] - spd[..., None, :]
    rho = (cnt[..., :, None] / (cnt[..., None, :] + eps)).clamp(-10.0, 10.0)
    return torch.stack([d_lat, d_spd, rho], dim=-1)


@dataclass
class EncoderOutput:
    per_window: torch.Tensor
    window_valid: torch.Tensor
    pooled: torch.Tensor
    has_valid: torch.Tensor
    attended: torch.Tensor
    projection: torch.Tensor
    rank_logit: torch.Tensor
    edge_logits: torch.Tensor
    size_logit: torch.Tensor
    extras: dict = field(default_factory=dict)


class LaneEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        cfg.validate()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.geometry = PolylineStream(cfg)
        self.trajectory = PolylineStream(cfg)
        self.descriptor = DescriptorStream(cfg)
        self.fusion = Fusion(cfg)
        self.attention = PairBiasAttention(cfg.embed_dim, cfg.attention_heads)
        self.projection = ProjectionHead(cfg)
        self.roles = RoleHeads(cfg)
        # standardization of lane stats before pairwise differences
        self.register_buffer("stat_mean", torch.zeros(4))
        self.register_buffer("stat_std", torch.ones(4))

    def fit_input_scaling(self, descriptors: np.ndarray) -> None:
        """Set fixed descriptor and stat standardization from training rows ``(n, 9)``."""
        d = np.asarray(descriptors, np.float64)
        mean = d.mean(axis=0)
        std = d.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        # binary role flags stay on their native scale
        mean[4:], std[4:] = 0.0, 1.0
        self.descriptor.in_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.descriptor.in_std.copy_(torch.as_tensor(std, dtype=torch.float32))
        self.stat_mean.copy_(torch.as_tensor(mean[:4], dtype=torch.float32))
        self.stat_std.copy_(torch.as_tensor(std[:4], dtype=torch.float32))

    def _check(self, x, name):
        if not bool(torch.isfinite(x).all()):
            raise ValueError(f"non-finite {name} input")

    def encode_geometry(self, g: torch.Tensor) -> torch.Tensor:
        squeeze = g.dim() == 2
        g = g[None] if squeeze else g
        self._check(g, "geometry")
        out = self.geometry(g)
        return out[0] if squeeze else out

    def encode_trajectories(self, T: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Masked mean of per-tracklet encodings, ``(R, N, K, 2)`` -> ``(R, C)``.

        Only valid slots are encoded; rows without any valid slot get zeros
        and are left out of the batch statistics.
        """
        squeeze = T.dim() == 3
        if squeeze:
            T, mask = T[None], mask[None]
        if T.shape[:2] != mask.shape or T.shape[-2:] != (self.cfg.K, 2):
            raise ValueError(f"trajectory shape {tuple(T.shape)} does not match mask {tuple(mask.shape)}")
        mask = mask.bool()
        R = T.shape[0]
        C = self.cfg.stream_dim
        rows, _ = mask.nonzero(as_tuple=True)
        out = T.new_zeros(R, C)
        if len(rows):
            enc = self.trajectory.pooled(T[mask])
            sums = T.new_zeros(R, C).index_add(0, rows, enc)
            cnt = mask.sum(dim=1)
            has = cnt > 0
            mean = sums[has] / cnt[has, None].to(T.dtype)
            out = out.index_put((has.nonzero(as_tuple=True)[0],), self.trajectory.norm(mean))
        return out[0] if squeeze else out

    def encode_descriptor(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 1
        x = x[None] if squeeze else x
        if x.shape[-1] != 9:
            raise ValueError(f"descriptor must have 9 entries, got {x.shape[-1]}")
        self._check(x, "descriptor")
        out = self.descriptor(x)
        return out[0] if squeeze else out

    def fuse(self, f_g, f_x, f_s):
        return self.fusion(f_g, f_x, f_s)

    @staticmethod
    def pool_lane(per_window: torch.Tensor, valid: torch.Tensor):
        """Mean over valid windows; returns ``(pooled, has_valid)``."""
        v = valid.to(per_window.dtype)
        n = v.sum(dim=-1)
        masked = torch.where(valid[..., None].bool(), per_window, torch.zeros_like(per_window))
        pooled = masked.sum(dim=-2) / n.clamp(min=1.0)[..., None]
        return pooled, n > 0

    def cross_lane_attention(self, z, phi, pad):
        squeeze = z.dim() == 2
        if squeeze:
            z, phi, pad = z[None], phi[None], pad[None]
        out = self.attention(z, phi, pad.bool())
        return out[0] if squeeze else out

    def project(self, z):
        return self.projection(z)

    def role_heads(self, z):
        return self.roles(z)

    def group_context(self, pooled, lane_stats, group_slots):
        """Attention over groups packed by ``group_slots`` ``(G, S)`` (-1 pads)."""
        pad = group_slots < 0
        idx = group_slots.clamp(min=0)
        zg = pooled[idx].masked_fill(pad[..., None], 0.0)
        stats = (lane_stats - self.stat_mean.to(lane_stats.dtype)) / self.stat_std.to(lane_stats.dtype)
        # density ratio uses raw normalized counts
        stats = torch.cat([stats[:, :3], lane_stats[:, 3:]], dim=1)
        phi = pairwise_features(stats[idx])
        if not self.cfg.pairwise:
            phi = torch.zeros_like(phi)
        phi = phi.masked_fill(pad[:, None, :, None] | pad[:, :, None, None], 0.0)
        out = self.cross_lane_attention(zg, phi, pad)
        attended = torch.zeros_like(pooled)
        real = ~pad
        return attended.index_put((group_slots[real],), out[real])

    def forward(self, batch, geometry_absent=None, rng: torch.Generator | None = None) -> EncoderOutput:
        """Encode a collated batch (with or without a window axis)."""
        cfg = self.cfg
        traj, mask, desc, wvalid = batch.trajectories, batch.mask, batch.descriptor, batch.window_valid
        if traj.dim() == 4:
            traj, mask, desc, wvalid = traj[:, None], mask[:, None], desc[:, None], wvalid[:, None]
        B, W = wvalid.shape
        dev_dtype = batch.geometry.dtype

        if "geometry" in cfg.streams:
            f_g = self.encode_geometry(batch.geometry)
            absent = geometry_absent if geometry_absent is not None else False
            f_g = apply_geometry_dropout(f_g, cfg.geometry_dropout_p, self.training, rng, absent=absent)
        else:
            f_g = batch.geometry.new_zeros(B, cfg.stream_dim)

        wvalid = wvalid.bool() & mask.any(dim=-1)
        ib, iw = wvalid.nonzero(as_tuple=True)
        # inactive streams are skipped outright; their embedding is zero
        C = cfg.stream_dim
        if "trajectory" in cfg.streams:
            f_x = self.encode_trajectories(traj[ib, iw], mask[ib, iw])
        else:
            f_x = traj.new_zeros(len(ib), C)
        rows = desc[ib, iw]
        if "descriptor" in cfg.streams and len(rows):
            f_s = self.encode_descriptor(rows)
        else:
            f_s = rows.new_zeros(len(rows), C)
        z_rows = self.fuse(f_g[ib], f_x, f_s)
        per_window = torch.zeros(B, W, cfg.embed_dim, dtype=dev_dtype).index_put((ib, iw), z_rows)
        pooled, has_valid = self.pool_lane(per_window, wvalid)
        attended = self.group_context(pooled, batch.lane_stats, batch.group_slots)
        proj = self.project(attended)
        rank, edge, size = self.role_heads(pooled)
        return EncoderOutput(per_window, wvalid, pooled, has_valid, attended, proj, rank, edge, size)

    @torch.no_grad()
    def embed(self, batch, geometry_absent=None) -> EncoderOutput:
        was = self.training
        self.eval()
        try:
            return self.forward(batch, geometry_absent=geometry_absent)
        finally:
            self.train(was)
