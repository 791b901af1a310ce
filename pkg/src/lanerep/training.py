"""Losses, the phase schedule and the training regimes.

Each optimization step draws a mini-batch of whole cameras so that mined
cross-camera positives and same-group neighbors are both present. Epochs are
deterministic functions of ``(seed, epoch)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import anomaly as A
from . import dataset as D
from .checkpoint import load_into, read_checkpoint, save_checkpoint, state_hash
from .encoder import STREAMS, EncoderConfig, LaneEncoder
from .errors import ConfigurationError

REGIMES = ("joint", "two_stage_frozen", "contrastive_only", "geometry_only", "trajectory_only", "traj_stats_baseline")
CURVE_COLUMNS = ("epoch", "pos_sim", "neg_sim", "anomaly_acc", "l_ctr", "l_role", "l_group", "l_temp", "w_ctr", "w_role")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.07
    group_consistency_weight: float = 1.0

    def validate(self):
        if min(self.alpha, self.beta, self.group_consistency_weight) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ConfigurationError("tau must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    cameras_per_batch: int = 4
    max_slots: int = 6
    corruption_fraction: float = 0.2
    val_corruption_probability: float = 0.15
    train_windows: tuple[int, ...] = tuple(range(8))
    val_windows: tuple[int, ...] = (8, 9)
    checkpoint_every: int = 0
    # cosine-annealed learning rate ends at this fraction of the initial one
    lr_final_fraction: float = 0.05
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if self.epochs <= 0:
            raise ConfigurationError("epochs must be > 0")
        if self.cameras_per_batch < 2:
            raise ConfigurationError("cameras_per_batch must be >= 2 for cross-camera positives")
        if not 0.0 <= self.corruption_fraction <= 1.0:
            raise ConfigurationError("corruption_fraction must lie in [0, 1]")
        if not 0.0 < self.lr_final_fraction <= 1.0:
            raise ConfigurationError("lr_final_fraction must lie in (0, 1]")
        self.weights.validate()


def regime_encoder_config(base: EncoderConfig, regime: str) -> EncoderConfig:
    if regime not in REGIMES or regime == "traj_stats_baseline":
        raise ConfigurationError(f"regime {regime!r} has no encoder")
    if regime == "geometry_only":
        # dropping the only active stream would leave nothing to encode
        return replace(base, streams=("geometry",), pairwise=False, geometry_dropout_p=0.0)
    if regime == "trajectory_only":
        return replace(base, streams=("trajectory",))
    return replace(base, streams=STREAMS)


def uses_temporal(regime: str) -> bool:
    return regime == "joint"


# losses


def info_nce(projections: torch.Tensor, positive_index, tau: float) -> torch.Tensor:
    """In-batch InfoNCE; anchors with ``positive_index < 0`` are left out."""
    pos = torch.as_tensor(positive_index, dtype=torch.long)
    keep = pos >= 0
    n_missing = int((~keep).sum())
    if n_missing:
        warnings.warn(f"{n_missing} anchors without a positive were excluded", stacklevel=2)
    if not bool(keep.any()):
        return projections.sum() * 0.0
    sim = projections @ projections.T / tau
    eye = torch.eye(len(sim), dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    rows = keep.nonzero(as_tuple=True)[0]
    logp = sim[rows].log_softmax(dim=1)
    return -logp[torch.arange(len(rows)), pos[rows]].mean()


def role_loss(rank_logit, edge_logits, size_logit, targets: torch.Tensor):
    """``(L_rank, L_edge, L_size, combined)`` with targets taken from role vectors ``(B, 5)``."""
    t = torch.as_tensor(targets, dtype=rank_logit.dtype)
    if bool(((t < 0) | (t > 1)).any()):
        raise ValueError("role targets must lie in [0, 1]")
    l_rank = F.binary_cross_entropy_with_logits(rank_logit, t[:, 0])
    l_edge = F.binary_cross_entropy_with_logits(edge_logits, t[:, 1:3])
    l_size = F.binary_cross_entropy_with_logits(size_logit, t[:, 4])
    return l_rank, l_edge, l_size, l_rank + l_edge + 0.5 * l_size


def group_consistency_loss(rank_logits: torch.Tensor, group_index) -> torch.Tensor:
    g = torch.as_tensor(group_index, dtype=torch.long)
    terms = []
    for k in torch.unique(g):
        x = rank_logits[g == k]
        n = len(x)
        if n < 2:
            continue
        grid = torch.linspace(0.0, 1.0, n, dtype=x.dtype)
        terms.append(((torch.sort(torch.sigmoid(x)).values - grid) ** 2).sum())
    if not terms:
        return rank_logits.sum() * 0.0
    return torch.stack(terms).mean()


def phase_weights(epoch: int, total: int) -> tuple[float, float]:
    if total <= 0:
        raise ValueError("total epochs must be > 0")
    r = epoch / total
    if r < 0.3:
        return 0.3, 2.0
    if r < 0.7:
        return 1.0, 1.0
    return 2.0, 0.5


def temporal_loss(logits, labels, validity) -> torch.Tensor:
    v = torch.as_tensor(validity).to(logits.dtype)
    y = torch.as_tensor(labels).to(logits.dtype)
    total = v.sum()
    if float(total) == 0.0:
        warnings.warn("temporal loss over zero valid windows", stacklevel=2)
        return logits.sum() * 0.0
    safe = torch.where(v > 0, logits, torch.zeros_like(logits))
    bce = F.binary_cross_entropy_with_logits(safe, y, reduction="none")
    return (bce * v).sum() / total


# batches


def positive_map(records) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {r.lane_id: [] for r in records}
    for a, b in sorted(D.mine_positive_pairs(records)):
        out[a].append(b)
        out[b].append(a)
    return out


def choose_positives(lane_ids, usable, pos_map, rng) -> np.ndarray:
    """One in-batch positive per anchor (-1 when none is present)."""
    where = {lid: i for i, lid in enumerate(lane_ids) if usable[i]}
    out = np.full(len(lane_ids), -1, np.int64)
    for i, lid in enumerate(lane_ids):
        if not usable[i]:
            continue
        cand = [where[p] for p in pos_map.get(lid, []) if p in where]
        if cand:
            out[i] = cand[int(rng.integers(len(cand)))]
    return out


def camera_batches(records, cameras_per_batch: int, rng):
    cams = sorted({r.camera_id for r in records})
    order = [cams[i] for i in rng.permutation(len(cams))]
    n_batches = max(1, math.ceil(len(order) / cameras_per_batch))
    # near-equal chunks so no batch is a lone camera
    for chunk in np.array_split(np.array(order, dtype=object), n_batches):
        sel = set(chunk.tolist())
        yield [r for r in records if r.camera_id in sel]


@dataclass
class TrainState:
    encoder: LaneEncoder
    detector: A.AnomalyDetector
    optimizer: torch.optim.Optimizer | None
    regime: str
    config: TrainConfig
    epoch: int = 0
    stage: int = 1
    curves: list[dict] = field(default_factory=list)
    frozen_hash: str | None = None


def compute_losses(out, records, batch, pos_index, weights: LossWeights, w_ctr, w_role, temporal=None) -> dict:
    """Loss terms and total for one forward pass.

    ``temporal`` is ``(logits, labels, validity)`` or None when the regime
    has no temporal objective.
    """
    usable = out.has_valid
    idx = usable.nonzero(as_tuple=True)[0]
    remap = torch.full((len(usable),), -1, dtype=torch.long)
    remap[idx] = torch.arange(len(idx))
    pos = torch.as_tensor(pos_index, dtype=torch.long)[idx]
    pos = torch.where(pos >= 0, remap[pos.clamp(min=0)], pos)
    l_ctr = info_nce(out.projection[idx], pos, weights.tau)
    targets = torch.as_tensor(np.stack([r.role_vector for r in records]), dtype=out.rank_logit.dtype)[idx]
    _, _, _, l_role = role_loss(out.rank_logit[idx], out.edge_logits[idx], out.size_logit[idx], targets)
    l_group = group_consistency_loss(out.rank_logit[idx], batch.group_index[idx])
    l_enc = w_ctr * l_ctr + w_role * (l_role + weights.group_consistency_weight * l_group)
    if temporal is not None:
        l_temp = temporal_loss(*temporal)
        total = weights.alpha * l_temp + weights.beta * l_enc
    else:
        l_temp = l_ctr.new_zeros(())
        total = weights.beta * l_enc
    return {"total": total, "l_ctr": l_ctr, "l_role": l_role, "l_group": l_group, "l_temp": l_temp}


def joint_step(state: TrainState, records, batch, pos_index, w_ctr: float, w_role: float, gen=None) -> dict:
    """One optimizer update for the current regime and stage."""
    regime = state.regime
    if regime == "traj_stats_baseline":
        raise ConfigurationError("traj_stats_baseline has nothing to train")
    if regime != "two_stage_frozen" and state.stage != 1:
        raise ConfigurationError(f"regime {regime} has a single stage")
    weights = state.config.weights
    labels = batch_labels(records, state.config.train_windows)
    if regime == "two_stage_frozen" and state.stage == 2:
        state.encoder.eval()
        state.detector.train()
        with torch.no_grad():
            out = state.encoder(batch)
        logits = state.detector(out.per_window, out.window_valid)
        l_temp = temporal_loss(logits, labels, out.window_valid)
        state.optimizer.zero_grad()
        l_temp.backward()
        state.optimizer.step()
        zero = torch.zeros(())
        return {"total": l_temp.detach(), "l_ctr": zero, "l_role": zero, "l_group": zero, "l_temp": l_temp.detach()}
    state.encoder.train()
    out = state.encoder(batch, rng=gen)
    temporal = None
    if uses_temporal(regime):
        state.detector.train()
        logits = state.detector(out.per_window, out.window_valid)
        temporal = (logits, labels, out.window_valid)
    losses = compute_losses(out, records, batch, pos_index, weights, w_ctr, w_role, temporal)
    state.optimizer.zero_grad()
    losses["total"].backward()
    state.optimizer.step()
    return {k: v.detach() for k, v in losses.items()}


def batch_labels(records, windows) -> torch.Tensor:
    return torch.tensor([[r.windows[w].anomaly_label for w in windows] for r in records], dtype=torch.float32)


# evaluation used for the curve log


def projection_similarities(proj: np.ndarray, lane_ids, pos_pairs) -> tuple[float, float]:
    """Mean cosine over mined positive pairs and over all other distinct pairs."""
    S = proj @ proj.T
    where = {lid: i for i, lid in enumerate(lane_ids)}
    P = np.zeros_like(S, dtype=bool)
    for a, b in pos_pairs:
        if a in where and b in where:
            P[where[a], where[b]] = P[where[b], where[a]] = True
    iu = np.triu_indices(len(S), k=1)
    pos = S[iu][P[iu]]
    neg = S[iu][~P[iu]]
    return (float(pos.mean()) if len(pos) else float("nan"), float(neg.mean()) if len(neg) else float("nan"))


def embed_records(encoder: LaneEncoder, records, windows, max_slots=None, cameras_per_chunk: int = 4, geometry_absent=False):
    """Inference-mode encoder outputs for all ``records``, in record order."""
    cams = sorted({r.camera_id for r in records})
    n = len(records)
    pooled = torch.zeros(n, encoder.cfg.embed_dim)
    attended = torch.zeros(n, encoder.cfg.embed_dim)
    proj = torch.zeros(n, encoder.cfg.projection_dim)
    per_window = torch.zeros(n, len(windows), encoder.cfg.embed_dim)
    wvalid = torch.zeros(n, len(windows), dtype=torch.bool)
    has = torch.zeros(n, dtype=torch.bool)
    for c in range(0, len(cams), cameras_per_chunk):
        chunk = set(cams[c : c + cameras_per_chunk])
        idx = [i for i, r in enumerate(records) if r.camera_id in chunk]
        batch = D.collate_batch([records[i] for i in idx], list(windows), max_slots=max_slots)
        absent = torch.full((len(idx),), bool(geometry_absent))
        out = encoder.embed(batch, geometry_absent=absent)
        t = torch.as_tensor(idx)
        pooled[t], attended[t], proj[t] = out.pooled, out.attended, out.projection
        per_window[t], wvalid[t], has[t] = out.per_window, out.window_valid, out.has_valid
    return {"pooled": pooled, "attended": attended, "projection": proj, "per_window": per_window, "window_valid": wvalid, "has_valid": has}


def epoch_metrics(state: TrainState, val_records, pos_pairs, measure_anomaly: bool) -> dict:
    cfg = state.config
    seq = list(cfg.train_windows) + list(cfg.val_windows)
    emb = embed_records(state.encoder, val_records, seq, max_slots=cfg.max_slots)
    pos_sim, neg_sim = projection_similarities(emb["projection"].numpy(), [r.lane_id for r in val_records], pos_pairs)
    acc = float("nan")
    if measure_anomaly:
        state.detector.eval()
        with torch.no_grad():
            p = state.detector.probabilities(emb["per_window"], emb["window_valid"]).numpy()
        cols = [seq.index(w) for w in cfg.val_windows]
        y, v = A.labels_and_validity(val_records, cfg.val_windows)
        pv = p[:, cols][v]
        acc = float(((pv >= 0.5) == y[v].astype(bool)).mean()) if v.any() else float("nan")
    return {"pos_sim": pos_sim, "neg_sim": neg_sim, "anomaly_acc": acc}


def make_validation_split(records, cfg: TrainConfig, cap: float):
    rng = np.random.default_rng([cfg.seed, 0x56414C])
    return A.evaluation_corruption(records, cfg.val_windows, rng, cap, cfg.val_corruption_probability)


def write_curves(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(CURVE_COLUMNS)
        for row in rows:
            wr.writerow([row["epoch"]] + [_fmt(row[c]) for c in CURVE_COLUMNS[1:]])


def read_curves(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def _fmt(x) -> str:
    return "nan" if x != x else f"{float(x):.6f}"


def new_state(regime: str, cfg: TrainConfig, encoder_cfg: EncoderConfig | None = None, detector_cfg: A.DetectorConfig | None = None) -> TrainState:
    ecfg = regime_encoder_config(replace(encoder_cfg or EncoderConfig(), seed=cfg.seed), regime)
    enc = LaneEncoder(ecfg)
    det = A.AnomalyDetector(ecfg.embed_dim, detector_cfg, seed=cfg.seed + 1)
    return TrainState(enc, det, None, regime, cfg)


def _encoder_optimizer(state: TrainState):
    params = list(state.encoder.parameters())
    if uses_temporal(state.regime):
        params += list(state.detector.parameters())
    return torch.optim.Adam(params, lr=state.config.learning_rate)


def fit_scaling(encoder: LaneEncoder, records, windows) -> None:
    rows = [D.fused_descriptor(r.windows[w].stats, r.role_vector) for r in records for w in windows if r.windows[w].is_valid]
    encoder.fit_input_scaling(np.stack(rows))


def _run_epochs(state: TrainState, records, val_records, pos_map, pos_pairs, cap, epochs, epoch_offset, log, checkpoint_dir, measure):
    cfg = state.config
    gen = torch.Generator().manual_seed(cfg.seed)
    temporal = uses_temporal(state.regime) or state.stage == 2
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(state.optimizer, max(epochs - 1, 1), eta_min=cfg.learning_rate * cfg.lr_final_fraction)
    for e in range(epochs):
        rng = np.random.default_rng([cfg.seed, state.stage, e])
        torch.manual_seed(cfg.seed * 1000003 + state.stage * 1009 + e)
        w_ctr, w_role = phase_weights(e, epochs) if state.stage == 1 else (0.0, 0.0)
        recs = A.training_corruption(records, cfg.train_windows, cfg.corruption_fraction, rng, cap) if temporal else records
        sums = {"l_ctr": 0.0, "l_role": 0.0, "l_group": 0.0, "l_temp": 0.0}
        steps = 0
        for chunk in camera_batches(recs, cfg.cameras_per_batch, rng):
            batch = D.collate_batch(chunk, list(cfg.train_windows), max_slots=cfg.max_slots, rng=rng)
            usable = batch.window_valid.any(dim=1).numpy()
            pos = choose_positives(batch.lane_ids, usable, pos_map, rng)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                losses = joint_step(state, chunk, batch, pos, w_ctr, w_role, gen)
            for k in sums:
                sums[k] += float(losses[k])
            steps += 1
        sched.step()
        state.epoch = epoch_offset + e + 1
        row = {"epoch": state.epoch, **{k: v / steps for k, v in sums.items()}, "w_ctr": w_ctr, "w_role": w_role}
        row.update(epoch_metrics(state, val_records, pos_pairs, measure))
        state.curves.append(row)
        if log is not None:
            log(row)
        if checkpoint_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_state(state, Path(checkpoint_dir) / f"{state.regime}_epoch{state.epoch:04d}.ckpt")


def train(
    dataset: D.LaneDataset,
    cfg: TrainConfig,
    regime: str,
    encoder_cfg: EncoderConfig | None = None,
    detector_cfg: A.DetectorConfig | None = None,
    stage1: TrainState | None = None,
    log=None,
    checkpoint_dir=None,
) -> TrainState:
    """Train ``regime`` on the training windows of every lane in ``dataset``.

    For ``two_stage_frozen`` a finished ``contrastive_only`` state with the
    same seed may be passed as ``stage1`` to skip retraining it.
    """
    cfg.validate()
    if regime not in REGIMES:
        raise ConfigurationError(f"unknown regime {regime!r}")
    if regime == "traj_stats_baseline":
        raise ConfigurationError("traj_stats_baseline is evaluated directly, not trained")
    records = dataset.records
    cap = float(dataset.config.get("count_cap", D.COUNT_CAP))
    pos_pairs = D.mine_positive_pairs(records)
    if not pos_pairs:
        raise ValueError("no positive pairs mined; contrastive training is impossible")
    pos_map = positive_map(records)
    val_records = make_validation_split(records, cfg, cap)

    if regime == "two_stage_frozen":
        if stage1 is None:
            stage1 = train(dataset, cfg, "contrastive_only", encoder_cfg, detector_cfg, log=log, checkpoint_dir=checkpoint_dir)
        state = TrainState(stage1.encoder, A.AnomalyDetector(stage1.encoder.cfg.embed_dim, detector_cfg, seed=cfg.seed + 1), None, regime, cfg)
        state.curves = [dict(r) for r in stage1.curves]
        state.epoch = stage1.epoch
        state.stage = 2
        for p in state.encoder.parameters():
            p.requires_grad_(False)
        state.frozen_hash = state_hash(state.encoder)
        state.optimizer = torch.optim.Adam(state.detector.parameters(), lr=cfg.learning_rate)
        _run_epochs(state, records, val_records, pos_map, pos_pairs, cap, cfg.epochs, state.epoch, log, checkpoint_dir, True)
        if state_hash(state.encoder) != state.frozen_hash:
            raise RuntimeError("encoder changed during the frozen stage")
        return state

    state = new_state(regime, cfg, encoder_cfg, detector_cfg)
    fit_scaling(state.encoder, records, cfg.train_windows)
    state.optimizer = _encoder_optimizer(state)
    _run_epochs(state, records, val_records, pos_map, pos_pairs, cap, cfg.epochs, 0, log, checkpoint_dir, uses_temporal(regime))
    return state


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["train_windows"] = list(cfg.train_windows)
    d["val_windows"] = list(cfg.val_windows)
    return d


def save_state(state: TrainState, path) -> None:
    config = {
        "regime": state.regime,
        "stage": state.stage,
        "epoch": state.epoch,
        "encoder": state.encoder.cfg.to_dict(),
        "detector": {
            "gru_hidden": state.detector.cfg.gru_hidden,
            "head_hidden": state.detector.cfg.head_hidden,
            "threshold": state.detector.cfg.threshold,
        },
        "train": train_config_to_dict(state.config),
    }
    save_checkpoint(path, {"encoder": state.encoder, "detector": state.detector}, config, state.config.seed)


def load_state(path):
    """Rebuild ``(encoder, detector, header)`` from a checkpoint in inference mode."""
    header, tensors = read_checkpoint(path)
    cfg = header["config"]
    enc = LaneEncoder(EncoderConfig.from_dict(cfg["encoder"]))
    det = A.AnomalyDetector(enc.cfg.embed_dim, A.DetectorConfig(**cfg["detector"]))
    load_into({"encoder": enc, "detector": det}, tensors)
    enc.eval()
    det.eval()
    return enc, det, header
