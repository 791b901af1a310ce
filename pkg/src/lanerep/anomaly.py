"""Synthetic window corruption and the recurrent per-window anomaly detector."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from . import dataset as D
from . import geomkit as gk
from .errors import ConfigurationError

KINDS = ("speed_reduction", "trajectory_dropout", "lateral_deviation")
DEFAULT_SEVERITY = {"speed_reduction": 0.5, "trajectory_dropout": 0.5, "lateral_deviation": 0.05}


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    severity: float | None = None
    windows: tuple[int, ...] = ()

    @property
    def level(self) -> float:
        return DEFAULT_SEVERITY[self.kind] if self.severity is None else float(self.severity)

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown anomaly kind {self.kind!r}")
        s = self.level
        if self.kind in ("speed_reduction", "trajectory_dropout") and not 0.0 < s <= 1.0:
            raise ConfigurationError(f"{self.kind} severity must lie in (0, 1]")
        if self.kind == "lateral_deviation" and s <= 0:
            raise ConfigurationError("lateral shift must be > 0")


@dataclass(frozen=True)
class DetectorConfig:
    gru_hidden: int = 64
    head_hidden: int = 32
    threshold: float = 0.5

    def validate(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must lie in (0, 1)")


def _left_normals(points: np.ndarray, centerline: np.ndarray) -> np.ndarray:
    c = gk.as_points(centerline)
    dist2, _, d = gk._project_onto_segments(points, c)
    t = d[np.argmin(dist2, axis=1)]
    t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    return np.c_[-t[:, 1], t[:, 0]]


def inject(window: D.WindowRecord, spec: AnomalySpec, rng, *, centerline, cap: float = D.COUNT_CAP) -> D.WindowRecord:
    """Corrupted copy of ``window`` with recomputed stats and ``anomaly_label=1``."""
    spec.validate()
    if not window.is_valid:
        raise ValueError("cannot corrupt an invalid window")
    s = spec.level
    raw = [np.asarray(t, np.float64) for t in window.raw]
    if spec.kind == "speed_reduction":
        raw = [t[:1] + (1.0 - s) * (t - t[:1]) for t in raw]
    elif spec.kind == "trajectory_dropout":
        n = len(raw)
        keep = max(1, n - int(round(s * n)))
        idx = np.sort(rng.choice(n, size=keep, replace=False))
        raw = [raw[i] for i in idx]
    else:
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        raw = [np.clip(t + sign * s * _left_normals(t, centerline), 0.0, 1.0) for t in raw]
    out = D.make_window(window.window_index, raw, centerline, cap)
    return replace(out, anomaly_label=1)


def corrupt_record(record: D.LaneRecord, plan: dict[int, AnomalySpec], rng, cap: float) -> D.LaneRecord:
    wins = list(record.windows)
    for w, spec in sorted(plan.items()):
        wins[w] = inject(wins[w], spec, rng, centerline=record.centerline, cap=cap)
    return D.with_windows(record, wins)


def training_corruption(records, windows, fraction: float, rng, cap: float):
    """Corrupt ``fraction`` of all valid windows in ``windows``, kinds drawn uniformly."""
    slots = [(i, w) for i, r in enumerate(records) for w in windows if r.windows[w].is_valid]
    n = int(round(fraction * len(slots)))
    pick = rng.choice(len(slots), size=n, replace=False) if n else np.zeros(0, int)
    plans: dict[int, dict[int, AnomalySpec]] = {}
    for j in np.sort(pick):
        i, w = slots[j]
        plans.setdefault(i, {})[w] = AnomalySpec(KINDS[int(rng.integers(len(KINDS)))])
    return [corrupt_record(r, plans[i], rng, cap) if i in plans else r for i, r in enumerate(records)]


def evaluation_corruption(records, windows, rng, cap: float, probability: float = 0.15):
    """Per-window Bernoulli corruption with kinds assigned round-robin."""
    out, k = [], 0
    for r in records:
        plan = {}
        for w in windows:
            if r.windows[w].is_valid and rng.uniform() < probability:
                plan[w] = AnomalySpec(KINDS[k % len(KINDS)])
                k += 1
        out.append(corrupt_record(r, plan, rng, cap) if plan else r)
    return out


class AnomalyDetector(nn.Module):
    """GRU over per-window embeddings with an MLP logit head."""

    def __init__(self, embed_dim: int = 128, cfg: DetectorConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or DetectorConfig()
        cfg.validate()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.gru = nn.GRUCell(embed_dim, cfg.gru_hidden)
        self.head = nn.Sequential(nn.Linear(cfg.gru_hidden, cfg.head_hidden), nn.GELU(), nn.Linear(cfg.head_hidden, 1))

    def forward(self, Z: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, W)``; invalid windows carry the hidden state through."""
        B, W, _ = Z.shape
        h = Z.new_zeros(B, self.cfg.gru_hidden)
        logits = []
        for w in range(W):
            nxt = self.gru(Z[:, w], h)
            v = valid[:, w].bool()[:, None]
            h = torch.where(v, nxt, h)
            logits.append(self.head(h).squeeze(-1))
        return torch.stack(logits, dim=1)

    def probabilities(self, Z, valid) -> torch.Tensor:
        p = torch.sigmoid(self.forward(Z, valid))
        return torch.where(valid.bool(), p, torch.zeros_like(p))


def detect_sequence(Z, valid, detector: AnomalyDetector) -> np.ndarray:
    Z = torch.as_tensor(np.asarray(Z, np.float32))
    valid = torch.as_tensor(np.asarray(valid, bool))
    with torch.no_grad():
        return detector.probabilities(Z[None], valid[None])[0].numpy()


def youden_curve(scores, labels):
    """All midpoint thresholds with their ``TPR - FPR`` (predict positive at ``>= t``)."""
    s = np.asarray(scores, np.float64)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ValueError("threshold selection needs both classes")
    u = np.unique(s)
    cand = (u[:-1] + u[1:]) / 2.0 if len(u) > 1 else u
    pos, neg = y.sum(), (~y).sum()
    J = np.array([((s >= t) & y).sum() / pos - ((s >= t) & ~y).sum() / neg for t in cand])
    return cand, J


def select_threshold(scores, labels) -> float:
    cand, J = youden_curve(scores, labels)
    return float(cand[int(np.argmax(J))])


def binary_metrics(scores, labels, threshold: float) -> dict:
    s = np.asarray(scores, np.float64)
    y = np.asarray(labels).astype(bool)
    pred = s >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    tn = int((~pred & ~y).sum())
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    return {
        "threshold": float(threshold),
        "accuracy": (tp + tn) / len(y) if len(y) else float("nan"),
        "precision": prec,
        "recall": rec,
        "f1": f1,
        "tp": tp,
        "fp": fp,
        "tn": tn,
        "fn": fn,
    }


def window_probabilities(encoder, detector, records, windows, chunk_cameras: int = 4) -> np.ndarray:
    """Detector probabilities ``(n_records, len(windows))`` in inference mode."""
    out = np.zeros((len(records), len(windows)), np.float32)
    cams = sorted({r.camera_id for r in records})
    encoder.eval()
    detector.eval()
    for c in range(0, len(cams), chunk_cameras):
        chunk = set(cams[c : c + chunk_cameras])
        idx = [i for i, r in enumerate(records) if r.camera_id in chunk]
        batch = D.collate_batch([records[i] for i in idx], windows)
        with torch.no_grad():
            enc = encoder(batch)
            p = detector.probabilities(enc.per_window, enc.window_valid)
        out[idx] = p.numpy()
    return out


def labels_and_validity(records, windows):
    y = np.array([[r.windows[w].anomaly_label for w in windows] for r in records], np.int64)
    v = np.array([[r.windows[w].is_valid for w in windows] for r in records], bool)
    return y, v


def score_windows(encoder, detector, records, sequence, scored):
    """Flattened ``(scores, labels)`` over the valid windows listed in ``scored``.

    ``sequence`` is the window range fed to the detector; ``scored`` a subset.
    """
    p = window_probabilities(encoder, detector, records, sequence)
    y, v = labels_and_validity(records, sequence)
    cols = [list(sequence).index(w) for w in scored]
    p, y, v = p[:, cols], y[:, cols], v[:, cols]
    return p[v], y[v]


def score_timeline(encoder, detector, clean: D.LaneRecord, corrupted: D.LaneRecord, windows=None) -> dict:
    windows = list(range(len(clean.windows))) if windows is None else list(windows)
    pc = window_probabilities(encoder, detector, [clean], windows)[0]
    pa = window_probabilities(encoder, detector, [corrupted], windows)[0]
    return {
        "lane_id": clean.lane_id,
        "window": np.array(windows),
        "clean_prob": pc,
        "corrupted_prob": pa,
        "injected": np.array([corrupted.windows[w].anomaly_label for w in windows], bool),
        "valid": np.array([clean.windows[w].is_valid for w in windows], bool),
    }


def write_timeline_csv(timeline: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["window", "clean_prob", "corrupted_prob", "injected_flag", "valid_flag"])
        for row in zip(timeline["window"], timeline["clean_prob"], timeline["corrupted_prob"], timeline["injected"], timeline["valid"]):
            wr.writerow([int(row[0]), f"{row[1]:.6f}", f"{row[2]:.6f}", int(row[3]), int(row[4])])


def warn_if_single_class(labels, what: str) -> bool:
    y = np.asarray(labels)
    if y.size == 0 or y.all() or not y.any():
        warnings.warn(f"{what}: only one class present", stacklevel=2)
        return True
    return False
