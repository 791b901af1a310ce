"""Model-ready lane records built from a synthetic scene.

Pipeline: assign each camera's tracklets to its nearest lane, split them by
window, resample everything to ``K`` points, and compute the per-window
statistics. ``collate_batch`` turns a list of records into padded torch
tensors; ``save_dataset``/``load_dataset`` and ``save_scene``/``load_scene``
share one on-disk layout (``manifest.json`` plus per-camera ``lanes.jsonl``
and ``arrays.bin``).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import geomkit as gk
from .arrayio import ArrayReader, ArrayWriter, dump_json, read_jsonl, write_jsonl
from .scenegen import CameraView, KinematicsProfile, LaneTruth, SceneConfig, SceneDataset, Tracklet

K = 16
DEFAULT_THRESHOLD = 60.0 / 1280.0
COUNT_CAP = 20
FORMAT_VERSION = 1


@dataclass
class WindowRecord:
    window_index: int
    tracklets: np.ndarray
    valid_mask: np.ndarray
    stats: np.ndarray
    is_valid: bool
    anomaly_label: int = 0
    # unresampled point sequences, kept for anomaly injection
    raw: list[np.ndarray] = field(default_factory=list)


@dataclass
class LaneRecord:
    lane_id: str
    group_id: str
    camera_id: str
    geometry: np.ndarray
    windows: list[WindowRecord]
    role_vector: np.ndarray
    role_class: str
    centerline: np.ndarray
    # mean stats over valid windows of the clean data; feeds the pairwise features
    lane_stats: np.ndarray = field(default_factory=lambda: np.zeros(4, np.float32))

    @property
    def lateral_rank(self) -> float:
        return float(self.role_vector[0])

    @property
    def edge_flags(self) -> tuple[int, int]:
        return int(self.role_vector[1]), int(self.role_vector[2])

    @property
    def group_size(self) -> int:
        return int(round(float(self.role_vector[4]) * 8))

    def descriptor(self, w: int) -> np.ndarray:
        return fused_descriptor(self.windows[w].stats, self.role_vector)

    def valid_windows(self) -> list[int]:
        return [i for i, win in enumerate(self.windows) if win.is_valid]


@dataclass
class AssignmentReport:
    assigned: int
    discarded: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.assigned if self.assigned else float("nan")


@dataclass
class LaneDataset:
    records: list[LaneRecord]
    config: dict
    assignment: AssignmentReport | None = None

    def by_id(self) -> dict[str, LaneRecord]:
        return {r.lane_id: r for r in self.records}

    def cameras(self) -> list[str]:
        return sorted({r.camera_id for r in self.records})


@dataclass
class Batch:
    geometry: torch.Tensor
    trajectories: torch.Tensor
    mask: torch.Tensor
    descriptor: torch.Tensor
    window_valid: torch.Tensor
    lane_stats: torch.Tensor
    group_index: torch.Tensor
    group_slots: torch.Tensor
    lane_ids: list[str]

    @property
    def per_window(self) -> bool:
        return self.trajectories.dim() == 5


def fused_descriptor(stats, role_vector) -> np.ndarray:
    return np.concatenate([np.asarray(stats, np.float32), np.asarray(role_vector, np.float32)])


def assign_tracklets(tracklets, lanes, threshold: float = DEFAULT_THRESHOLD):
    """Bind each tracklet to the nearest lane by mean point-to-centerline distance.

    ``lanes`` maps lane_id to a camera-frame centerline. Returns
    ``(assignment, discarded)`` where assignment maps lane_id to its tracklets.
    Ties go to the lowest lane_id.
    """
    if not lanes:
        raise ValueError("camera has no lanes")
    ids = sorted(lanes)
    out = {i: [] for i in ids}
    if not tracklets:
        return out, 0
    pts = [gk.as_points(t.points if isinstance(t, Tracklet) else t) for t in tracklets]
    lens = np.array([len(p) for p in pts])
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
    flat = np.concatenate(pts)
    # (lanes, tracklets) mean distances, computed over all points at once
    d = np.stack([np.add.reduceat(gk.points_to_polyline_distance(flat, lanes[i]), starts) / lens for i in ids])
    best = np.argmin(d, axis=0)
    discarded = 0
    for k, t in enumerate(tracklets):
        j = int(best[k])
        if d[j, k] > threshold:
            discarded += 1
            continue
        out[ids[j]].append(t)
    return out, discarded


def compute_stats(tracklets, centerline, cap: float = COUNT_CAP):
    """Window statistics ``[mean_speed, mean_curvature, mean_lateral_offset, count]``.

    Speed is pooled over every per-frame step of every tracklet; curvature and
    lateral offset are per-tracklet values averaged over tracklets, curvature
    taken on the ``K``-point resampling. Returns ``(stats, is_valid)``.
    """
    tracklets = [gk.as_points(t) for t in tracklets]
    if not tracklets:
        return np.zeros(4, np.float32), False
    steps = np.concatenate([np.linalg.norm(np.diff(t, axis=0), axis=1) for t in tracklets])
    speed = float(steps.mean()) if len(steps) else 0.0
    curv = np.mean([gk.mean_curvature(gk.resample_arclength(t, K)) for t in tracklets])
    lat = np.mean([gk.signed_lateral_offset(t, centerline) for t in tracklets])
    count = min(len(tracklets), cap) / cap
    return np.array([speed, curv, lat, count], np.float32), True


def build_role_vector(lane: LaneTruth) -> np.ndarray:
    rank = 0.5 if lane.group_size == 1 else lane.lateral_rank
    return np.array(
        [rank, float(lane.leftmost), float(lane.rightmost), float(lane.successor), min(lane.group_size / 8.0, 1.0)],
        np.float32,
    )


def make_window(window_index: int, raw, centerline, cap: float = COUNT_CAP) -> WindowRecord:
    raw = [np.asarray(t, np.float32) for t in raw]
    stats, ok = compute_stats(raw, centerline, cap)
    if raw:
        res = np.stack([gk.resample_arclength(t, K) for t in raw]).astype(np.float32)
    else:
        res = np.zeros((0, K, 2), np.float32)
    return WindowRecord(window_index, res, np.ones(len(raw), bool), stats, ok, 0, raw)


def lane_mean_stats(windows) -> np.ndarray:
    valid = [w.stats for w in windows if w.is_valid]
    if not valid:
        return np.zeros(4, np.float32)
    return np.mean(valid, axis=0).astype(np.float32)


def build_dataset(scene: SceneDataset, threshold: float = DEFAULT_THRESHOLD, count_cap: float | None = None) -> LaneDataset:
    """Assign, window and summarize every lane of ``scene``.

    ``count_cap`` defaults to 20 tracklets per 300-frame reference window,
    scaled with the scene's window length.
    """
    cfg = scene.config
    if count_cap is None:
        count_cap = COUNT_CAP * cfg.frames_per_window / cfg.reference_frames
    records, assigned, discarded, correct = [], 0, 0, 0
    for view in scene.cameras:
        lanes = sorted(scene.lanes_of(view.camera_id), key=lambda ln: ln.lane_id)
        if not lanes:
            continue
        lines = {ln.lane_id: ln.centerline_camera for ln in lanes}
        amap, lost = assign_tracklets(scene.tracklets_of(view.camera_id), lines, threshold)
        discarded += lost
        for ln in lanes:
            got = amap[ln.lane_id]
            assigned += len(got)
            correct += sum(t.lane_id_truth == ln.lane_id for t in got)
            per_w = [[] for _ in range(cfg.n_windows)]
            for t in got:
                per_w[t.window_index].append(t.points)
            windows = [make_window(w, per_w[w], ln.centerline_camera, count_cap) for w in range(cfg.n_windows)]
            records.append(
                LaneRecord(
                    lane_id=ln.lane_id,
                    group_id=ln.group_id,
                    camera_id=ln.camera_id,
                    geometry=gk.resample_arclength(ln.centerline_camera, K).astype(np.float32),
                    windows=windows,
                    role_vector=build_role_vector(ln),
                    role_class=ln.role_class,
                    centerline=np.asarray(ln.centerline_camera, np.float32),
                    lane_stats=lane_mean_stats(windows),
                )
            )
    meta = {
        "threshold": float(threshold),
        "count_cap": float(count_cap),
        "frames_per_window": cfg.frames_per_window,
        "n_windows": cfg.n_windows,
        "scene": scene_config_to_dict(cfg),
    }
    return LaneDataset(records, meta, AssignmentReport(assigned, discarded, correct))


def is_positive_pair(a: LaneRecord, b: LaneRecord) -> bool:
    if a.camera_id == b.camera_id:
        return False
    if abs(a.lateral_rank - b.lateral_rank) >= 0.15:
        return False
    if a.edge_flags != b.edge_flags:
        return False
    ra = a.role_vector.astype(np.float64)
    rb = b.role_vector.astype(np.float64)
    cos = ra @ rb / (np.linalg.norm(ra) * np.linalg.norm(rb) + 1e-12)
    return cos >= 0.8


def mine_positive_pairs(records) -> set[tuple[str, str]]:
    """Cross-camera structural positives as sorted ``(lane_id, lane_id)`` pairs."""
    out = set()
    for i, a in enumerate(records):
        for b in records[i + 1 :]:
            if is_positive_pair(a, b):
                out.add(tuple(sorted((a.lane_id, b.lane_id))))
    return out


def _slot_choice(n: int, max_slots: int | None, rng) -> np.ndarray:
    if max_slots is None or n <= max_slots:
        return np.arange(n)
    if rng is None:
        return np.arange(max_slots)
    return np.sort(rng.choice(n, size=max_slots, replace=False))


def collate_batch(records, windows, max_slots: int | None = None, rng=None) -> Batch:
    """Pad records into a ``Batch``.

    ``windows`` is a single window index (tensors without a window axis) or a
    sequence of indices (tensors with a ``W`` axis after the batch axis).
    ``max_slots`` caps tracklets per window, sampled with ``rng`` when given.
    """
    records = list(records)
    if not records:
        raise ValueError("empty batch")
    single = isinstance(windows, (int, np.integer))
    wins = [int(windows)] if single else [int(w) for w in windows]
    B, W = len(records), len(wins)
    picks = [[_slot_choice(len(r.windows[w].tracklets), max_slots, rng) for w in wins] for r in records]
    T = max(1, max(len(p) for row in picks for p in row))
    traj = np.zeros((B, W, T, K, 2), np.float32)
    mask = np.zeros((B, W, T), bool)
    desc = np.zeros((B, W, 9), np.float32)
    wvalid = np.zeros((B, W), bool)
    for b, r in enumerate(records):
        for j, w in enumerate(wins):
            win = r.windows[w]
            idx = picks[b][j]
            traj[b, j, : len(idx)] = win.tracklets[idx]
            mask[b, j, : len(idx)] = win.valid_mask[idx]
            desc[b, j] = fused_descriptor(win.stats, r.role_vector)
            wvalid[b, j] = win.is_valid
    order = {}
    for r in records:
        order.setdefault(r.group_id, len(order))
    gidx = np.array([order[r.group_id] for r in records])
    members = [np.flatnonzero(gidx == g) for g in range(len(order))]
    S = max(len(m) for m in members)
    slots = np.full((len(members), S), -1, np.int64)
    for g, m in enumerate(members):
        slots[g, : len(m)] = m
    if single:
        traj, mask, desc, wvalid = traj[:, 0], mask[:, 0], desc[:, 0], wvalid[:, 0]
    return Batch(
        geometry=torch.from_numpy(np.stack([r.geometry for r in records]).astype(np.float32)),
        trajectories=torch.from_numpy(traj),
        mask=torch.from_numpy(mask),
        descriptor=torch.from_numpy(desc),
        window_valid=torch.from_numpy(wvalid),
        lane_stats=torch.from_numpy(np.stack([r.lane_stats for r in records]).astype(np.float32)),
        group_index=torch.from_numpy(gidx),
        group_slots=torch.from_numpy(slots),
        lane_ids=[r.lane_id for r in records],
    )


def with_windows(record: LaneRecord, windows: list[WindowRecord]) -> LaneRecord:
    return replace(record, windows=windows)


# serialization


def scene_config_to_dict(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["groups_per_camera"] = list(cfg.group_counts())
    return json.loads(json.dumps(d))


def scene_config_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    d["kinematics"] = KinematicsProfile(**d["kinematics"])
    g = d["groups_per_camera"]
    d["groups_per_camera"] = g if isinstance(g, int) else tuple(g)
    for key in ("lanes_per_group_range", "tracklets_per_lane_per_window_range"):
        d[key] = tuple(d[key])
    return SceneConfig(**d)


def _camera_dir(root: Path, cid: str) -> Path:
    p = root / "cameras" / cid
    p.mkdir(parents=True, exist_ok=True)
    return p


def save_scene(scene: SceneDataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cams = []
    for view in scene.cameras:
        lanes = scene.lanes_of(view.camera_id)
        cdir = _camera_dir(root, view.camera_id)
        lines = []
        by_lane = {ln.lane_id: [] for ln in lanes}
        for t in scene.tracklets_of(view.camera_id):
            by_lane[t.lane_id_truth].append(t)
        with ArrayWriter(cdir / "arrays.bin") as aw:
            for ln in lanes:
                head = {
                    k: getattr(ln, k)
                    for k in (
                        "lane_id", "group_id", "camera_id", "lateral_rank", "leftmost", "rightmost",
                        "successor", "group_size", "role_class", "rate", "speed_scale", "neighbor_id",
                    )
                }
                head["centerline_world"] = aw.write(ln.centerline_world)
                head["centerline_camera"] = aw.write(ln.centerline_camera)
                head["tracklets"] = [
                    {
                        "tracklet_id": t.tracklet_id,
                        "window_index": t.window_index,
                        "points": aw.write(t.points),
                        "frames": aw.write(t.frame_indices),
                    }
                    for t in by_lane[ln.lane_id]
                ]
                lines.append(head)
        write_jsonl(lines, cdir / "lanes.jsonl")
        v = asdict(view)
        cams.append({"camera_id": view.camera_id, "n_lanes": len(lanes), "view": json.loads(json.dumps(v))})
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "scene",
        "config": scene_config_to_dict(scene.config),
        "cameras": cams,
        "n_lanes": len(scene.lanes),
        "n_tracklets": len(scene.tracklets),
    }
    dump_json(manifest, root / "manifest.json")


def _read_manifest(root: Path, kind: str) -> dict:
    with open(root / "manifest.json", encoding="utf-8") as fh:
        m = json.load(fh)
    if m.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {m.get('format_version')}")
    if m.get("kind") != kind:
        raise ValueError(f"{root} holds a {m.get('kind')!r}, expected {kind!r}")
    return m


def load_scene(path) -> SceneDataset:
    root = Path(path)
    m = _read_manifest(root, "scene")
    cameras, lanes, tracklets = [], [], []
    for cam in m["cameras"]:
        v = cam["view"]
        cameras.append(
            CameraView(
                v["camera_id"], v["rotation"], tuple(v["scale"]), v["shear"], tuple(v["translation"]), v["observation_noise_std"]
            )
        )
        cdir = root / "cameras" / cam["camera_id"]
        ar = ArrayReader(cdir / "arrays.bin")
        for head in read_jsonl(cdir / "lanes.jsonl"):
            tr = head.pop("tracklets")
            head["centerline_world"] = ar.read(head["centerline_world"])
            head["centerline_camera"] = ar.read(head["centerline_camera"])
            lanes.append(LaneTruth(**head))
            for t in tr:
                tracklets.append(
                    Tracklet(
                        t["tracklet_id"],
                        head["lane_id"],
                        ar.read(t["points"]),
                        ar.read(t["frames"]).astype(np.int64),
                        t["window_index"],
                    )
                )
    return SceneDataset(scene_config_from_dict(m["config"]), cameras, lanes, tracklets)


def save_dataset(ds: LaneDataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cams = []
    for cid in ds.cameras():
        recs = [r for r in ds.records if r.camera_id == cid]
        cdir = _camera_dir(root, cid)
        lines = []
        with ArrayWriter(cdir / "arrays.bin") as aw:
            for r in recs:
                head = {
                    "lane_id": r.lane_id,
                    "group_id": r.group_id,
                    "camera_id": r.camera_id,
                    "role_class": r.role_class,
                    "geometry": aw.write(r.geometry),
                    "role_vector": aw.write(r.role_vector),
                    "centerline": aw.write(r.centerline),
                    "lane_stats": aw.write(r.lane_stats),
                    "windows": [
                        {
                            "window_index": w.window_index,
                            "is_valid": bool(w.is_valid),
                            "anomaly_label": int(w.anomaly_label),
                            "stats": aw.write(w.stats),
                            "tracklets": aw.write(w.tracklets),
                            "valid_mask": aw.write(w.valid_mask.astype(np.float32)),
                            "raw": [aw.write(t) for t in w.raw],
                        }
                        for w in r.windows
                    ],
                }
                lines.append(head)
        write_jsonl(lines, cdir / "lanes.jsonl")
        cams.append({"camera_id": cid, "n_lanes": len(recs)})
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "config": ds.config,
        "cameras": cams,
        "n_lanes": len(ds.records),
    }
    if ds.assignment is not None:
        manifest["assignment"] = asdict(ds.assignment)
    dump_json(manifest, root / "manifest.json")


def load_dataset(path) -> LaneDataset:
    root = Path(path)
    m = _read_manifest(root, "dataset")
    records = []
    for cam in m["cameras"]:
        cdir = root / "cameras" / cam["camera_id"]
        ar = ArrayReader(cdir / "arrays.bin")
        for h in read_jsonl(cdir / "lanes.jsonl"):
            windows = [
                WindowRecord(
                    w["window_index"],
                    ar.read(w["tracklets"]),
                    ar.read(w["valid_mask"]).astype(bool),
                    ar.read(w["stats"]),
                    w["is_valid"],
                    w["anomaly_label"],
                    [ar.read(o) for o in w["raw"]],
                )
                for w in h["windows"]
            ]
            records.append(
                LaneRecord(
                    h["lane_id"],
                    h["group_id"],
                    h["camera_id"],
                    ar.read(h["geometry"]),
                    windows,
                    ar.read(h["role_vector"]),
                    h["role_class"],
                    ar.read(h["centerline"]),
                    ar.read(h["lane_stats"]),
                )
            )
    a = m.get("assignment")
    return LaneDataset(records, m["config"], AssignmentReport(**a) if a else None)


def dataset_exists(path) -> bool:
    return os.path.exists(os.path.join(path, "manifest.json"))
