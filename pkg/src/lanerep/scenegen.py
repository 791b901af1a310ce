"""Synthetic multi-camera roadside scenes.

A scene is a set of cameras, each observing a few lane groups. Every lane
carries ground-truth structure (lateral rank, edge flags, successor flag,
role class) and per-window vehicle tracklets whose kinematics depend on that
structure. Generation is deterministic in ``SceneConfig.seed``: each camera
draws from its own PCG64 stream keyed by ``(seed, camera_id)``, and each
``(lane, window)`` tracklet batch from a stream keyed additionally by the lane
and window index, so changing the window length or count never perturbs lane
geometry.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import geomkit as gk
from .errors import ConfigurationError

ROLE_CLASSES = ("leftmost", "rightmost", "interior", "merge")

# 6 cameras with three groups and 10 with two: 38 groups over 16 cameras
DEFAULT_GROUPS = (3, 2) * 6 + (2,) * 4


@dataclass(frozen=True)
class KinematicsProfile:
    base_speed: float = 0.008
    speed_gradient_across_lanes: float = 0.25
    lateral_jitter_std: float = 0.003
    heading_noise_std: float = 0.01
    merge_curve_strength: float = 0.6
    # relative per-vehicle speed spread
    speed_std: float = 0.05
    # per-group multiplicative speed spread, factor drawn from 1 +/- spread
    group_speed_spread: float = 0.25

    def validate(self):
        if self.base_speed <= 0:
            raise ConfigurationError("base_speed must be > 0")
        for name in ("lateral_jitter_std", "heading_noise_std", "speed_std", "group_speed_spread"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.group_speed_spread >= 1:
            raise ConfigurationError("group_speed_spread must be < 1")


@dataclass(frozen=True)
class SceneConfig:
    n_cameras: int = 16
    groups_per_camera: int | tuple[int, ...] = DEFAULT_GROUPS
    lanes_per_group_range: tuple[int, int] = (2, 5)
    merge_fraction: float = 0.136
    frames_per_window: int = 300
    n_windows: int = 12
    tracklets_per_lane_per_window_range: tuple[int, int] = (6, 12)
    kinematics: KinematicsProfile = field(default_factory=KinematicsProfile)
    seed: int = 0
    # window length (frames) that the tracklet count range refers to
    reference_frames: int = 300

    def group_counts(self) -> tuple[int, ...]:
        g = self.groups_per_camera
        if isinstance(g, int):
            return (g,) * self.n_cameras
        return tuple(int(x) for x in g)

    def validate(self):
        if self.n_cameras < 1:
            raise ConfigurationError("n_cameras must be >= 1")
        counts = self.group_counts()
        if len(counts) != self.n_cameras:
            raise ConfigurationError(
                f"groups_per_camera has {len(counts)} entries for {self.n_cameras} cameras"
            )
        if min(counts) < 1:
            raise ConfigurationError("groups_per_camera entries must be >= 1")
        for name in ("lanes_per_group_range", "tracklets_per_lane_per_window_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name}: min {lo} > max {hi}")
        if self.lanes_per_group_range[0] < 1:
            raise ConfigurationError("lanes_per_group_range min must be >= 1")
        if self.tracklets_per_lane_per_window_range[0] < 0:
            raise ConfigurationError("tracklet count range must be >= 0")
        if not 0.0 <= self.merge_fraction <= 1.0:
            raise ConfigurationError("merge_fraction must lie in [0, 1]")
        if self.frames_per_window < 1 or self.n_windows < 1 or self.reference_frames < 1:
            raise ConfigurationError("frames_per_window, n_windows and reference_frames must be >= 1")
        self.kinematics.validate()

    def expected_role_mix(self) -> dict[str, float]:
        m = self.merge_fraction
        rest = (1.0 - m) / 3.0
        return {"leftmost": rest, "rightmost": rest, "interior": rest, "merge": m}


@dataclass(frozen=True)
class CameraView:
    camera_id: str
    rotation: float = 0.0
    scale: tuple[float, float] = (1.0, 1.0)
    shear: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    observation_noise_std: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        R = np.array([[c, -s], [s, c]])
        H = np.array([[1.0, self.shear], [0.0, 1.0]])
        return R @ H @ np.diag(self.scale)

    def apply(self, points) -> np.ndarray:
        return gk.as_points(points) @ self.matrix.T + np.asarray(self.translation)


@dataclass
class LaneTruth:
    lane_id: str
    group_id: str
    camera_id: str
    centerline_world: np.ndarray
    lateral_rank: float
    leftmost: bool
    rightmost: bool
    successor: bool
    group_size: int
    role_class: str
    centerline_camera: np.ndarray | None = None
    # lane-local simulation parameters
    rate: float = 0.0
    speed_scale: float = 1.0
    neighbor_id: str | None = None


@dataclass
class Tracklet:
    tracklet_id: str
    lane_id_truth: str
    points: np.ndarray
    frame_indices: np.ndarray
    window_index: int


@dataclass
class SceneDataset:
    config: SceneConfig
    cameras: list[CameraView]
    lanes: list[LaneTruth]
    tracklets: list[Tracklet]

    def lanes_of(self, camera_id: str) -> list[LaneTruth]:
        return [ln for ln in self.lanes if ln.camera_id == camera_id]

    def tracklets_of(self, camera_id: str) -> list[Tracklet]:
        ids = {ln.lane_id for ln in self.lanes_of(camera_id)}
        return [t for t in self.tracklets if t.lane_id_truth in ids]

    def role_mix(self) -> dict[str, float]:
        n = len(self.lanes)
        return {r: sum(ln.role_class == r for ln in self.lanes) / n for r in ROLE_CLASSES}


def project_to_camera(world_polyline, view: CameraView, rng=None, clip: bool = True) -> np.ndarray:
    """Map world points into the camera's unit square.

    Gaussian noise with ``view.observation_noise_std`` is added when ``rng`` is
    given; results are clipped to ``[0, 1]^2`` unless ``clip`` is false.
    """
    if abs(np.linalg.det(view.matrix)) < 1e-9:
        raise ConfigurationError(f"camera {view.camera_id}: transform is not invertible")
    out = view.apply(world_polyline)
    if rng is not None and view.observation_noise_std > 0:
        out = out + rng.normal(scale=view.observation_noise_std, size=out.shape)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out


def _crc(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def lane_speed(lane: LaneTruth, profile: KinematicsProfile) -> float:
    """Mean vehicle speed on a lane; the leftmost side is fastest."""
    gain = 1.0 + profile.speed_gradient_across_lanes * (1.0 - lane.lateral_rank)
    return profile.base_speed * lane.speed_scale * gain


def simulate_tracklets(
    lane: LaneTruth,
    window: int,
    profile: KinematicsProfile,
    rng: np.random.Generator,
    *,
    frames_per_window: int = 300,
    reference_frames: int = 300,
    neighbor: np.ndarray | None = None,
) -> list[Tracklet]:
    """Vehicle tracklets for one lane and window, in world coordinates.

    Vehicles follow the centerline at the lane's role-dependent speed with a
    per-vehicle lateral offset (``lateral_jitter_std``) and heading error
    (``heading_noise_std``). On merge lanes, given the neighbor centerline,
    vehicles blend toward it over the second half of their track.
    """
    c = gk.as_points(lane.centerline_world)
    if len(c) < 2:
        raise ValueError("lane centerline needs at least 2 points")
    L = gk.arc_length(c)
    expected = lane.rate * frames_per_window / reference_frames
    n = max(0, int(round(expected + rng.uniform(-1.0, 1.0))))
    v_lane = lane_speed(lane, profile)
    merging = lane.role_class == "merge" and neighbor is not None and profile.merge_curve_strength > 0
    if merging:
        nb = gk.as_points(neighbor)
        L_nb = gk.arc_length(nb)
    out = []
    for k in range(n):
        f0 = window * frames_per_window + int(rng.integers(frames_per_window))
        v = v_lane * max(0.3, 1.0 + profile.speed_std * rng.standard_normal())
        s0 = rng.uniform(0.0, 0.3) * L
        s1 = rng.uniform(0.7, 1.0) * L
        steps = max(5, int(np.floor((s1 - s0) / v)) + 1)
        s = s0 + v * np.arange(steps)
        lat = rng.normal(scale=profile.lateral_jitter_std) if profile.lateral_jitter_std > 0 else 0.0
        yaw = rng.normal(scale=profile.heading_noise_std) if profile.heading_noise_std > 0 else 0.0
        pts, tan = gk.point_at_arclength(c, s)
        normal = np.c_[-tan[:, 1], tan[:, 0]]
        offset = lat + yaw * (s - s.mean())
        pts = pts + offset[:, None] * normal
        if merging:
            u = np.arange(steps) / max(steps - 1, 1)
            lam = profile.merge_curve_strength * _smoothstep((u - 0.5) / 0.5)
            target, _ = gk.point_at_arclength(nb, s / L * L_nb)
            pts = (1.0 - lam[:, None]) * pts + lam[:, None] * target
        out.append(
            Tracklet(
                tracklet_id=f"{lane.lane_id}_w{window:03d}_t{k:03d}",
                lane_id_truth=lane.lane_id,
                points=pts,
                frame_indices=f0 + np.arange(steps),
                window_index=window,
            )
        )
    return out


def _plan_groups(config: SceneConfig):
    """Group sizes and merge assignment for the whole scene."""
    rng = _rng(config.seed, 0)
    counts = config.group_counts()
    G = sum(counts)
    lo, hi = config.lanes_per_group_range
    cycle = np.arange(lo, hi + 1)
    sizes = np.resize(cycle, G)
    sizes = sizes[rng.permutation(G)]
    eligible = np.flatnonzero(sizes >= 3)
    n_merge = min(len(eligible), int(round(config.merge_fraction * sizes.sum())))
    merge = np.zeros(G, dtype=bool)
    if n_merge:
        merge[rng.choice(eligible, size=n_merge, replace=False)] = True
    plan, g = [], 0
    for cam, n_groups in enumerate(counts):
        for j in range(n_groups):
            plan.append((cam, j, int(sizes[g]), bool(merge[g])))
            g += 1
    return plan


def _make_view(camera_id: str, rng) -> CameraView:
    rotation = rng.uniform(0.0, 2 * np.pi)
    scale = (rng.uniform(0.78, 0.95), rng.uniform(0.78, 0.95))
    shear = rng.uniform(-0.15, 0.15)
    probe = CameraView(camera_id, rotation, scale, shear)
    center = np.array([0.5, 0.5])
    t = center - probe.matrix @ center + rng.uniform(-0.03, 0.03, size=2)
    return CameraView(camera_id, rotation, scale, shear, (float(t[0]), float(t[1])), rng.uniform(5e-4, 1.5e-3))


def _group_lanes(camera_id, group_idx, n_groups, size, has_merge, rng, n_points=48):
    """World-frame centerlines and structure for one lane group."""
    spacing = 0.27 if n_groups > 1 else 0.0
    center = np.array([0.5 + rng.uniform(-0.05, 0.05), 0.5 + spacing * (group_idx - (n_groups - 1) / 2)])
    length = rng.uniform(0.5, 0.65)
    width = rng.uniform(0.035, 0.055)
    heading0 = rng.uniform(-0.15, 0.15) + (np.pi if rng.uniform() < 0.5 else 0.0)
    kappa = rng.uniform(-0.6, 0.6)
    s = np.linspace(-length / 2, length / 2, n_points)
    heading = heading0 + kappa * s
    ds = s[1] - s[0]
    step = np.c_[np.cos(heading), np.sin(heading)] * ds
    base = np.cumsum(np.vstack([np.zeros((1, 2)), step[:-1]]), axis=0)
    base += center - base.mean(axis=0)
    normal = np.c_[-np.sin(heading), np.cos(heading)]
    offsets = [((size - 1) / 2.0 - i) * width for i in range(size)]
    gid = f"{camera_id}_g{group_idx}"
    lanes = []
    u = (s - s[0]) / (s[-1] - s[0])
    for i in range(size):
        merge = has_merge and i == size - 2
        off = np.full(n_points, offsets[i])
        if merge:
            # the merge centerline ends on its neighbor
            off = off + (offsets[size - 1] - offsets[i]) * _smoothstep((u - 0.5) / 0.5)
        line = base + off[:, None] * normal
        if size == 1:
            rank, left, right = 0.5, True, True
        else:
            rank, left, right = i / (size - 1), i == 0, i == size - 1
        role = "merge" if merge else "leftmost" if left else "rightmost" if right else "interior"
        lanes.append(
            LaneTruth(
                lane_id=f"{gid}_l{i}",
                group_id=gid,
                camera_id=camera_id,
                centerline_world=line,
                lateral_rank=float(rank),
                leftmost=bool(left),
                rightmost=bool(right),
                successor=not merge,
                group_size=size,
                role_class=role,
                neighbor_id=f"{gid}_l{size - 1}" if merge else None,
            )
        )
    return lanes


def camera_id_for(index: int) -> str:
    return f"cam{index:02d}"


def generate_scene(config: SceneConfig) -> SceneDataset:
    config.validate()
    plan = _plan_groups(config)
    counts = config.group_counts()
    kin = config.kinematics
    lo, hi = config.tracklets_per_lane_per_window_range
    cameras, lanes, tracklets = [], [], []
    for cam in range(config.n_cameras):
        cid = camera_id_for(cam)
        crc = _crc(cid)
        rng = _rng(config.seed, 1, crc)
        view = _make_view(cid, rng)
        cameras.append(view)
        cam_lanes = []
        for c, j, size, has_merge in plan:
            if c != cam:
                continue
            group = _group_lanes(cid, j, counts[cam], size, has_merge, rng)
            factor = 1.0 + rng.uniform(-kin.group_speed_spread, kin.group_speed_spread)
            for ln in group:
                ln.rate = float(rng.integers(lo, hi + 1))
                ln.speed_scale = float(factor)
                ln.centerline_camera = project_to_camera(ln.centerline_world, view, rng).astype(np.float32)
                ln.centerline_world = ln.centerline_world.astype(np.float32)
            cam_lanes.extend(group)
        by_id = {ln.lane_id: ln for ln in cam_lanes}
        for li, ln in enumerate(cam_lanes):
            nb = by_id[ln.neighbor_id].centerline_world if ln.neighbor_id else None
            for w in range(config.n_windows):
                trng = _rng(config.seed, 2, crc, li, w)
                for t in simulate_tracklets(
                    ln,
                    w,
                    kin,
                    trng,
                    frames_per_window=config.frames_per_window,
                    reference_frames=config.reference_frames,
                    neighbor=nb,
                ):
                    pts = project_to_camera(t.points, view, trng)
                    if len(pts) < 5:
                        continue
                    tracklets.append(replace(t, points=pts.astype(np.float32)))
        lanes.extend(cam_lanes)
    return SceneDataset(config=config, cameras=cameras, lanes=lanes, tracklets=tracklets)
