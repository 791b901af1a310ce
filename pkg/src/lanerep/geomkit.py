"""Polyline and trajectory geometry.

All functions take ``(n, 2)`` float arrays in a planar frame (image-normalized
coordinates in practice) and are pure.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def as_points(p) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) point array, got shape {a.shape}")
    return a


def segment_lengths(p) -> np.ndarray:
    p = as_points(p)
    return np.linalg.norm(np.diff(p, axis=0), axis=1)


def arc_length(p) -> float:
    return float(segment_lengths(p).sum())


def resample_arclength(p, K: int = 16, return_flag: bool = False):
    """Resample a polyline to ``K`` points equally spaced in arc length.

    The first and last outputs are the polyline endpoints. A zero-length
    polyline yields ``K`` copies of its single location; pass
    ``return_flag=True`` to receive ``(points, degenerate)``.
    """
    p = as_points(p)
    if K < 2:
        raise ValueError("K must be >= 2")
    if len(p) < 2:
        raise ValueError("polyline needs at least 2 points")
    seg = segment_lengths(p)
    total = seg.sum()
    if total <= _EPS:
        out = np.repeat(p[:1], K, axis=0)
        return (out, True) if return_flag else out
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, total, K)
    # index of the segment that contains each target arc length
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    # skip zero-length segments by advancing to a segment with positive length
    seg_len = seg[idx]
    frac = np.where(seg_len > 0, (targets - cum[idx]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    out = p[idx] + frac[:, None] * (p[idx + 1] - p[idx])
    out[0] = p[0]
    out[-1] = p[-1]
    return (out, False) if return_flag else out


def _project_onto_segments(q: np.ndarray, p: np.ndarray):
    """Nearest points of every query on every segment.

    Returns ``(dist2, foot, seg_dir)`` with shapes ``(m, s)``, ``(m, s, 2)``
    and ``(s, 2)``.
    """
    a = p[:-1]
    d = p[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    rel = q[:, None, :] - a[None, :, :]
    t = np.einsum("msk,sk->ms", rel, d) / np.where(dd > 0, dd, 1.0)
    t = np.clip(t, 0.0, 1.0)
    foot = a[None, :, :] + t[..., None] * d[None, :, :]
    dist2 = np.sum((q[:, None, :] - foot) ** 2, axis=-1)
    return dist2, foot, d


def points_to_polyline_distance(Q, p) -> np.ndarray:
    """Distance from each row of ``Q`` to the nearest point of polyline ``p``."""
    Q = as_points(Q)
    p = as_points(p)
    if len(p) == 1:
        return np.linalg.norm(Q - p[0], axis=1)
    if len(Q) * (len(p) - 1) <= 4096:
        dist2, _, _ = _project_onto_segments(Q, p)
        return np.sqrt(dist2.min(axis=1))
    return _distance_large(Q, p)


def _distance_large(Q: np.ndarray, p: np.ndarray, n_candidates: int = 3) -> np.ndarray:
    """Shortlist segments with a matrix-product distance, then solve exactly.

    The expanded form loses ~1e-8 to cancellation, so it only ranks segments;
    the returned distance is recomputed directly on the shortlisted ones.
    """
    a = p[:-1]
    d = p[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    safe = np.where(dd > 0, dd, 1.0)
    qd = Q @ d.T - np.einsum("ij,ij->i", a, d)
    t = np.clip(qd / safe, 0.0, 1.0)
    rr = np.einsum("ij,ij->i", Q, Q)[:, None] - 2.0 * Q @ a.T + np.einsum("ij,ij->i", a, a)
    approx = rr - 2.0 * t * qd + t * t * dd
    c = min(n_candidates, len(a))
    idx = np.argpartition(approx, c - 1, axis=1)[:, :c]
    ac, dc, ddc = a[idx], d[idx], safe[idx]
    rel = Q[:, None, :] - ac
    tc = np.clip(np.einsum("mck,mck->mc", rel, dc) / ddc, 0.0, 1.0)
    off = rel - tc[..., None] * dc
    return np.sqrt(np.einsum("mck,mck->mc", off, off).min(axis=1))


def point_to_polyline_distance(q, p) -> float:
    q = np.asarray(q, dtype=np.float64).reshape(1, 2)
    return float(points_to_polyline_distance(q, p)[0])


def mean_tracklet_distance(t, p) -> float:
    t = as_points(t)
    if len(t) == 0:
        raise ValueError("empty tracklet")
    return float(points_to_polyline_distance(t, p).mean())


def signed_offsets(Q, centerline) -> np.ndarray:
    """Signed perpendicular offset of each point; left of travel is positive."""
    Q = as_points(Q)
    c = as_points(centerline)
    if len(c) < 2:
        raise ValueError("centerline needs at least 2 points")
    dist2, foot, d = _project_onto_segments(Q, c)
    j = np.argmin(dist2, axis=1)
    rows = np.arange(len(Q))
    off = Q - foot[rows, j]
    tangent = d[j]
    cross = tangent[:, 0] * off[:, 1] - tangent[:, 1] * off[:, 0]
    return np.sign(cross) * np.sqrt(dist2[rows, j])


def signed_lateral_offset(t, centerline) -> float:
    t = as_points(t)
    if len(t) == 0:
        raise ValueError("empty tracklet")
    return float(signed_offsets(t, centerline).mean())


def _dedupe(p: np.ndarray) -> np.ndarray:
    keep = np.ones(len(p), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(p, axis=0), axis=1) > _EPS
    return p[keep]


def heading_changes(p) -> np.ndarray:
    """Signed turn angles at interior vertices, in radians."""
    p = _dedupe(as_points(p))
    if len(p) < 3:
        return np.zeros(0)
    d = np.diff(p, axis=0)
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    dot = np.einsum("ij,ij->i", d[:-1], d[1:])
    return np.arctan2(cross, dot)


def mean_curvature(p, return_flag: bool = False):
    """Mean |turn angle| over mean adjacent segment length at interior vertices.

    Fewer than 3 distinct points give 0 (flagged degenerate).
    """
    q = _dedupe(as_points(p))
    if len(q) < 3:
        return (0.0, True) if return_flag else 0.0
    ang = np.abs(heading_changes(q))
    seg = np.linalg.norm(np.diff(q, axis=0), axis=1)
    local = 0.5 * (seg[:-1] + seg[1:])
    val = float(np.mean(ang / local))
    return (val, False) if return_flag else val


def curvature_smoothness(p) -> float:
    """Population variance of the signed heading changes along ``p``."""
    h = heading_changes(p)
    if len(h) == 0:
        return 0.0
    return float(np.var(h))


def smoothness_threshold(reference_smoothness) -> float:
    """Outlier cut: median + 3 * IQR of the reference smoothness values."""
    r = np.asarray(reference_smoothness, dtype=np.float64)
    q1, med, q3 = np.percentile(r, [25, 50, 75])
    return float(med + 3.0 * (q3 - q1))


def chamfer_distance(A, B) -> float:
    A = as_points(A)
    B = as_points(B)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer distance of an empty point set")
    d = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def frechet_geometry_distance(gen, ref) -> float:
    """Frechet distance between diagonal Gaussians fitted to flattened geometries.

    ``gen`` and ``ref`` are stacks of geometries, ``(n, K, 2)`` or ``(n, 2K)``.
    With diagonal covariances the trace term reduces to the squared difference
    of per-coordinate standard deviations.
    """
    g = np.asarray(gen, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    g = g.reshape(len(g), -1)
    r = r.reshape(len(r), -1)
    if len(g) < 2 or len(r) < 2:
        raise ValueError("need at least 2 geometries per set")
    if g.shape[1] != r.shape[1]:
        raise ValueError("geometry dimensions differ")
    mu = g.mean(axis=0) - r.mean(axis=0)
    sg = g.std(axis=0, ddof=1)
    sr = r.std(axis=0, ddof=1)
    return float(mu @ mu + np.sum((sg - sr) ** 2))


def point_at_arclength(p, s):
    """Points and unit tangents of polyline ``p`` at arc lengths ``s``.

    Arc lengths are clipped to ``[0, arc_length(p)]``.
    """
    p = as_points(p)
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    seg = segment_lengths(p)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.clip(s, 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    d = p[idx + 1] - p[idx]
    L = np.where(seg[idx] > 0, seg[idx], 1.0)
    frac = np.clip((s - cum[idx]) / L, 0.0, 1.0)
    pts = p[idx] + frac[:, None] * d
    tangent = d / L[:, None]
    return pts, tangent
