import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanerep import geomkit as gk


def dense_walk(p, n=100_000):
    """Walk ``n`` points interpolated along ``p`` and their running arc length."""
    p = np.asarray(p, float)
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    counts = np.maximum(1, np.round(n * seg / seg.sum()).astype(int))
    pts = []
    for a, b, c in zip(p[:-1], p[1:], counts):
        t = np.arange(c) / c
        pts.append(a + t[:, None] * (b - a))
    pts.append(p[-1:])
    pts = np.concatenate(pts)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    return pts, s


def test_resample_uniform_segment():
    out = gk.resample_arclength([(0, 0), (1, 0)], 3)
    np.testing.assert_allclose(out, [(0, 0), (0.5, 0), (1, 0)])


def test_resample_l_shape_against_dense_oracle():
    p = [(0, 0), (1, 0), (1, 1)]
    out = gk.resample_arclength(p, 5)
    pts, s = dense_walk(p)
    for target, got in zip([0, 0.5, 1.0, 1.5, 2.0], out):
        expected = pts[np.argmin(np.abs(s - target))]
        assert np.linalg.norm(expected - got) <= 1e-4


def test_resample_random_polylines_against_dense_oracle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        p = np.cumsum(rng.normal(size=(7, 2)), axis=0)
        out = gk.resample_arclength(p, 16)
        pts, s = dense_walk(p)
        targets = np.linspace(0, s[-1], 16)
        expected = pts[np.searchsorted(s, targets).clip(0, len(pts) - 1)]
        assert np.abs(out - expected).max() <= 1e-3 * s[-1]
        # on the polyline
        assert gk.points_to_polyline_distance(out, p).max() < 1e-9


def test_resample_default_shape_and_endpoints():
    p = np.array([(0.1, 0.2), (0.4, 0.25), (0.8, 0.9)])
    out = gk.resample_arclength(p)
    assert out.shape == (16, 2)
    np.testing.assert_array_equal(out[0], p[0])
    np.testing.assert_array_equal(out[-1], p[-1])
    # arc-length position of each output along the input polyline
    pts, s = dense_walk(p)
    pos = [s[np.argmin(np.linalg.norm(pts - q, axis=1))] for q in out]
    np.testing.assert_allclose(np.diff(pos), s[-1] / 15, atol=1e-4)


def test_resample_degenerate():
    out, flag = gk.resample_arclength([(0.3, 0.3), (0.3, 0.3)], 4, return_flag=True)
    assert flag
    np.testing.assert_array_equal(out, np.full((4, 2), 0.3))


def test_resample_idempotent():
    rng = np.random.default_rng(0)
    heading = np.cumsum(rng.uniform(-0.4, 0.4, size=15))
    steps = 0.05 * np.c_[np.cos(heading), np.sin(heading)]
    p = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    np.testing.assert_allclose(gk.resample_arclength(p, 16), p, atol=1e-9)


def test_point_to_polyline_basic():
    seg = [(0, 0), (1, 0)]
    assert gk.point_to_polyline_distance((0.3, 0.0), seg) == 0.0
    assert gk.point_to_polyline_distance((0.5, 1.0), seg) == pytest.approx(1.0)


def test_point_to_polyline_dense_oracle():
    rng = np.random.default_rng(1)
    p = np.cumsum(rng.normal(size=(6, 2)), axis=0)
    pts, _ = dense_walk(p, 10_000)
    for q in rng.normal(size=(20, 2)) * 2:
        oracle = np.linalg.norm(pts - q, axis=1).min()
        assert abs(gk.point_to_polyline_distance(q, p) - oracle) < 1e-3
    # much denser oracle reaches the stated 1e-4 agreement
    pts, _ = dense_walk(p, 200_000)
    q = np.array([0.4, -0.7])
    assert abs(gk.point_to_polyline_distance(q, p) - np.linalg.norm(pts - q, axis=1).min()) < 1e-4


def test_mean_tracklet_distance():
    seg = [(0, 0), (1, 0)]
    assert gk.mean_tracklet_distance([(0.2, 0), (0.7, 0)], seg) == 0.0
    assert gk.mean_tracklet_distance([(0.5, 0), (0.5, 1)], seg) == pytest.approx(0.5)
    rng = np.random.default_rng(2)
    t = rng.uniform(size=(12, 2))
    p = rng.uniform(size=(5, 2))
    oracle = np.mean([gk.point_to_polyline_distance(q, p) for q in t])
    assert gk.mean_tracklet_distance(t, p) == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(ValueError):
        gk.mean_tracklet_distance(np.zeros((0, 2)), p)


def test_signed_lateral_offset():
    c = [(0, 0), (1, 0)]
    xs = np.linspace(0.1, 0.9, 5)
    assert gk.signed_lateral_offset(np.c_[xs, 0 * xs], c) == 0.0
    assert gk.signed_lateral_offset(np.c_[xs, 0 * xs + 0.1], c) == pytest.approx(0.1)
    assert gk.signed_lateral_offset(np.c_[xs, 0 * xs - 0.1], c) == pytest.approx(-0.1)


def test_signed_offset_flips_under_reflection():
    rng = np.random.default_rng(5)
    c = np.c_[np.linspace(0, 1, 8), 0.1 * np.sin(np.linspace(0, 3, 8))]
    t = c[2:6] + rng.normal(scale=0.02, size=(4, 2))
    reflect = np.diag([1.0, -1.0])
    a = gk.signed_lateral_offset(t, c)
    b = gk.signed_lateral_offset(t @ reflect, c @ reflect)
    assert b == pytest.approx(-a)


def test_mean_curvature():
    line = np.c_[np.linspace(0, 1, 10), np.zeros(10)]
    assert gk.mean_curvature(line) == 0.0
    r = 2.5
    th = np.linspace(0, 2 * np.pi, 65)
    circle = r * np.c_[np.cos(th), np.sin(th)]
    assert gk.mean_curvature(circle) == pytest.approx(1 / r, rel=0.05)
    rng = np.random.default_rng(0)
    p = np.cumsum(rng.normal(size=(10, 2)), axis=0)
    assert gk.mean_curvature(p[::-1]) == pytest.approx(gk.mean_curvature(p), rel=1e-12)
    assert gk.mean_curvature([(0, 0), (1, 1)], return_flag=True) == (0.0, True)


def test_curvature_smoothness():
    line = np.c_[np.linspace(0, 1, 10), np.zeros(10)]
    assert gk.curvature_smoothness(line) == 0.0
    th = np.linspace(0, 1.0, 12)
    arc = np.c_[np.cos(th), np.sin(th)]
    assert gk.curvature_smoothness(arc) == pytest.approx(0.0, abs=1e-20)
    # zigzag whose turn angles alternate between +theta and -theta
    theta = 0.3
    pts = [np.zeros(2)]
    heading = 0.0
    for i in range(11):
        pts.append(pts[-1] + [np.cos(heading), np.sin(heading)])
        heading += theta if i % 2 == 0 else -theta
    assert gk.curvature_smoothness(np.array(pts)) == pytest.approx(theta**2)
    assert gk.curvature_smoothness([(0, 0), (1, 0)]) == 0.0


def test_chamfer():
    rng = np.random.default_rng(4)
    A = rng.uniform(size=(10, 2))
    assert gk.chamfer_distance(A, A) == 0.0
    assert gk.chamfer_distance([(0, 0)], [(1, 0)]) == 1.0
    B = rng.uniform(size=(10, 2))
    ab = np.mean([min(np.hypot(*(a - b)) for b in B) for a in A])
    ba = np.mean([min(np.hypot(*(b - a)) for a in A) for b in B])
    assert gk.chamfer_distance(A, B) == pytest.approx(0.5 * (ab + ba), abs=1e-15)
    assert gk.chamfer_distance(A, B) == gk.chamfer_distance(B, A)
    with pytest.raises(ValueError):
        gk.chamfer_distance(A, np.zeros((0, 2)))


def test_frechet_geometry_distance():
    rng = np.random.default_rng(6)
    G = rng.normal(size=(30, 16, 2))
    assert gk.frechet_geometry_distance(G, G) == pytest.approx(0.0, abs=1e-12)
    # unit-variance diagonal gaussians, mean shifted by delta in one coordinate
    base = np.array([[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]])
    delta = 0.7
    shifted = base + [delta, 0.0]
    assert gk.frechet_geometry_distance(shifted, base) == pytest.approx(delta**2)
    flat = G.reshape(30, -1)
    assert gk.frechet_geometry_distance(flat + delta, flat) == pytest.approx(32 * delta**2)
    with pytest.raises(ValueError):
        gk.frechet_geometry_distance(flat[:1], flat)


def test_smoothness_threshold():
    vals = np.arange(1, 101, dtype=float)
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    assert gk.smoothness_threshold(vals) == pytest.approx(med + 3 * (q3 - q1))


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.tuples(finite, finite), min_size=3, max_size=8),
    st.tuples(finite, finite),
    st.floats(0, 2 * np.pi),
    st.floats(0.1, 3.0),
)
def test_distance_invariances(poly, q, angle, scale):
    p = np.array(poly)
    q = np.array(q)
    R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    shift = np.array([0.3, -1.2])
    d0 = gk.point_to_polyline_distance(q, p)
    d1 = gk.point_to_polyline_distance(R @ q + shift, p @ R.T + shift)
    assert d1 == pytest.approx(d0, abs=1e-9)
    assert gk.point_to_polyline_distance(scale * q, scale * p) == pytest.approx(scale * d0, abs=1e-9)
    A = p[:2] + 0.1
    c0 = gk.chamfer_distance(A, p)
    assert gk.chamfer_distance(A @ R.T + shift, p @ R.T + shift) == pytest.approx(c0, abs=1e-9)
    assert gk.chamfer_distance(scale * A, scale * p) == pytest.approx(scale * c0, abs=1e-9)


def test_large_query_path_matches_direct():
    rng = np.random.default_rng(9)
    p = np.cumsum(rng.normal(scale=0.1, size=(48, 2)), axis=0)
    Q = rng.normal(scale=0.5, size=(3000, 2))
    direct, _, _ = gk._project_onto_segments(Q, p)
    np.testing.assert_allclose(gk.points_to_polyline_distance(Q, p), np.sqrt(direct.min(axis=1)), rtol=0, atol=1e-12)
    on_line = gk.resample_arclength(p, 200)
    assert gk.points_to_polyline_distance(on_line, p).max() < 1e-12
