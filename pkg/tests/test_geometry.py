import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flsmosaic.geometry import (
    BeamGeometry,
    Point2D,
    Pose2D,
    SphericalPoint,
    Transform2D,
    apply,
    bin_to_point,
    cartesian_to_spherical,
    cartesian_to_spherical_array,
    compose,
    invert,
    pose_chain,
    relative_transform,
    spherical_to_cartesian,
    spherical_to_cartesian_array,
    wrap_angle,
)

angles = st.floats(-10.0, 10.0, allow_nan=False)
coords = st.floats(-100.0, 100.0, allow_nan=False)
transforms = st.builds(lambda r, x, y: Transform2D(r, (x, y)), angles, coords, coords)


def _close(t1: Transform2D, t2: Transform2D, tol=1e-9):
    return abs(wrap_angle(t1.rotation - t2.rotation)) < tol and np.allclose(t1.translation, t2.translation, atol=tol)


def test_default_geometry_is_the_working_mode():
    g = BeamGeometry()
    assert (g.num_beams, g.samples_per_beam, g.max_range, g.min_range) == (256, 373, 15.0, 0.0)
    assert math.isclose(math.degrees(g.horizontal_fov), 130.0)
    assert g.shape == (373, 256)


@pytest.mark.parametrize("kw", [dict(num_beams=1), dict(samples_per_beam=1), dict(min_range=15.0),
                                dict(min_range=-1.0), dict(horizontal_fov=0.0), dict(horizontal_fov=math.pi)])
def test_geometry_rejects_invalid(kw):
    with pytest.raises(ValueError):
        BeamGeometry(**kw)


def test_spherical_axis_cases():
    assert spherical_to_cartesian(SphericalPoint(1, 0, 0)) == pytest.approx((1, 0, 0), abs=1e-15)
    assert spherical_to_cartesian(SphericalPoint(2, math.pi / 2, 0)) == pytest.approx((0, 2, 0), abs=1e-15)


def test_spherical_off_axis_direct_evaluation():
    r, th, ph = 2.0, math.pi / 4, math.pi / 6
    # cos(pi/4) = sqrt(2)/2, cos(pi/6) = sqrt(3)/2, sin(pi/6) = 1/2
    expected = (2 * math.sqrt(2) / 2 * math.sqrt(3) / 2, 2 * math.sqrt(2) / 2 * math.sqrt(3) / 2, 1.0)
    assert spherical_to_cartesian(SphericalPoint(r, th, ph)) == pytest.approx(expected, abs=1e-12)


def test_cartesian_to_spherical_cases():
    s = cartesian_to_spherical((1, 0, 0))
    assert (s.r, s.theta, s.phi) == pytest.approx((1, 0, 0))
    s = cartesian_to_spherical((0, 2, 0))
    assert (s.r, s.theta, s.phi) == pytest.approx((2, math.pi / 2, 0))


def test_origin_has_no_bearing():
    with pytest.raises(ValueError, match="undefined bearing"):
        cartesian_to_spherical((0, 0, 0))
    with pytest.raises(ValueError, match="undefined bearing"):
        cartesian_to_spherical_array(np.zeros((2, 3)))


def test_round_trip_random_points():
    rng = np.random.default_rng(1)
    n = 1000
    r = rng.uniform(1e-3, 100, n)
    th = rng.uniform(-math.pi + 1e-6, math.pi, n)
    ph = rng.uniform(-math.pi / 2 + 1e-6, math.pi / 2 - 1e-6, n)
    back = cartesian_to_spherical_array(spherical_to_cartesian_array(r, th, ph))
    assert np.abs(back - np.stack([r, th, ph], axis=1)).max() < 1e-9
    for i in range(0, n, 97):
        s = cartesian_to_spherical(spherical_to_cartesian(SphericalPoint(r[i], th[i], ph[i])))
        assert (s.r, s.theta, s.phi) == pytest.approx((r[i], th[i], ph[i]), abs=1e-9)


def test_imaging_plane_is_zero_elevation():
    g = BeamGeometry()
    u, v = g.bin_points()
    r = g.ranges()[:, None] * np.ones((1, g.num_beams))
    th = np.ones((g.samples_per_beam, 1)) * g.bearings()[None, :]
    xyz = spherical_to_cartesian_array(r, th, 0.0)
    assert np.array_equal(xyz[..., 0], u) and np.array_equal(xyz[..., 1], v)
    assert not xyz[..., 2].any()


def test_bin_to_point_boundaries():
    g = BeamGeometry()
    # 256 beams have no exact centre beam; use an odd count for the boresight case
    g_odd = BeamGeometry(num_beams=257)
    assert tuple(bin_to_point(128, 372, g_odd)) == pytest.approx((15.0, 0.0), abs=1e-12)
    p = bin_to_point(0, 372, g)
    assert tuple(p) == pytest.approx((15 * math.cos(math.radians(65)), -15 * math.sin(math.radians(65))), abs=1e-12)
    for beam in (0, 100, 255):
        assert tuple(bin_to_point(beam, 0, g)) == (0.0, 0.0)


def test_bin_to_point_matches_grid_and_rejects_bad_index():
    g = BeamGeometry(num_beams=16, samples_per_beam=9, min_range=1.0, max_range=5.0)
    u, v = g.bin_points()
    for beam in range(16):
        for sample in range(9):
            p = bin_to_point(beam, sample, g)
            assert (p.u, p.v) == pytest.approx((u[sample, beam], v[sample, beam]), abs=1e-12)
    for bad in ((-1, 0), (16, 0), (0, 9), (0, -1)):
        with pytest.raises(IndexError):
            bin_to_point(*bad, g)


def test_bin_to_point_injective():
    g = BeamGeometry(num_beams=32, samples_per_beam=20)
    u, v = g.bin_points()
    pts = np.round(np.stack([u[1:].ravel(), v[1:].ravel()], axis=1), 9)
    assert len({tuple(p) for p in pts}) == pts.shape[0]


def test_apply_examples():
    assert tuple(apply(Transform2D.identity(), (3, 4))) == (3, 4)
    assert tuple(apply(Transform2D(math.pi / 2), Point2D(1, 0))) == pytest.approx((0, 1), abs=1e-15)


def test_compose_matches_matrices():
    rng = np.random.default_rng(2)
    for _ in range(100):
        t1 = Transform2D(rng.uniform(-4, 4), tuple(rng.uniform(-10, 10, 2)))
        t2 = Transform2D(rng.uniform(-4, 4), tuple(rng.uniform(-10, 10, 2)))
        x = rng.uniform(-10, 10, 2)
        lhs = apply(compose(t1, t2), x)
        rhs = apply(t1, apply(t2, x))
        assert tuple(lhs) == pytest.approx(tuple(rhs), abs=1e-9)
        m = t1.matrix @ t2.matrix
        assert _close(Transform2D.from_matrix(m), compose(t1, t2))


@given(transforms, transforms, transforms)
def test_group_laws(a, b, c):
    assert _close(compose(compose(a, b), c), compose(a, compose(b, c)))
    assert _close(compose(a, invert(a)), Transform2D.identity())
    assert _close(compose(invert(a), a), Transform2D.identity())
    assert _close(compose(a, Transform2D.identity()), a)
    assert _close(compose(Transform2D.identity(), a), a)


@given(angles)
def test_wrap_angle_range(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(theta), abs_tol=1e-9)


def test_wrap_angle_branch_cut():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert Pose2D(0, 0, 3 * math.pi).theta == pytest.approx(math.pi)


@settings(max_examples=50)
@given(st.lists(transforms, min_size=1, max_size=8), coords, coords, angles)
def test_pose_chain_recovers_relative_transforms(ts, x, y, th):
    poses = pose_chain(ts, Pose2D(x, y, th))
    assert len(poses) == len(ts) + 1
    for t, p0, p1 in zip(ts, poses, poses[1:]):
        assert _close(relative_transform(p0, p1), t, tol=1e-7)


def test_pose_chain_moves_points_consistently():
    # a world point seen at x in frame t is seen at T x in frame t+1
    t = Transform2D(0.3, (-1.0, 0.5))
    p0, p1 = pose_chain([t], Pose2D(2.0, -1.0, 0.7))
    x = np.array([4.0, 1.5])
    world = p0.as_transform().apply_array(x)
    assert np.allclose(p1.as_transform().apply_array(np.array(tuple(apply(t, x)))), world, atol=1e-12)
