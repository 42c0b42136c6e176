import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vectorsense import beam, obstruction as ob
from vectorsense.errors import ConfigurationError, ParseError, RangeError


def _brute_coverage(obstacle, geom, n_sub=64):
    """Covered fraction from an ``n_sub x n_sub`` point lattice inside every pixel."""
    sub = (np.arange(n_sub) + 0.5) / n_sub - 0.5
    out = np.zeros(geom.shape)
    for sy in sub:
        ys = geom.y + sy * geom.dy
        for sx in sub:
            xs = geom.x + sx * geom.dx
            out += obstacle.contains(xs[None, :], ys[:, None])
    return out / n_sub ** 2


GEOM = beam.GridGeometry(24, 20, 1.0, 1.3)


@pytest.mark.parametrize("theta", [0.0, 0.3, math.pi / 4, 1.2, math.pi / 2, 2.5, 4.0])
def test_half_plane_coverage_matches_point_lattice(theta):
    o = ob.Obstacle(ob.HalfPlane(), ob.Pose(0.37, -0.81, theta))
    exact = ob.coverage(o, GEOM)
    # The lattice error is at most one sub-cell row along the edge: 2/64 of a pixel.
    assert np.abs(exact - _brute_coverage(o, GEOM)).max() < 2.0 / 64


@pytest.mark.parametrize("theta", [0.0, 0.6, math.pi / 4, 2.0])
def test_bar_coverage_matches_point_lattice(theta):
    o = ob.Obstacle(ob.Bar(3.3), ob.Pose(-0.4, 0.25, theta))
    assert np.abs(ob.coverage(o, GEOM) - _brute_coverage(o, GEOM)).max() < 4.0 / 64


def test_half_plane_through_grid_centre_covers_half():
    g = beam.GridGeometry(32, 32, 1.0, 1.0)
    for theta in (0.0, math.pi / 4, 1.0, 3.0):
        o = ob.Obstacle(ob.HalfPlane(), ob.Pose(0.0, 0.0, theta))
        assert ob.coverage(o, g).sum() == pytest.approx(512.0, abs=1e-9)


def test_diagonal_pixel_fraction_is_exact():
    # A 45-degree edge through a unit pixel centre halves it; offset by a quarter
    # diagonal it leaves the triangle area (1 - d*sqrt2)^2 / 2 with d = 0.25.
    g = beam.GridGeometry(8, 8, 1.0, 1.0)
    c = math.sqrt(0.5)
    x0, y0 = g.x[3], g.y[3]
    o = ob.Obstacle(ob.HalfPlane(), ob.Pose(x0, y0, math.pi / 4))
    assert ob.coverage(o, g)[3, 3] == pytest.approx(0.5, abs=1e-15)
    o = o.at(ob.Pose(x0 + 0.25 * c, y0 + 0.25 * c, math.pi / 4))
    want = (1 - 0.25 * math.sqrt(2)) ** 2 / 2
    assert ob.coverage(o, g)[3, 3] == pytest.approx(want, abs=1e-14)


def test_disk_coverage_area_and_window():
    g = beam.GridGeometry(128, 128, 1.0, 1.0)
    o = ob.Obstacle(ob.Disk(30.0), ob.Pose(3.3, -7.1), diffraction_scale=1.0)
    cov = ob.coverage(o, g)
    assert cov.sum() == pytest.approx(math.pi * 15.0 ** 2, rel=2e-3)
    rows, cols, frac = ob.coverage_window(o, g)
    full = np.zeros(g.shape)
    full[rows, cols] = frac
    np.testing.assert_array_equal(full, cov)


def test_diffraction_scale_enlarges_disk():
    o = ob.Obstacle(ob.Disk(1e-3), diffraction_scale=1.35)
    assert o.effective_diameter == pytest.approx(1.35e-3)
    with pytest.raises(ConfigurationError):
        ob.Obstacle(ob.Disk(1e-3), diffraction_scale=2.5)
    with pytest.raises(AttributeError):
        _ = ob.Obstacle(ob.Bar(1.0)).effective_diameter


def test_shapes_validate_sizes():
    with pytest.raises(ConfigurationError):
        ob.Disk(0.0)
    with pytest.raises(ConfigurationError):
        ob.Bar(-1.0)


def test_indicator_of_each_shape():
    disk = ob.Obstacle(ob.Disk(2.0), diffraction_scale=1.0)
    assert ob.indicator(disk, (0.5, 0.5)) == 1
    assert ob.indicator(disk, (1.5, 0.0)) == 0
    bar = ob.Obstacle(ob.Bar(1.0), ob.Pose(0, 0, math.pi / 2))
    assert ob.indicator(bar, (0.2, 100.0)) == 1
    assert ob.indicator(bar, (0.7, 0.0)) == 0
    edge = ob.Obstacle(ob.HalfPlane(), ob.Pose(1.0, 0.0, 0.0))
    assert ob.indicator(edge, (2.0, -5.0)) == 1
    assert ob.indicator(edge, (0.5, 0.0)) == 0
    assert ob.indicator(edge.complemented(), (0.5, 0.0)) == 1


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(["disk", "bar", "half"]),
       x0=st.floats(-10, 10), y0=st.floats(-10, 10), theta=st.floats(0, 2 * math.pi))
def test_coverage_is_a_fraction_and_complements_sum_to_one(kind, x0, y0, theta):
    shape = {"disk": ob.Disk(7.0), "bar": ob.Bar(2.5), "half": ob.HalfPlane()}[kind]
    o = ob.Obstacle(shape, ob.Pose(x0, y0, theta))
    c = ob.coverage(o, GEOM)
    assert c.min() >= 0.0 and c.max() <= 1.0
    np.testing.assert_allclose(c + ob.coverage(o.complemented(), GEOM), 1.0, atol=1e-12)


def test_none_obstacle_covers_nothing(radial_small):
    assert not ob.coverage(None, radial_small.geometry).any()
    assert ob.apply(None, radial_small) is radial_small


def test_apply_scales_intensity_linearly(radial_small):
    o = ob.Obstacle(ob.Bar(0.2e-3), ob.Pose(0.1e-3, 0.0, 0.4))
    cov = ob.coverage(o, radial_small.geometry)
    masked = ob.apply(o, radial_small)
    np.testing.assert_allclose(masked.intensity, (1 - cov) * radial_small.intensity,
                               rtol=1e-12, atol=1e-300)


def test_pose_rotation():
    p = ob.Pose(1.0, 0.0, 0.1).rotated(math.pi / 2)
    assert (p.x0, p.y0, p.theta) == pytest.approx((0.0, 1.0, 0.1 + math.pi / 2))


def test_linear_trajectory_interpolates_centre_and_shortest_arc():
    tr = ob.Trajectory((0.0, 1.0), (ob.Pose(0, 0, 3.0), ob.Pose(2.0, -4.0, -3.0)))
    p = ob.pose_at(tr, 0.5)
    assert (p.x0, p.y0) == pytest.approx((1.0, -2.0))
    # 3.0 -> -3.0 the short way round passes through pi.
    assert p.theta == pytest.approx(3.0 + (2 * math.pi - 6.0) / 2)


def test_step_trajectory_holds_poses():
    poses = (ob.Pose(0, 0), ob.Pose(1, 0), ob.Pose(2, 0))
    tr = ob.Trajectory((0.0, 1.0, 2.0), poses, "step")
    assert ob.pose_at(tr, 0.999).x0 == 0
    assert ob.pose_at(tr, 1.0).x0 == 1
    assert ob.pose_at(tr, 2.0).x0 == 2


def test_trajectory_bounds_and_validation():
    tr = ob.Trajectory((0.0, 1.0), (ob.Pose(), ob.Pose(1.0)))
    with pytest.raises(RangeError):
        ob.pose_at(tr, 1.5)
    with pytest.raises(RangeError):
        ob.pose_at(tr, -1e-9)
    with pytest.raises(ConfigurationError):
        ob.Trajectory((0.0, 0.0), (ob.Pose(), ob.Pose()))
    with pytest.raises(ConfigurationError):
        ob.Trajectory((), ())
    with pytest.raises(ConfigurationError):
        ob.Trajectory((0.0,), (ob.Pose(),), "cubic")


def test_trajectory_file_roundtrip(tmp_path):
    tr = ob.Trajectory((0.0, 0.5, 1.25), (ob.Pose(0.1, 0.2, 0.3), ob.Pose(-1e-3, 2e-3, 0.0),
                                          ob.Pose(1e-9, 0.0, 6.0)))
    p = tmp_path / "traj.json"
    ob.save_trajectory(p, tr)
    assert ob.load_trajectory(p) == tr


def test_trajectory_file_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("[{\"t\": 0.0,\n \"x0\": }]")
    with pytest.raises(ParseError, match=":2:"):
        ob.load_trajectory(p)
    p.write_text(json.dumps([{"x0": 1.0}]))
    with pytest.raises(ParseError, match="record 0"):
        ob.load_trajectory(p)
    p.write_text(json.dumps({"t": 0}))
    with pytest.raises(ParseError):
        ob.load_trajectory(p)
