import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vectorsense import beam, obstruction as ob, polarimetry as pol, sensing, tracking
from vectorsense.errors import (ConfigurationError, DegenerateError, DetectionError,
                                IntegrityError)

from conftest import WAVELENGTH, wrap_pi

STEP = 50e-6
DISK = ob.Obstacle(ob.Disk(0.3e-3), diffraction_scale=1.0)


@pytest.fixture(scope="module")
def ideal_lut(radial_small):
    return tracking.build_lut(radial_small, DISK, STEP, 0.6e-3)


@pytest.fixture(scope="module")
def asym_field(small_waist, small_geometry):
    return beam.imperfect_radial_mode(small_waist, WAVELENGTH, 0.0, small_geometry, 0.02, seed=3)


@pytest.fixture(scope="module")
def asym_lut(asym_field):
    return tracking.build_lut(tracking.Tomography.from_field(asym_field), DISK, STEP, 0.6e-3)


def _centre(lut):
    return lut.nearest_index(0.0, 0.0)


def _mirror(lut, iy, ix):
    return lut.ys.size - 1 - iy, lut.xs.size - 1 - ix


def _brute_channels(field, obstacle, n_sub=16):
    """Four channel powers from point-sampled masking on an n_sub-refined lattice."""
    g = field.geometry
    sub = (np.arange(n_sub) + 0.5) / n_sub - 0.5
    cov = np.zeros(g.shape)
    for sy in sub:
        for sx in sub:
            cov += obstacle.contains((g.x + sx * g.dx)[None, :], (g.y + sy * g.dy)[:, None])
    t = 1.0 - cov / n_sub ** 2
    out = []
    for phi in pol.CHANNEL_ANGLES:
        e = math.cos(phi) * field.ex + math.sin(phi) * field.ey
        out.append(float((t * np.abs(e) ** 2).sum() * g.pixel_area))
    return np.array(out)


# -- look-up tables ---------------------------------------------------------------------

def test_centred_disk_cell_is_unpolarized(ideal_lut):
    s = ideal_lut.stokes[_centre(ideal_lut)]
    assert abs(s[1]) < 1e-6 and abs(s[2]) < 1e-6
    assert (ideal_lut.expected >= 0).all()


def test_off_axis_cell_on_x_blocks_x_polarised_lobe(ideal_lut, radial_small):
    iy, ix = ideal_lut.nearest_index(0.3e-3, 0.0)
    s = ideal_lut.stokes[iy, ix]
    assert s[1] < 0 and abs(s[2]) < 1e-9
    brute = _brute_channels(radial_small, DISK.at(ob.Pose(*ideal_lut.position(iy, ix))))
    blocked = ideal_lut.open_power - brute
    np.testing.assert_allclose(ideal_lut.expected[iy, ix], brute, atol=2e-3 * blocked.max())


def test_tomography_lut_matches_ideal_lut(ideal_lut, radial_small, tmp_path):
    p = tmp_path / "tomo.vsa"
    tracking.save_tomography(p, tracking.Tomography.from_field(radial_small))
    lut = tracking.build_lut(tracking.load_tomography(p), DISK, STEP, 0.6e-3)
    assert lut.source == tracking.TOMOGRAPHY and ideal_lut.source == tracking.IDEAL
    np.testing.assert_allclose(lut.expected, ideal_lut.expected, atol=1e-6, rtol=0)


def test_lut_build_is_deterministic_and_thread_independent(radial_small, ideal_lut):
    again = tracking.build_lut(radial_small, DISK, STEP, 0.6e-3, threads=4)
    assert again.expected.tobytes() == ideal_lut.expected.tobytes()


def test_lut_file_roundtrip_and_corruption(ideal_lut, tmp_path):
    p = tmp_path / "lut.vsa"
    tracking.save_lut(p, ideal_lut)
    back = tracking.load_lut(p)
    np.testing.assert_array_equal(back.expected, ideal_lut.expected)
    assert back.grid_spec() == ideal_lut.grid_spec()
    assert back.obstacle == ideal_lut.obstacle.at(ob.Pose(0, 0, 0))
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0x10
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        tracking.load_lut(p)


def test_ideal_lut_is_half_turn_symmetric_and_asymmetric_lut_is_not(ideal_lut, asym_lut):
    assert ideal_lut.symmetry_residual() < 1e-6
    assert asym_lut.symmetry_residual() > 1e-3


def test_lut_build_errors(radial_small):
    with pytest.raises(ConfigurationError, match="larger than the grid"):
        tracking.build_lut(radial_small, ob.Obstacle(ob.Disk(6e-3)), STEP, 0.5e-3)
    with pytest.raises(ConfigurationError, match="exceed the field extent"):
        tracking.build_lut(radial_small, DISK, STEP, 3e-3)
    with pytest.raises(ConfigurationError):
        tracking.build_lut(radial_small, DISK, 0.0, 0.5e-3)
    with pytest.raises(ConfigurationError):
        tracking.build_lut("not a field", DISK, STEP, 0.5e-3)


# -- likelihood -------------------------------------------------------------------------

def test_exact_measurement_with_tiny_noise_maps_to_its_cell(asym_lut):
    iy, ix = asym_lut.nearest_index(0.2e-3, -0.35e-3)
    post = tracking.likelihood(asym_lut, asym_lut.expected[iy, ix], 1e-9)
    assert post.map_index == (iy, ix)
    assert not post.degenerate_flag


def test_ideal_mode_posterior_has_two_symmetric_islands(ideal_lut):
    iy, ix = ideal_lut.nearest_index(0.25e-3, 0.15e-3)
    post = tracking.likelihood(ideal_lut, ideal_lut.expected[iy, ix], 1e-9)
    assert post.degenerate_flag
    assert post.map_index in {(iy, ix), _mirror(ideal_lut, iy, ix)}
    assert post.probability[iy, ix] == pytest.approx(
        post.probability[_mirror(ideal_lut, iy, ix)], rel=1e-9)


def test_asymmetric_beam_posterior_has_a_single_island(asym_field, asym_lut):
    # Forward-simulate the imperfect beam on a table pose with noise well below the
    # ~1e-3 channel difference between the pose and its half-turn ghost.
    pose = ob.Pose(0.2e-3, 0.15e-3)
    clean = pol.intensities(asym_field, DISK.at(pose))
    ghost = asym_lut.expected[asym_lut.nearest_index(-pose.x0, -pose.y0)]
    assert np.abs(clean - ghost).max() > 5e-4
    sigma = 1e-4
    for seed in range(10):
        noisy = clean + sigma * np.random.default_rng(seed).standard_normal(4)
        post = tracking.likelihood(asym_lut, noisy, sigma)
        assert not post.degenerate_flag
        assert post.map_estimate == pytest.approx((pose.x0, pose.y0), abs=1e-9)


def test_likelihood_rejects_non_positive_sigma(ideal_lut):
    with pytest.raises(ConfigurationError):
        tracking.likelihood(ideal_lut, ideal_lut.expected[0, 0], 0.0)


@settings(max_examples=30, deadline=None)
@given(iy=st.integers(0, 24), ix=st.integers(0, 24), log_sigma=st.floats(-8, -2),
       seed=st.integers(0, 2 ** 16))
def test_posterior_normalization_and_credible_mass(asym_lut, iy, ix, log_sigma, seed):
    sigma = 10.0 ** log_sigma
    m = asym_lut.expected[iy, ix] + sigma * np.random.default_rng(seed).standard_normal(4)
    post = tracking.likelihood(asym_lut, m, sigma)
    assert post.probability.sum() == pytest.approx(1.0, abs=1e-9)
    region_mass = post.region_mass
    top = post.probability[post.credible_region].min()
    assert tracking.CREDIBLE_MASS - 1e-12 <= region_mass <= tracking.CREDIBLE_MASS + top + 1e-12
    assert post.credible_region[post.map_index]


def test_forward_inverse_consistency_over_every_cell(ideal_lut, asym_lut):
    for iy in range(ideal_lut.ys.size):
        for ix in range(ideal_lut.xs.size):
            post = tracking.likelihood(ideal_lut, ideal_lut.expected[iy, ix], 1e-10)
            assert post.map_index in {(iy, ix), _mirror(ideal_lut, iy, ix)}
            post = tracking.likelihood(asym_lut, asym_lut.expected[iy, ix], 1e-10)
            assert post.map_index == (iy, ix)


def test_best_fit_chi2_is_zero_on_table_entries(asym_lut):
    rows = asym_lut.expected.reshape(-1, 4)[::37]
    assert tracking.best_fit_chi2(asym_lut, rows, 1e-6).max() < 1e-12


# -- tracking ---------------------------------------------------------------------------

def test_static_noiseless_series_gives_constant_estimate(asym_lut):
    iy, ix = asym_lut.nearest_index(-0.1e-3, 0.2e-3)
    pts = tracking.track(asym_lut, np.tile(asym_lut.expected[iy, ix], (5, 1)), 1e-9)
    assert {(p.x, p.y) for p in pts} == {asym_lut.position(iy, ix)}


def test_half_plane_prior_excluding_truth_locks_onto_ghost(ideal_lut):
    iy, ix = ideal_lut.nearest_index(0.0, 0.3e-3)
    meas = np.tile(ideal_lut.expected[iy, ix], (3, 1))
    right = tracking.track(ideal_lut, meas, 1e-9, half_plane=math.pi / 2, continuity_scale=1e-4)
    wrong = tracking.track(ideal_lut, meas, 1e-9, half_plane=-math.pi / 2, continuity_scale=1e-4)
    assert all((p.x, p.y) == pytest.approx((0.0, 0.3e-3)) for p in right)
    assert all((p.x, p.y) == pytest.approx((0.0, -0.3e-3)) for p in wrong)


def test_infinite_continuity_scale_equals_per_sample_map(asym_lut):
    rng = np.random.default_rng(5)
    cells = [(3, 4), (12, 12), (20, 7), (9, 22)]
    sigma = 2e-4
    meas = np.array([asym_lut.expected[c] for c in cells]) + sigma * rng.standard_normal((4, 4))
    a = tracking.track(asym_lut, meas, sigma, continuity_scale=math.inf)
    b = tracking.track(asym_lut, meas, sigma, continuity_scale=None)
    maps = [tracking.likelihood(asym_lut, m, sigma).map_estimate for m in meas]
    assert [(p.x, p.y) for p in a] == maps == [(p.x, p.y) for p in b]
    assert [(p.x, p.y) for p in tracking.track(asym_lut, meas, sigma, continuity_scale=1e9)] \
        == maps


def test_dark_samples_give_null_estimates_carrying_last_region(asym_lut):
    good = asym_lut.expected[10, 10]
    meas = np.array([good, np.zeros(4), good])
    pts = tracking.track(asym_lut, meas, 1e-9, times=[0.0, 1.0, 2.0])
    assert pts[0].reliable and not pts[1].reliable and pts[2].reliable
    assert math.isnan(pts[1].x) and math.isnan(pts[1].y)
    assert pts[1].region_cells == pts[0].region_cells
    assert pts[1].contains(10, 10)
    with pytest.raises(ConfigurationError):
        tracking.track(asym_lut, np.zeros((0, 4)), 1e-9)


def test_track_csv(tmp_path, asym_lut):
    pts = tracking.track(asym_lut, np.array([asym_lut.expected[1, 2], np.zeros(4)]), 1e-9)
    p = tmp_path / "track.csv"
    tracking.write_track_csv(p, pts, ["seed 1"])
    lines = p.read_text().splitlines()
    assert lines[1] == "t,x0_hat,y0_hat,region_cell_count,degenerate_flag"
    assert lines[3].split(",")[1] == "nan"


# -- rotor ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def rotor(radial_small):
    bar = ob.Obstacle(ob.Bar(0.4e-3))

    def stokes(theta):
        return pol.stokes_from_intensities(*pol.intensities(radial_small,
                                                            bar.at(ob.Pose(0, 0, theta))))
    amp = tracking.rotor_amplitude([stokes(t) for t in np.linspace(0, math.pi, 16,
                                                                   endpoint=False)])
    return stokes, amp


def test_rotor_angle_of_axis_aligned_and_diagonal_bars(rotor):
    stokes, amp = rotor
    s = stokes(0.0)
    assert s.s1 < 0 and abs(s.s2) < 1e-12
    assert tracking.rotor_angle(s, amp) == pytest.approx(0.0, abs=1e-9) or \
        tracking.rotor_angle(s, amp) == pytest.approx(math.pi, abs=1e-9)
    s = stokes(math.pi / 4)
    assert abs(s.s1) < 1e-12 and s.s2 < 0
    assert tracking.rotor_angle(s, amp) == pytest.approx(math.pi / 4, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(theta=st.floats(0, 2 * math.pi), delta=st.floats(-math.pi, math.pi))
def test_rotor_estimate_is_rotation_equivariant(rotor, theta, delta):
    stokes, amp = rotor
    a = tracking.rotor_angle(stokes(theta), amp)
    b = tracking.rotor_angle(stokes(theta + delta), amp)
    assert 0 <= a < math.pi and 0 <= b < math.pi
    assert abs(wrap_pi(b - a - delta)) < math.radians(0.5)


def test_rotor_angle_below_floor_is_degenerate():
    with pytest.raises(DegenerateError):
        tracking.rotor_angle(pol.StokesVector(1.0, 1e-4, -1e-4), amplitude=0.2, floor=0.05)
    with pytest.raises(DegenerateError):
        tracking.rotor_angle(pol.StokesVector(1.0, 0.0, 0.0))
    with pytest.raises(DegenerateError):
        tracking.rotor_amplitude([pol.StokesVector(0.0, math.nan, math.nan, reliable=False)])


# -- knife edge -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def focused():
    width = 2.0e-6
    geom = beam.GridGeometry.centered(width, n=128, span=2.5)
    w0 = beam.calibrate_waist(width, "radial", WAVELENGTH, geom)
    return beam.radial_mode(w0, WAVELENGTH, 0.0, geom), width


def _knife(field, width, normal, speed=27.0, period=100e-12, hold=0.0):
    start = 3 * width
    n = (math.cos(normal), math.sin(normal))
    dur = 2 * start / speed
    p_open = ob.Pose(start * n[0], start * n[1], normal)
    p_shut = ob.Pose(-start * n[0], -start * n[1], normal)
    if hold:
        times = (0.0, dur, dur + hold, 2 * dur + hold)
        poses = (p_open, p_shut, p_shut, p_open)
    else:
        times, poses = (0.0, dur), (p_open, p_shut)
    traj = ob.Trajectory(times, poses)
    return sensing.synthesize(field, traj, ob.Obstacle(ob.HalfPlane()), sensing.ideal_channels(),
                              period, traj.end, 0)


def _series(trace):
    cal = trace.calibrated()
    return [pol.stokes_from_intensities(*cal.samples[:, k]) for k in range(cal.n_samples)]


def test_vertical_edge_transit_is_horizontal_motion(focused):
    d = tracking.knife_direction(_series(_knife(*focused, 0.0)))
    assert d.axis == "horizontal" and d.ambiguous_180 and not d.low_confidence
    assert d.s2_energy < 0.05 * d.s1_energy


def test_horizontal_edge_transit_is_vertical_motion(focused):
    d = tracking.knife_direction(_series(_knife(*focused, math.pi / 2)))
    assert d.axis == "vertical" and not d.low_confidence
    assert d.s2_energy < 0.05 * d.s1_energy


def test_opposite_motion_gives_same_axis(focused):
    a = tracking.knife_direction(_series(_knife(*focused, 0.0)))
    b = tracking.knife_direction(_series(_knife(*focused, math.pi)))
    assert a.axis == b.axis
    assert b.motion_angle == pytest.approx(a.motion_angle, abs=1e-6) or \
        abs(abs(b.motion_angle - a.motion_angle) - math.pi) < 1e-6


def test_diagonal_edge_is_low_confidence_with_comparable_energies(focused):
    d = tracking.knife_direction(_series(_knife(*focused, math.pi / 4)))
    assert d.low_confidence
    assert d.s2_energy > d.s1_energy
    assert d.motion_angle == pytest.approx(math.pi / 4, abs=math.radians(1))


@pytest.mark.parametrize("deg", [10, 30, 60, 80, 100, 170])
def test_motion_axis_follows_edge_normal(focused, deg):
    d = tracking.knife_direction(_series(_knife(*focused, math.radians(deg))))
    assert abs(wrap_pi(d.motion_angle - math.radians(deg))) < math.radians(2)
    assert d.axis == ("horizontal" if abs(wrap_pi(math.radians(deg))) < math.pi / 4
                      else "vertical")


def test_knife_direction_without_transition_is_an_error():
    flat = [pol.StokesVector(1.0, 0.0, 0.0)] * 10
    with pytest.raises(DetectionError):
        tracking.knife_direction(flat)
    half = [pol.StokesVector(1.0, 0.0, 0.0)] * 5 + [pol.StokesVector(0.5, -0.1, 0.0)] * 5
    with pytest.raises(DetectionError):
        tracking.knife_direction(half)


# -- trigger ----------------------------------------------------------------------------

def test_constant_trace_has_no_events():
    tr = sensing.TraceSet(1e-10, sensing.ideal_channels(), np.full((4, 5000), 0.5))
    assert tracking.trigger(tr) == []


def test_knife_transit_triggers_one_event_containing_the_fall(focused):
    tr = _knife(*focused, 0.0)
    events = tracking.trigger(tr)
    assert len(events) == 1
    s0 = tr.s0() / tr.s0()[0]
    t = tr.times
    # The running baseline lags slightly, so the start is checked against the 90 % crossing.
    fall = (t[np.flatnonzero(s0 < 0.90)[0]], t[np.flatnonzero(s0 < 0.05)[0]])
    assert events[0].t_start <= fall[0] and events[0].t_end >= fall[1]
    assert not events[0].truncated


def test_two_transits_one_microsecond_apart_give_two_events(focused):
    events = tracking.trigger(_knife(*focused, 0.0, hold=1e-6))
    assert len(events) == 2
    assert events[1].t_start - events[0].t_end > 0.5e-6


def test_trigger_rejects_thresholds_outside_unit_interval():
    tr = sensing.TraceSet(1e-10, sensing.ideal_channels(), np.ones((4, 10)))
    for thr, hys in [(0.0, 0.5), (1.0, 0.5), (0.1, 0.0), (0.1, 1.5)]:
        with pytest.raises(ConfigurationError):
            tracking.trigger(tr, thr, hys)


def _staircase(levels, n=400):
    s = np.repeat(np.asarray(levels, dtype=float), n) / 2
    return sensing.TraceSet(1e-10, sensing.ideal_channels(), np.vstack([s, s, s, s]))


@settings(max_examples=40, deadline=None)
@given(levels=st.lists(st.floats(0.05, 1.0), min_size=1, max_size=6),
       hi=st.floats(0.02, 0.9), lo_frac=st.floats(0.05, 1.0))
def test_lowering_the_threshold_never_loses_events(levels, hi, lo_frac):
    tr = _staircase([1.0] + levels)
    n_hi = len(tracking.trigger(tr, hi, settle_time=5e-9))
    n_lo = len(tracking.trigger(tr, hi * lo_frac, settle_time=5e-9))
    assert n_lo >= n_hi
