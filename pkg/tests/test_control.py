import math

import numpy as np
import pytest

from mindstack.autodiff import Tape
from mindstack.control import (FollowTheGapStack, PFConfig, ParticleFilterStack, StanleyGains,
                               TrackingErrors, follow_the_gap, init_belief, particle_filter,
                               pure_pursuit_law, pure_pursuit_steer, stanley_steer,
                               systematic_resample, tracking_errors)
from mindstack.pose import Pose
from mindstack.vehicle import World, run_lap
from mindstack.world import LidarScan, Trajectory, generate_track, raycast


@pytest.fixture(scope="module")
def oval():
    grid, traj = generate_track("oval")
    return World(grid, traj)


def _line():
    x = np.linspace(-5, 5, 101)
    return Trajectory(x, np.zeros_like(x), np.zeros_like(x), np.full_like(x, 2.0), closed=False)


# -- tracking errors -------------------------------------------------------------------

def test_cte_sign_convention():
    # positive cross-track error = vehicle to the right of the path direction
    e = tracking_errors(Pose(0.0, 0.5, 0.0), _line())
    assert e.e_cross == -0.5 and e.e_head == 0.0
    assert tracking_errors(Pose(0.0, -0.5, 0.0), _line()).e_cross == 0.5
    assert tracking_errors(Pose(0.0, 0.0, 0.3), _line()).e_head == pytest.approx(-0.3)


def _polyline_distance(px, py, traj):
    """Brute-force distance from a point to the closed polyline of waypoints."""
    x0, y0 = traj.x, traj.y
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0, 1)
    return float(np.min(np.hypot(x0 + t * dx - px, y0 + t * dy - py)))


def _heading_line_distance(px, py, traj):
    """Brute force: nearest waypoint by exhaustive search, distance to its heading line."""
    d = [math.hypot(px - x, py - y) for x, y in zip(traj.x, traj.y)]
    i = d.index(min(d))
    h = traj.heading[i]
    return abs(-(px - traj.x[i]) * math.sin(h) + (py - traj.y[i]) * math.cos(h))


def test_cte_matches_brute_force_oracles(oval):
    traj = oval.traj
    rng = np.random.default_rng(0)
    straight = np.abs(np.diff(traj.heading, append=traj.heading[0])) < 1e-12
    for _ in range(200):
        i = int(rng.integers(len(traj)))
        off = float(rng.normal(0, 0.3))
        h = traj.heading[i]
        px, py = traj.x[i] - off * math.sin(h), traj.y[i] + off * math.cos(h)
        e = tracking_errors(Pose(float(px), float(py), 0.0), traj)
        assert abs(abs(e.e_cross) - _heading_line_distance(px, py, traj)) < 1e-9
        if straight[i] and straight[i - 1] and abs(off) < 0.5:
            # on straight runs the heading line is the polyline itself
            assert abs(abs(e.e_cross) - _polyline_distance(px, py, traj)) < 1e-9


def test_cte_is_continuous_for_fixed_waypoint():
    traj = _line()
    ys = np.linspace(-0.3, 0.3, 61)
    vals = [tracking_errors(Pose(0.02, float(y), 0.0), traj).e_cross for y in ys]
    assert np.all(np.abs(np.diff(vals)) < 0.011)


def test_nearest_index_ties_low():
    traj = Trajectory([0.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1, 1, 1], closed=False)
    assert tracking_errors(Pose(0.5, 0.1, 0.0), traj).nearest_index == 0


# -- Stanley ----------------------------------------------------------------------------

def test_stanley_examples():
    g = StanleyGains(1.8, 1.3)
    assert stanley_steer(TrackingErrors(0.0, 0.0, 0), 2.0, g) == 0.0
    d = stanley_steer(TrackingErrors(0.1, 0.1, 0), 1.0, g)
    assert abs(d - (0.13 + math.atan(0.18))) < 1e-12
    assert d == pytest.approx(0.308092938, abs=1e-9)
    far = stanley_steer(TrackingErrors(0.1, 0.1, 0), 1e9, g)
    assert far == pytest.approx(0.13, abs=1e-9)
    assert stanley_steer(TrackingErrors(5.0, 0.0, 0), 1.0, g) == 0.41
    # speed floor keeps the ratio finite at standstill
    assert stanley_steer(TrackingErrors(0.01, 0.0, 0), 0.0, g) == pytest.approx(math.atan(0.18))


def test_stanley_steers_back_toward_the_path(oval):
    g = StanleyGains()
    for e in (-0.3, -0.01, 0.01, 0.3):
        assert math.copysign(1, stanley_steer(TrackingErrors(e, 0.0, 0), 2.0, g)) == math.copysign(1, e)
    # closing the loop: a vehicle displaced to the left steers right (negative delta)
    e = tracking_errors(Pose(0.0, 0.3, 0.0), _line())
    assert stanley_steer(e, 2.0, g) < 0


def test_stanley_monotone_in_cross_gain():
    vals = [stanley_steer(TrackingErrors(0.05, 0.0, 0), 2.0, StanleyGains(k, 1.3))
            for k in np.linspace(0.5, 5.0, 20)]
    assert np.all(np.diff(vals) > 0)


def test_stanley_gradients():
    rng = np.random.default_rng(0)
    for _ in range(50):
        e, h, v = rng.normal(0, 0.1), rng.normal(0, 0.05), rng.uniform(0.5, 3)
        ke, kh = rng.uniform(0.5, 3, 2)
        tape = Tape()
        n = {k: tape.leaf(np.array(val), name=k) for k, val in
             dict(e=e, h=h, ke=ke, kh=kh).items()}
        d = stanley_steer(TrackingErrors(n["e"], n["h"], 0), float(v), StanleyGains(n["ke"], n["kh"]),
                          delta_max=10.0)
        g = tape.backward(d)
        u = ke * e / v
        assert abs(g["e"] - ke / v / (1 + u * u)) < 1e-9
        assert abs(g["ke"] - e / v / (1 + u * u)) < 1e-9
        assert abs(g["h"] - kh) < 1e-12 and abs(g["kh"] - h) < 1e-12
    tape = Tape()
    e = tape.leaf(np.array(5.0), name="e")
    d = stanley_steer(TrackingErrors(e, 0.0, 0), 1.0, StanleyGains())
    assert float(tape.backward(d)["e"]) == 0.0


# -- Pure Pursuit --------------------------------------------------------------------------

def test_pure_pursuit_law():
    assert pure_pursuit_law(Pose(0.0, 0.0, 0.0), (1.0, 0.0), 1.0) == 0.0
    d = pure_pursuit_law(Pose(0.0, 0.0, 0.0), (0.0, 1.0), 1.0, 0.33, delta_max=math.pi)
    assert d == pytest.approx(math.atan(0.66), abs=1e-12)
    assert d == pytest.approx(0.583373, abs=1e-6)
    assert pure_pursuit_law(Pose(0.0, 0.0, 0.0), (0.0, -1.0), 1.0, delta_max=math.pi) == -d
    assert pure_pursuit_law(Pose(0.0, 0.0, 0.0), (0.0, 1.0), 1.0) == 0.41


def test_pure_pursuit_on_line():
    assert pure_pursuit_steer(Pose(0.0, 0.0, 0.0), _line(), 1.0) == 0.0
    assert pure_pursuit_steer(Pose(0.0, 0.2, 0.0), _line(), 1.0) < 0
    with pytest.raises(ValueError):
        pure_pursuit_steer(Pose(0.0, 0.0, 0.0), _line(), 0.0)


# -- Follow the Gap ------------------------------------------------------------------------

def test_ftg_crafted_scan():
    scan = LidarScan(np.array([1, 1, 1, 1, 1, 9, 9, 9, 1, 1, 1], float), math.pi, 10.0)
    g = follow_the_gap(scan, bubble_radius=0.1, safe_threshold=5.0, delta_max=math.pi)
    assert g.target_beam == 6 and not g.emergency
    assert g.delta == pytest.approx(scan.beam_angles(0.0)[6])


def test_ftg_symmetry_sign_and_emergency():
    sym = LidarScan(np.array([1, 1, 2, 4, 9, 9, 9, 4, 2, 1, 1], float), math.pi, 10.0)
    assert follow_the_gap(sym, 0.1, 3.0).delta == 0.0
    right_wall = LidarScan(np.array([1, 1, 1, 1, 1, 6, 8, 8, 8, 8, 8], float), math.pi, 10.0)
    assert follow_the_gap(right_wall, 0.1, 3.0).delta > 0
    closed = LidarScan(np.ones(11), math.pi, 10.0)
    g = follow_the_gap(closed, 0.1, 3.0)
    assert g.emergency and g.delta == 0.0
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = follow_the_gap(LidarScan(rng.uniform(0, 10, 54), 4.7, 10.0), 0.4, 2.5)
        assert abs(g.delta) <= 0.41


# -- particle filter ------------------------------------------------------------------------

def test_pf_degenerate_exact(oval):
    gt = Pose(float(oval.traj.x[0]), float(oval.traj.y[0]), float(oval.traj.heading[0]))
    scan = raycast(oval.grid, gt, 108)
    cfg = PFConfig(n_particles=50)
    b = init_belief(gt, cfg, np.random.default_rng(0), spread=False)
    res = particle_filter(b, (0.0, 0.0, 0.0), scan, oval.grid, cfg, np.random.default_rng(0))
    assert not res.degenerate
    assert res.estimate.x == pytest.approx(gt.x, abs=1e-12)
    assert res.estimate.y == pytest.approx(gt.y, abs=1e-12)
    assert res.estimate.theta == pytest.approx(gt.theta, abs=1e-12)


def test_pf_reinitializes_when_all_particles_leave_the_map(oval):
    cfg = PFConfig(n_particles=20)
    b = init_belief(Pose(-100.0, -100.0, 0.0), cfg, np.random.default_rng(0), spread=False)
    scan = raycast(oval.grid, oval.start_pose(), 108)
    res = particle_filter(b, (0.0, 0.0, 0.0), scan, oval.grid, cfg, np.random.default_rng(0))
    assert res.degenerate
    assert np.all(oval.grid.is_drivable(res.belief.particles[:, 0], res.belief.particles[:, 1]))


def test_systematic_resample():
    idx = systematic_resample(np.array([0.0, 1.0, 0.0]), np.random.default_rng(0))
    assert list(idx) == [1, 1, 1]
    idx = systematic_resample(np.full(4, 0.25), np.random.default_rng(0))
    assert list(idx) == [0, 1, 2, 3]


def _pf_lap(world, seed):
    return run_lap(ParticleFilterStack("stanley"), world, rng=np.random.default_rng(seed))


@pytest.mark.slow
def test_pf_regression_on_oval(oval):
    log = _pf_lap(oval, 0)
    assert log.outcome == "complete"
    err = np.hypot(log.column("x_est") - log.column("x_gt"), log.column("y_est") - log.column("y_gt"))
    assert float(np.mean(err[100:])) < 0.2
    again = _pf_lap(oval, 0)
    np.testing.assert_array_equal(np.array(again.rows), np.array(log.rows))


def test_ftg_stack_stops_on_emergency(oval):
    from mindstack.vehicle import VehicleState
    stack = FollowTheGapStack(safe_threshold=50.0)
    out = stack.step(oval, LidarScan(np.ones(108), 4.7, 10.0), VehicleState(oval.start_pose()), None)
    assert out.v == 0.0 and out.est is None
