import math

import numpy as np
import pytest

from mindstack import kernels, _raycast_py
from mindstack.pose import Pose
from mindstack.world import (DRIVABLE, OCCUPIED, UNKNOWN, LidarScan, MapError, OccupancyGrid, SensorConfig,
                             Trajectory, add_scan_noise, free_poses, generate_track, grid_from_gray,
                             grid_to_gray, load_map, load_pgm, load_waypoints, raycast, read_map_meta,
                             read_pgm, save_waypoints, turn_radii, write_map_meta, write_pgm)

from helpers import march, ring_corridor


# -- PGM and metadata ---------------------------------------------------------------

def test_p2_example_with_row_flip(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_text("P2\n2 2\n255\n255 0\n0 255\n")
    g = load_pgm(p, 0.5)
    assert g.drivable_count() == 2
    # image row 0 is the top (max y); world row 0 is the bottom
    drivable = {tuple(c) for c in g.drivable_cells()}
    assert drivable == {(1, 0), (0, 1)}
    assert g.is_drivable(0.25, 0.75) and g.is_drivable(0.75, 0.25)
    assert not g.is_drivable(0.25, 0.25)


def test_p5_and_p2_agree_with_comments_and_16_bit(tmp_path):
    img = np.array([[0, 255, 128], [255, 255, 0]])
    write_pgm(tmp_path / "a.pgm", img)
    (tmp_path / "b.pgm").write_text("P2\n# comment line\n3 # inline\n2\n255\n0 255 128\n255 255 0\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm"), img)
    big = (img * 257).astype(">u2")
    (tmp_path / "c.pgm").write_bytes(b"P5 3 2 65535\n" + big.tobytes())
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), img * 257)


@pytest.mark.parametrize("content,match", [
    (b"P3\n1 1\n255\n0\n", "magic"),
    (b"P2\n0 2\n255\n", "zero dimensions"),
    (b"P2\nx 2\n255\n0 0\n", "malformed"),
    (b"P5\n4 4\n255\n\x00", "truncated"),
])
def test_pgm_errors(tmp_path, content, match):
    p = tmp_path / "bad.pgm"
    p.write_bytes(content)
    with pytest.raises(MapError, match=match):
        read_pgm(p)


def test_all_black_map_is_rejected(tmp_path):
    write_pgm(tmp_path / "black.pgm", np.zeros((4, 4)))
    with pytest.raises(MapError, match="no drivable cells"):
        load_pgm(tmp_path / "black.pgm", 0.1)


def test_unknown_gray_levels_block_like_occupied():
    g = grid_from_gray(np.array([[255, 205, 0]]), 1.0)
    assert list(g.cells[0]) == [DRIVABLE, UNKNOWN, OCCUPIED]
    r = raycast(g, Pose(0.5, 0.5, 0.0), n_beams=3, fov=0.2, max_range=10.0)
    assert r.ranges[1] == pytest.approx(0.5)


def test_generated_map_round_trips_through_pgm(tmp_path):
    grid, _ = generate_track("oval", scale=0.6)
    write_pgm(tmp_path / "o.pgm", grid_to_gray(grid))
    write_map_meta(tmp_path / "o.meta", grid)
    back = load_map(tmp_path / "o.pgm")
    assert back.drivable_count() == grid.drivable_count()
    np.testing.assert_array_equal(back.cells, grid.cells)
    assert back.origin == grid.origin and back.resolution == grid.resolution
    meta = read_map_meta(tmp_path / "o.meta")
    assert meta["drivable_threshold"] == 250


def test_ring_corridor_count_survives_pgm(tmp_path):
    g = ring_corridor()
    write_pgm(tmp_path / "r.pgm", grid_to_gray(g))
    assert load_pgm(tmp_path / "r.pgm", 0.1).drivable_count() == g.drivable_count()


def test_meta_missing_resolution(tmp_path):
    (tmp_path / "m.meta").write_text("origin_x=0\n")
    with pytest.raises(MapError, match="resolution"):
        read_map_meta(tmp_path / "m.meta")


# -- raycasting -----------------------------------------------------------------------

def _room(size_m=10.0, res=0.1):
    n = int(round(size_m / res))
    return OccupancyGrid(np.ones((n, n), dtype=np.uint8), res, (0.0, 0.0))


def test_empty_room_beam_ahead():
    g = _room()
    scan = raycast(g, Pose(5.0, 5.0, 0.0), n_beams=3, fov=math.pi, max_range=10.0)
    assert abs(scan.ranges[1] - 5.0) <= g.resolution
    assert scan.ranges[0] == pytest.approx(5.0) and scan.ranges[2] == pytest.approx(5.0)


def test_range_is_capped():
    g = _room(30.0)
    scan = raycast(g, Pose(15.0, 15.0, 0.0), n_beams=2, fov=math.pi, max_range=10.0)
    assert np.all(scan.ranges == 10.0)


def test_beam_angle_convention():
    s = LidarScan(np.zeros(5), math.pi, 10.0)
    np.testing.assert_allclose(s.beam_angles(0.3), 0.3 - math.pi / 2 + np.arange(5) * math.pi / 4)


def test_raycast_rejects_blocked_pose():
    g = ring_corridor()
    with pytest.raises(MapError):
        raycast(g, Pose(0.0, 0.0, 0.0))
    with pytest.raises(MapError):
        raycast(g, Pose(100.0, 0.0, 0.0))


def _random_drivable_poses(grid, n, rng):
    poses = free_poses(grid, rng)
    pick = rng.choice(len(poses), n, replace=False)
    return [poses[i] for i in pick]


def test_raycast_matches_fine_marcher_on_ring():
    """A very fine marcher converges to the exact traversal (ray/corner clips included)."""
    g = ring_corridor()
    rng = np.random.default_rng(0)
    sensor = SensorConfig(n_beams=36)
    for pose in _random_drivable_poses(g, 20, rng):
        scan = raycast(g, pose, sensor.n_beams, sensor.fov, sensor.max_range)
        for r, a in zip(scan.ranges, scan.beam_angles(pose.theta)):
            m = march(g, pose.x, pose.y, a, sensor.max_range, step=1e-4)
            assert abs(r - m) <= 1e-4 + 1e-9


def test_backends_agree():
    g, _ = generate_track("hairpin")
    rng = np.random.default_rng(3)
    poses = _random_drivable_poses(g, 50, rng)
    off = SensorConfig().beam_offsets()
    xs = np.repeat([p.x for p in poses], len(off))
    ys = np.repeat([p.y for p in poses], len(off))
    ang = (np.array([p.theta for p in poses])[:, None] + off[None]).ravel()
    args = (g.free, g.origin[0], g.origin[1], g.resolution, xs, ys, ang, 10.0)
    np.testing.assert_allclose(kernels.raycast_many(*args), _raycast_py.raycast_many(*args),
                               rtol=0, atol=1e-12)


def test_mirrored_poses_give_reversed_scans():
    g = ring_corridor()
    rng = np.random.default_rng(4)
    for p in _random_drivable_poses(g, 30, rng):
        a = raycast(g, p, 54).ranges
        b = raycast(g, Pose(p.x, -p.y, -p.theta), 54).ranges
        np.testing.assert_allclose(a, b[::-1], rtol=0, atol=1e-9)


def test_removing_an_obstacle_never_shortens_a_beam():
    g = ring_corridor()
    rng = np.random.default_rng(5)
    poses = _random_drivable_poses(g, 20, rng)
    cells = g.cells.copy()
    occ = np.argwhere(cells == OCCUPIED)
    for iy, ix in occ[rng.choice(len(occ), 300, replace=False)]:
        cells[iy, ix] = DRIVABLE
    opened = OccupancyGrid(cells, g.resolution, g.origin)
    for p in poses:
        assert np.all(raycast(opened, p).ranges >= raycast(g, p).ranges)


# -- scan noise -----------------------------------------------------------------------------

def test_zero_noise_is_identity():
    s = LidarScan(np.linspace(0, 10, 7), 1.0, 10.0)
    out = add_scan_noise(s, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.ranges, s.ranges)


def test_noise_std_and_clamping():
    s = LidarScan(np.full(1_000_000, 5.0), 1.0, 10.0)
    out = add_scan_noise(s, 0.25, np.random.default_rng(0))
    assert 0.2475 <= float(np.std(out.ranges)) <= 0.2525
    top = LidarScan(np.full(1000, 10.0), 1.0, 10.0)
    assert np.all(add_scan_noise(top, 0.25, np.random.default_rng(1)).ranges <= 10.0)
    a = add_scan_noise(top, 0.25, np.random.default_rng(2)).ranges
    b = add_scan_noise(top, 0.25, np.random.default_rng(2)).ranges
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        add_scan_noise(s, -1.0, np.random.default_rng(0))


# -- free poses -------------------------------------------------------------------------------

def test_single_cell_map():
    cells = np.zeros((5, 5), dtype=np.uint8)
    cells[2, 3] = DRIVABLE
    g = OccupancyGrid(cells, 0.2, (1.0, -1.0))
    poses = free_poses(g, np.random.default_rng(0))
    assert len(poses) == 1
    ix, iy = g.cell_of(poses[0].x, poses[0].y)
    assert (int(ix), int(iy)) == (3, 2)


def test_free_poses_cover_every_cell_once():
    g = ring_corridor()
    poses = free_poses(g, np.random.default_rng(0))
    assert len(poses) == g.drivable_count()
    xs = np.array([p.x for p in poses])
    ys = np.array([p.y for p in poses])
    assert np.all(g.is_drivable(xs, ys))
    ix, iy = g.cell_of(xs, ys)
    assert len(set(zip(ix.tolist(), iy.tolist()))) == len(poses)
    th = np.array([p.theta for p in poses])
    assert np.all((th > -math.pi) & (th <= math.pi))
    again = free_poses(g, np.random.default_rng(0))
    assert again == poses


# -- trajectories and tracks -----------------------------------------------------------------------

def test_trajectory_validation():
    with pytest.raises(ValueError, match="distinct"):
        Trajectory([0, 0, 1], [0, 0, 0], [0, 0, 0], [1, 1, 1])
    with pytest.raises(ValueError, match="positive"):
        Trajectory([0, 1], [0, 0], [0, 0], [1, 0])
    t = Trajectory([0, 1, 1], [0, 0, 1], [0, 0, 0], [1, 1, 1], closed=True)
    assert t.length == pytest.approx(2 + math.sqrt(2))
    np.testing.assert_allclose(t.arc_length, [0, 1, 2])


def test_nearest_index_ties_go_to_lower_index():
    t = Trajectory([0.0, 2.0], [0.0, 0.0], [0, 0], [1, 1], closed=False)
    assert t.nearest_index(1.0, 0.0) == 0


def test_waypoint_csv_round_trip(tmp_path):
    _, traj = generate_track("chicane")
    save_waypoints(tmp_path / "w.csv", traj)
    assert (tmp_path / "w.csv").read_text().splitlines()[0] == "x,y,heading,velocity"
    back = load_waypoints(tmp_path / "w.csv")
    for k in ("x", "y", "heading", "velocity"):
        np.testing.assert_array_equal(getattr(back, k), getattr(traj, k))
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        load_waypoints(tmp_path / "bad.csv")


def _distance_to_occupied(grid, x, y):
    occ = np.argwhere(grid.cells != DRIVABLE)  # (iy, ix)
    x0 = grid.origin[0] + occ[:, 1] * grid.resolution
    y0 = grid.origin[1] + occ[:, 0] * grid.resolution
    dx = np.maximum.reduce([x0 - x, np.zeros_like(x0), x - (x0 + grid.resolution)])
    dy = np.maximum.reduce([y0 - y, np.zeros_like(y0), y - (y0 + grid.resolution)])
    return float(np.min(np.hypot(dx, dy)))


def test_oval_waypoints_keep_clear_of_walls():
    grid, traj = generate_track("oval", width=2.0)
    d = min(_distance_to_occupied(grid, x, y) for x, y in zip(traj.x, traj.y))
    assert d >= 0.9


@pytest.mark.parametrize("kind", ["oval", "hairpin", "chicane"])
def test_tracks_are_closed_and_drivable(kind):
    grid, traj = generate_track(kind)
    step = np.hypot(np.diff(traj.x), np.diff(traj.y))
    closing = math.hypot(traj.x[0] - traj.x[-1], traj.y[0] - traj.y[-1])
    assert closing <= step.max() + 1e-9
    assert np.all(grid.is_drivable(traj.x, traj.y))
    assert np.all(traj.velocity == 2.0)


def test_hairpin_radius_matches_configuration():
    for r in (1.0, 1.2):
        _, traj = generate_track("hairpin", hairpin_radius=r)
        assert abs(turn_radii(traj).min() - r) <= 0.05 * r


def test_scale_halves_extent():
    full, _ = generate_track("hairpin")
    half, _ = generate_track("hairpin", scale=0.5)
    for a, b in zip(full.extent, half.extent):
        assert abs(b - a / 2) <= full.resolution
