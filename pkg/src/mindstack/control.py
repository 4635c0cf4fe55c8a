"""Lateral controllers and the particle-filter localizer used by the baselines.

Cross-track error sign: ``e_cross > 0`` when the reference path lies to the
vehicle's left (the vehicle is right of the path). With this convention the
Stanley law steers toward the path: ``sign(delta) == sign(e_cross)`` when the
heading error is zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import kernels
from .autodiff import ops
from .pose import Pose, wrap_angle
from .world import LidarScan, OccupancyGrid, Trajectory

V_FLOOR = 0.1


@dataclass
class StanleyGains:
    k_e: Any = 1.8
    k_h: Any = 1.3

    def __post_init__(self):
        if float(ops.value(self.k_e)) <= 0 or float(ops.value(self.k_h)) <= 0:
            raise ValueError("Stanley gains must be positive")


@dataclass
class TrackingErrors:
    e_cross: Any
    e_head: Any
    nearest_index: int


def _plain(*vals):
    return all(isinstance(v, (float, int)) for v in vals)


def tracking_errors(pose: Pose, traj: Trajectory) -> TrackingErrors:
    """Signed CTE and heading error relative to the nearest waypoint.

    The nearest waypoint is chosen on numeric values and treated as a constant
    by the backward pass.
    """
    x, y, th = pose
    px, py = float(ops.value(x)), float(ops.value(y))
    i = traj.nearest_index(px, py)
    wx, wy, wh = float(traj.x[i]), float(traj.y[i]), float(traj.heading[i])
    s, c = math.sin(wh), math.cos(wh)
    e_cross = (x - wx) * s - (y - wy) * c
    return TrackingErrors(e_cross, wrap_angle(wh - th), i)


def stanley_steer(errors: TrackingErrors, v, gains: StanleyGains, delta_max=0.41):
    """``delta = k_h * e_head + atan(k_e * e_cross / v)``, clamped to +-delta_max."""
    e_cross, e_head = errors.e_cross, errors.e_head
    if isinstance(v, (float, int)):
        v = max(float(v), V_FLOOR)
    if _plain(e_cross, e_head, gains.k_e, gains.k_h, v):
        d = gains.k_h * e_head + math.atan(gains.k_e * e_cross / v)
        return min(max(d, -delta_max), delta_max)
    d = gains.k_h * e_head + ops.atan(gains.k_e * e_cross / v)
    return ops.clamp(d, -delta_max, delta_max)


def lookahead_point(pose: Pose, traj: Trajectory, lookahead: float) -> int:
    """Index of the first waypoint at least ``lookahead`` of arc length ahead of the nearest one."""
    i = traj.nearest_index(float(pose.x), float(pose.y))
    n = len(traj)
    total = traj.length
    s0 = traj.arc_length[i]
    for k in range(1, n + 1):
        j = (i + k) % n
        ds = traj.arc_length[j] - s0
        if j <= i:
            if not traj.closed:
                return n - 1
            ds += total
        if ds >= lookahead:
            return j
    return i


def pure_pursuit_steer(pose: Pose, traj: Trajectory, lookahead=1.0, wheelbase=0.33,
                       delta_max=0.41) -> float:
    if lookahead <= 0:
        raise ValueError("lookahead must be positive")
    j = lookahead_point(pose, traj, lookahead)
    return pure_pursuit_law(pose, (float(traj.x[j]), float(traj.y[j])), lookahead,
                            wheelbase, delta_max)


def pure_pursuit_law(pose: Pose, goal, lookahead, wheelbase=0.33, delta_max=0.41) -> float:
    """``atan(2 L sin(alpha) / lookahead)`` with alpha the goal bearing in the vehicle frame."""
    x, y, th = (float(v) for v in pose)
    alpha = math.atan2(goal[1] - y, goal[0] - x) - th
    alpha = wrap_angle(alpha)
    d = math.atan(2.0 * wheelbase * math.sin(alpha) / lookahead)
    return min(max(d, -delta_max), delta_max)


@dataclass
class GapResult:
    delta: float
    emergency: bool
    target_beam: int


def follow_the_gap(scan: LidarScan, bubble_radius=0.4, safe_threshold=2.5,
                   delta_max=0.41) -> GapResult:
    """Steer toward the farthest beam of the widest free gap.

    Beams inside a safety bubble around the closest return are zeroed first.
    Ties for the farthest beam resolve to the middle of the tied beams.
    """
    r = np.array(scan.ranges, dtype=np.float64)
    n = r.shape[0]
    angles = scan.beam_angles(0.0)
    step = scan.fov / (n - 1)
    k = int(np.argmin(r))
    if r[k] > 0:
        half = math.atan2(bubble_radius, r[k])
        m = int(half // step)
        r[max(0, k - m):k + m + 1] = 0.0
    else:
        r[k] = 0.0

    free = r > safe_threshold
    best_len, best_start = 0, -1
    i = 0
    while i < n:
        if free[i]:
            j = i
            while j < n and free[j]:
                j += 1
            if j - i > best_len:
                best_len, best_start = j - i, i
            i = j
        else:
            i += 1
    if best_len == 0:
        return GapResult(0.0, True, -1)
    seg = r[best_start:best_start + best_len]
    top = np.flatnonzero(seg == seg.max())
    target = best_start + int(top[(len(top) - 1) // 2])
    if len(top) % 2 == 0:
        # even tie count: aim between the two middle beams
        a = 0.5 * (angles[best_start + top[len(top) // 2 - 1]] + angles[best_start + top[len(top) // 2]])
    else:
        a = angles[target]
    return GapResult(float(min(max(a, -delta_max), delta_max)), False, target)


# -- particle filter -------------------------------------------------------------

@dataclass
class PFConfig:
    n_particles: int = 500
    n_beams: int = 36
    sigma_hit: float = 0.35
    motion_xy: float = 0.01
    motion_theta: float = 0.01
    init_xy: float = 0.1
    init_theta: float = 0.05


@dataclass
class Belief:
    particles: np.ndarray   # (n, 3): x, y, theta
    weights: np.ndarray     # (n,), sums to 1

    def copy(self):
        return Belief(self.particles.copy(), self.weights.copy())


@dataclass
class PFResult:
    estimate: Pose
    belief: Belief
    degenerate: bool


def init_belief(pose: Pose, cfg: PFConfig, rng: np.random.Generator, spread=True) -> Belief:
    n = cfg.n_particles
    if n < 1:
        raise ValueError("n_particles must be at least 1")
    p = np.tile(np.array([pose.x, pose.y, pose.theta], dtype=np.float64), (n, 1))
    if spread:
        p[:, 0:2] += rng.normal(0.0, cfg.init_xy, (n, 2))
        p[:, 2] += rng.normal(0.0, cfg.init_theta, n)
    return Belief(p, np.full(n, 1.0 / n))


def uniform_belief(grid: OccupancyGrid, n, rng) -> Belief:
    cells = grid.drivable_cells()
    pick = cells[rng.integers(0, len(cells), n)]
    cx, cy = grid.cell_center(pick[:, 0], pick[:, 1])
    half = grid.resolution / 2
    p = np.stack([cx + rng.uniform(-half, half, n), cy + rng.uniform(-half, half, n),
                  rng.uniform(-math.pi, math.pi, n)], axis=1)
    return Belief(p, np.full(n, 1.0 / n))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions)


def belief_mean(b: Belief) -> Pose:
    w = b.weights
    x = float(np.dot(w, b.particles[:, 0]))
    y = float(np.dot(w, b.particles[:, 1]))
    th = math.atan2(float(np.dot(w, np.sin(b.particles[:, 2]))),
                    float(np.dot(w, np.cos(b.particles[:, 2]))))
    return Pose(x, y, th)


def particle_filter(prev_belief: Belief, odometry, scan: LidarScan, grid: OccupancyGrid,
                    cfg: PFConfig, rng: np.random.Generator) -> PFResult:
    """One Monte Carlo localization cycle.

    ``odometry`` is ``(dx, dy, dtheta)`` expressed in the previous vehicle frame.
    """
    p = prev_belief.particles.copy()
    n = len(p)
    dx, dy, dth = odometry
    c, s = np.cos(p[:, 2]), np.sin(p[:, 2])
    moving = abs(dx) + abs(dy) + abs(dth) > 0
    if moving:
        p[:, 0] += c * dx - s * dy + rng.normal(0.0, cfg.motion_xy, n)
        p[:, 1] += s * dx + c * dy + rng.normal(0.0, cfg.motion_xy, n)
        p[:, 2] += dth + rng.normal(0.0, cfg.motion_theta, n)
    p[:, 2] = np.mod(p[:, 2] + math.pi, 2 * math.pi) - math.pi

    nb = scan.n_beams
    idx = np.unique(np.linspace(0, nb - 1, min(cfg.n_beams, nb)).round().astype(int))
    offsets = scan.beam_angles(0.0)[idx]
    measured = scan.ranges[idx]

    inside = grid.is_drivable(p[:, 0], p[:, 1])
    logw = np.full(n, -np.inf)
    if inside.any():
        q = p[inside]
        k = len(idx)
        xs = np.repeat(q[:, 0], k)
        ys = np.repeat(q[:, 1], k)
        angles = (q[:, 2][:, None] + offsets[None, :]).ravel()
        expected = kernels.raycast_many(grid.free, grid.origin[0], grid.origin[1],
                                        grid.resolution, xs, ys, angles,
                                        scan.max_range).reshape(-1, k)
        z = (expected - measured[None, :]) / cfg.sigma_hit
        logw[inside] = -0.5 * np.sum(z * z, axis=1)
    logw += np.log(prev_belief.weights)

    degenerate = not np.isfinite(logw).any()
    if degenerate:
        b = uniform_belief(grid, n, rng)
        return PFResult(belief_mean(b), b, True)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    est = belief_mean(Belief(p, w))
    keep = systematic_resample(w, rng)
    return PFResult(est, Belief(p[keep], np.full(n, 1.0 / n)), False)


def odometry_between(a: Pose, b: Pose):
    """Relative motion from ``a`` to ``b`` in the frame of ``a``."""
    ddx, ddy = b.x - a.x, b.y - a.y
    c, s = math.cos(a.theta), math.sin(a.theta)
    return (c * ddx + s * ddy, -s * ddx + c * ddy, wrap_angle(b.theta - a.theta))


# -- baseline driving stacks ----------------------------------------------------------

def _waypoint_speed(world, pose) -> float:
    return float(world.traj.velocity[world.traj.nearest_index(float(pose.x), float(pose.y))])


class GroundTruthStanleyStack:
    """Stanley on the true pose; the reference for the controller alone."""

    def __init__(self, gains: StanleyGains | None = None):
        self.gains = gains or StanleyGains()

    def reset(self, world, start, rng):
        pass

    def step(self, world, scan, state, rng):
        from .vehicle import StepOutput
        pose = state.pose
        d = stanley_steer(tracking_errors(pose, world.traj), state.v, self.gains,
                          world.vehicle.delta_max)
        return StepOutput(d, _waypoint_speed(world, pose), pose)


class ParticleFilterStack:
    """Particle filter localization feeding Pure Pursuit or Stanley.

    Odometry is the true relative motion between steps; the filter is still
    responsible for the noise model and the measurement update.
    """

    def __init__(self, controller="pure_pursuit", pf: PFConfig | None = None,
                 gains: StanleyGains | None = None, lookahead=1.0):
        if controller not in ("pure_pursuit", "stanley"):
            raise ValueError(f"unknown controller {controller!r}")
        self.controller = controller
        self.pf = pf or PFConfig()
        self.gains = gains or StanleyGains()
        self.lookahead = lookahead

    def reset(self, world, start, rng):
        self.belief = init_belief(start, self.pf, rng)
        self.last_pose = start

    def step(self, world, scan, state, rng):
        from .vehicle import StepOutput
        odo = odometry_between(self.last_pose, state.pose)
        self.last_pose = state.pose
        res = particle_filter(self.belief, odo, scan, world.grid, self.pf, rng)
        self.belief = res.belief
        est = res.estimate
        vp = world.vehicle
        if self.controller == "stanley":
            d = stanley_steer(tracking_errors(est, world.traj), state.v, self.gains, vp.delta_max)
        else:
            d = pure_pursuit_steer(est, world.traj, self.lookahead, vp.wheelbase, vp.delta_max)
        return StepOutput(d, _waypoint_speed(world, est), est)


class FollowTheGapStack:
    """Reactive gap follower; needs no map or pose estimate."""

    def __init__(self, bubble_radius=0.4, safe_threshold=2.5, speed=None):
        self.bubble_radius = bubble_radius
        self.safe_threshold = safe_threshold
        self.speed = speed

    def reset(self, world, start, rng):
        pass

    def step(self, world, scan, state, rng):
        from .vehicle import StepOutput
        g = follow_the_gap(scan, self.bubble_radius, self.safe_threshold, world.vehicle.delta_max)
        v = self.speed if self.speed is not None else float(np.min(world.traj.velocity))
        return StepOutput(g.delta, 0.0 if g.emergency else v, None)
