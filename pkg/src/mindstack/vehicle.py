"""Kinematic bicycle model and the fixed-step closed-loop lap driver."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .autodiff import ops
from .pose import Pose, wrap_angle
from .world import (LidarScan, OccupancyGrid, SensorConfig, Trajectory, add_scan_noise,
                    raycast_sensor)

__all__ = ["Pose", "VehicleParams", "VehicleState", "SimClock", "bicycle_step",
           "propagate_two_steps", "World", "StepOutput", "LapLog", "run_lap"]


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 0.33
    delta_max: float = 0.41
    dt: float = 0.01


@dataclass(frozen=True)
class VehicleState:
    pose: Pose
    v: float = 0.0
    delta: float = 0.0


@dataclass
class SimClock:
    dt: float = 0.01
    step_index: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def tick(self):
        self.step_index += 1

    @property
    def time(self) -> float:
        return self.step_index * self.dt


def _is_node_free(*vals):
    return all(isinstance(v, (float, int)) for v in vals)


def _bicycle_pose(pose: Pose, delta, v, dt, wheelbase) -> Pose:
    x, y, th = pose
    if _is_node_free(x, y, th, delta, v):
        return Pose(x + v * math.cos(th) * dt,
                    y + v * math.sin(th) * dt,
                    wrap_angle(th + (v / wheelbase) * math.tan(delta) * dt))
    return Pose(x + v * ops.cos(th) * dt,
                y + v * ops.sin(th) * dt,
                wrap_angle(th + (v / wheelbase) * ops.tan(delta) * dt))


def bicycle_step(state: VehicleState, delta, v, dt, wheelbase=0.33, delta_max=0.41) -> VehicleState:
    """One explicit-Euler step of the rear-axle kinematic bicycle.

    ``delta`` is clamped to ``[-delta_max, delta_max]`` and ``v`` to ``v >= 0``.
    """
    if dt <= 0 or wheelbase <= 0:
        raise ValueError("dt and wheelbase must be positive")
    if isinstance(delta, (float, int)):
        delta = min(max(float(delta), -delta_max), delta_max)
    else:
        delta = ops.clamp(delta, -delta_max, delta_max)
    if isinstance(v, (float, int)):
        v = max(float(v), 0.0)
    pose = _bicycle_pose(state.pose, delta, v, dt, wheelbase)
    return VehicleState(pose, v, delta)


def propagate_two_steps(pose: Pose, delta, v, dt, wheelbase=0.33, delta_max=0.41) -> Pose:
    """Roll the bicycle forward two steps holding ``delta`` and ``v`` constant."""
    s = VehicleState(pose, v)
    s = bicycle_step(s, delta, v, dt, wheelbase, delta_max)
    s = bicycle_step(s, delta, v, dt, wheelbase, delta_max)
    return s.pose


# -- closed loop ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class World:
    """Everything a lap needs besides the driving stack."""

    grid: OccupancyGrid
    traj: Trajectory
    sensor: SensorConfig = SensorConfig()
    scan_sigma: float = 0.25
    vehicle: VehicleParams = VehicleParams()

    def start_pose(self) -> Pose:
        return Pose(float(self.traj.x[0]), float(self.traj.y[0]), float(self.traj.heading[0]))

    def sense(self, pose: Pose, rng) -> LidarScan:
        return add_scan_noise(raycast_sensor(self.grid, pose, self.sensor), self.scan_sigma, rng)


@dataclass
class StepOutput:
    delta: float
    v: float
    est: Pose | None = None
    loss_total: float = float("nan")
    loss_loc: float = float("nan")


class DrivingStack(Protocol):
    def reset(self, world: World, start: Pose, rng: np.random.Generator) -> None: ...

    def step(self, world: World, scan: LidarScan, state: VehicleState,
             rng: np.random.Generator) -> StepOutput: ...


LOG_HEADER = ["t", "x_gt", "y_gt", "theta_gt", "x_est", "y_est", "theta_est",
              "delta", "cte", "he", "loss_total", "loss_loc"]


@dataclass
class LapLog:
    dt: float
    rows: list = field(default_factory=list)
    outcome: str = "running"

    def __len__(self):
        return len(self.rows)

    @property
    def steps(self) -> int:
        return len(self.rows)

    @property
    def lap_time(self) -> float:
        return self.steps * self.dt

    def column(self, name) -> np.ndarray:
        i = LOG_HEADER.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def mean_abs_cte(self) -> float:
        return float(np.mean(np.abs(self.column("cte")))) if self.rows else float("nan")

    def mean_loss(self) -> float:
        vals = self.column("loss_total")
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])


def _start_line_side(traj: Trajectory, x, y) -> float:
    h = traj.heading[0]
    return (x - traj.x[0]) * math.cos(h) + (y - traj.y[0]) * math.sin(h)


def run_lap(stack: DrivingStack, world: World, start: Pose | None = None, max_steps=5000,
            rng: np.random.Generator | None = None, on_step=None) -> LapLog:
    """Drive one lap; the outcome is ``complete``, ``crash`` or ``timeout``.

    The lap is complete when the vehicle crosses the line through the first
    waypoint, perpendicular to its heading, in the direction of travel, after
    having covered at least half the track.
    """
    from .control import tracking_errors

    rng = rng if rng is not None else np.random.default_rng(0)
    vp = world.vehicle
    start = start if start is not None else world.start_pose()
    start = start.values()
    stack.reset(world, start, rng)
    state = VehicleState(start, float(world.traj.velocity[world.traj.nearest_index(start.x, start.y)]))
    log = LapLog(vp.dt)
    traj = world.traj
    n_wp = len(traj)
    visited = np.zeros(n_wp, dtype=bool)
    half_width = 1.5  # lateral extent of the start-line segment, m
    clock = SimClock(vp.dt)

    for _ in range(max_steps):
        pose = state.pose
        scan = world.sense(pose, rng)
        out = stack.step(world, scan, state, rng)
        err = tracking_errors(pose, traj)
        est = out.est.values() if out.est is not None else Pose(math.nan, math.nan, math.nan)
        log.rows.append((clock.time, pose.x, pose.y, pose.theta, est.x, est.y, est.theta,
                         float(out.delta), float(err.e_cross), float(err.e_head),
                         float(out.loss_total), float(out.loss_loc)))
        visited[err.nearest_index] = True
        if on_step is not None:
            on_step(clock.step_index, state, out)
        new = bicycle_step(state, float(out.delta), float(out.v), vp.dt, vp.wheelbase, vp.delta_max)
        clock.tick()
        if not world.grid.is_drivable(new.pose.x, new.pose.y):
            log.outcome = "crash"
            return log
        s0 = _start_line_side(traj, pose.x, pose.y)
        s1 = _start_line_side(traj, new.pose.x, new.pose.y)
        lat = -(new.pose.x - traj.x[0]) * math.sin(traj.heading[0]) + (new.pose.y - traj.y[0]) * math.cos(traj.heading[0])
        if s0 < 0.0 <= s1 and abs(lat) <= half_width and visited.mean() > 0.5:
            log.outcome = "complete"
            return log
        state = new
    log.outcome = "timeout"
    return log
