"""Occupancy grids, reference trajectories and the simulated 2D LiDAR."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .pose import Pose, wrap_angle

OCCUPIED = 0
DRIVABLE = 1
UNKNOWN = 2


class MapError(ValueError):
    pass


@dataclass(frozen=True)
class SensorConfig:
    n_beams: int = 108
    fov: float = math.radians(270.0)
    max_range: float = 10.0

    def __post_init__(self):
        if self.n_beams < 2:
            raise ValueError("n_beams must be at least 2")
        if self.fov <= 0 or self.max_range <= 0:
            raise ValueError("fov and max_range must be positive")

    def beam_offsets(self) -> np.ndarray:
        return -self.fov / 2.0 + np.arange(self.n_beams) * (self.fov / (self.n_beams - 1))


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Raster map in world indexing: ``cells[iy, ix]``, row 0 at the minimum y.

    ``origin`` is the world position of the lower-left corner of cell (0, 0).
    """

    cells: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    free: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.resolution <= 0:
            raise MapError("resolution must be positive")
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2 or 0 in cells.shape:
            raise MapError(f"bad grid shape {cells.shape}")
        cells.setflags(write=False)
        free = np.ascontiguousarray(cells == DRIVABLE, dtype=np.uint8)
        free.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "free", free)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution

    @property
    def center(self) -> tuple[float, float]:
        w, h = self.extent
        return self.origin[0] + w / 2.0, self.origin[1] + h / 2.0

    def drivable_count(self) -> int:
        return int(self.free.sum())

    def drivable_cells(self) -> np.ndarray:
        """``(n, 2)`` array of ``(ix, iy)`` in row-major order."""
        iy, ix = np.nonzero(self.free)
        return np.stack([ix, iy], axis=1)

    def cell_of(self, x, y):
        ix = np.floor((np.asarray(x) - self.origin[0]) / self.resolution).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin[1]) / self.resolution).astype(np.int64)
        return ix, iy

    def cell_center(self, ix, iy):
        return (self.origin[0] + (np.asarray(ix) + 0.5) * self.resolution,
                self.origin[1] + (np.asarray(iy) + 0.5) * self.resolution)

    def is_drivable(self, x, y):
        ix, iy = self.cell_of(x, y)
        inside = (ix >= 0) & (iy >= 0) & (ix < self.width) & (iy < self.height)
        out = np.zeros(np.shape(ix), dtype=bool)
        out[inside] = self.free[iy[inside], ix[inside]] == 1
        return out if out.ndim else bool(out)

    def require_drivable(self):
        if self.drivable_count() == 0:
            raise MapError("no drivable cells")
        return self


# -- PGM maps ------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MapError("malformed PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Gray values of a P2 or P5 PGM as a ``(height, width)`` int array, image row order."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise MapError(f"unsupported PGM magic number {magic!r}")
    try:
        (w, h, maxval), pos = _pgm_tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise MapError("malformed PGM header") from None
    if w <= 0 or h <= 0:
        raise MapError("PGM has zero dimensions")
    if not 0 < maxval < 65536:
        raise MapError(f"bad PGM maxval {maxval}")
    if magic == b"P5":
        pos += 1  # single whitespace byte before the raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        nbytes = w * h * dtype.itemsize
        if len(data) - pos < nbytes:
            raise MapError("truncated PGM raster")
        img = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    else:
        body = data[pos:].split()
        if len(body) < w * h:
            raise MapError("truncated PGM raster")
        try:
            img = np.array([int(t) for t in body[:w * h]])
        except ValueError:
            raise MapError("non-integer PGM sample") from None
    return img.reshape(h, w).astype(np.int64)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a binary (P5) 8-bit PGM; ``img`` is in image row order."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def grid_from_gray(img: np.ndarray, resolution, origin=(0.0, 0.0),
                   drivable_threshold=250, occupied_threshold=50) -> OccupancyGrid:
    """Classify gray values and flip rows so row 0 becomes the minimum-y row."""
    img = np.asarray(img)
    cells = np.full(img.shape, UNKNOWN, dtype=np.uint8)
    cells[img >= drivable_threshold] = DRIVABLE
    cells[img <= occupied_threshold] = OCCUPIED
    return OccupancyGrid(cells[::-1].copy(), resolution, origin)


def grid_to_gray(grid: OccupancyGrid) -> np.ndarray:
    lut = np.array([0, 255, 205], dtype=np.uint8)
    return lut[grid.cells][::-1]


def load_pgm(path, resolution, origin=(0.0, 0.0), drivable_threshold=250) -> OccupancyGrid:
    return grid_from_gray(read_pgm(path), resolution, origin, drivable_threshold).require_drivable()


def read_map_meta(path) -> dict:
    """Parse a ``key=value`` map metadata file."""
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MapError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        meta[k] = v
    try:
        return {
            "resolution": float(meta["resolution"]),
            "origin": (float(meta.get("origin_x", 0.0)), float(meta.get("origin_y", 0.0))),
            "drivable_threshold": int(meta.get("drivable_threshold", 250)),
        }
    except KeyError as exc:
        raise MapError(f"{path}: missing key {exc}") from None


def write_map_meta(path, grid: OccupancyGrid, drivable_threshold=250) -> None:
    Path(path).write_text(
        f"resolution={grid.resolution!r}\n"
        f"origin_x={grid.origin[0]!r}\n"
        f"origin_y={grid.origin[1]!r}\n"
        f"drivable_threshold={drivable_threshold}\n")


def load_map(pgm_path, meta_path=None) -> OccupancyGrid:
    meta_path = Path(meta_path) if meta_path else Path(pgm_path).with_suffix(".meta")
    meta = read_map_meta(meta_path)
    return load_pgm(pgm_path, meta["resolution"], meta["origin"], meta["drivable_threshold"])


# -- LiDAR ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LidarScan:
    ranges: np.ndarray
    fov: float
    max_range: float

    @property
    def n_beams(self) -> int:
        return self.ranges.shape[0]

    def beam_angles(self, theta=0.0) -> np.ndarray:
        n = self.n_beams
        return theta - self.fov / 2.0 + np.arange(n) * (self.fov / (n - 1))


def raycast(grid: OccupancyGrid, pose: Pose, n_beams=108, fov=math.radians(270.0),
            max_range=10.0) -> LidarScan:
    """Exact grid-traversal ranges to the first non-drivable cell boundary."""
    x, y, theta = (float(v) for v in pose.values())
    if not grid.is_drivable(x, y):
        raise MapError(f"pose ({x:.3f}, {y:.3f}) is outside the grid or not drivable")
    if n_beams < 2:
        raise ValueError("n_beams must be at least 2")
    angles = theta - fov / 2.0 + np.arange(n_beams) * (fov / (n_beams - 1))
    xs = np.full(n_beams, x)
    ys = np.full(n_beams, y)
    r = kernels.raycast_many(grid.free, grid.origin[0], grid.origin[1], grid.resolution,
                             xs, ys, angles, float(max_range))
    return LidarScan(np.asarray(r), float(fov), float(max_range))


def raycast_sensor(grid, pose, sensor: SensorConfig) -> LidarScan:
    return raycast(grid, pose, sensor.n_beams, sensor.fov, sensor.max_range)


def add_scan_noise(scan: LidarScan, sigma: float, rng: np.random.Generator) -> LidarScan:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return LidarScan(scan.ranges.copy(), scan.fov, scan.max_range)
    noisy = scan.ranges + rng.normal(0.0, sigma, size=scan.ranges.shape)
    return LidarScan(np.clip(noisy, 0.0, scan.max_range), scan.fov, scan.max_range)


def free_poses(grid: OccupancyGrid, rng: np.random.Generator) -> list[Pose]:
    """One jittered pose per drivable cell, random heading."""
    cells = grid.drivable_cells()
    n = len(cells)
    cx, cy = grid.cell_center(cells[:, 0], cells[:, 1])
    half = grid.resolution / 2.0
    x = cx + rng.uniform(-half, half, n)
    y = cy + rng.uniform(-half, half, n)
    bad = ~grid.is_drivable(x, y)
    while bad.any():
        k = int(bad.sum())
        x[bad] = cx[bad] + rng.uniform(-half, half, k)
        y[bad] = cy[bad] + rng.uniform(-half, half, k)
        bad = ~grid.is_drivable(x, y)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    return [Pose.wrapped(float(a), float(b), float(t)) for a, b, t in zip(x, y, theta)]


# -- trajectories --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    velocity: np.ndarray
    closed: bool = True
    arc_length: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arrs = [np.ascontiguousarray(a, dtype=np.float64) for a in
                (self.x, self.y, self.heading, self.velocity)]
        n = len(arrs[0])
        if n == 0 or any(len(a) != n for a in arrs):
            raise ValueError("trajectory arrays must be nonempty and equally long")
        if np.any(arrs[3] <= 0):
            raise ValueError("waypoint velocity must be positive")
        step = np.hypot(np.diff(arrs[0]), np.diff(arrs[1]))
        if np.any(step == 0):
            raise ValueError("consecutive waypoints must be distinct")
        for name, a in zip(("x", "y", "heading", "velocity"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        s = np.concatenate([[0.0], np.cumsum(step)])
        s.setflags(write=False)
        object.__setattr__(self, "arc_length", s)

    def __len__(self):
        return len(self.x)

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)

    @property
    def length(self) -> float:
        """Total path length, including the closing segment of a closed path."""
        total = float(self.arc_length[-1])
        if self.closed:
            total += math.hypot(self.x[0] - self.x[-1], self.y[0] - self.y[-1])
        return total

    def nearest_index(self, x, y) -> int:
        d2 = (self.x - x) ** 2 + (self.y - y) ** 2
        return int(np.argmin(d2))  # argmin returns the lowest index on ties


def save_waypoints(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "heading", "velocity"])
        for row in zip(traj.x, traj.y, traj.heading, traj.velocity):
            w.writerow([repr(float(v)) for v in row])


def load_waypoints(path, closed=True) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["x", "y", "heading", "velocity"]:
            raise ValueError(f"{path}: expected header x,y,heading,velocity")
        rows = [[float(r[k]) for k in ("x", "y", "heading", "velocity")] for r in reader]
    a = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return Trajectory(a[:, 0], a[:, 1], a[:, 2], a[:, 3], closed=closed)


# -- synthetic tracks ----------------------------------------------------------

TRACK_KINDS = ("oval", "hairpin", "chicane")


def _stadium(straight, radius, n=4000):
    """Closed stadium curve centred at the origin, counter-clockwise, starting mid bottom straight."""
    per = 2 * straight + 2 * math.pi * radius
    s = np.linspace(0.0, per, n, endpoint=False)
    pts = np.empty((n, 2))
    h = straight / 2.0
    for i, si in enumerate(s):
        if si < h:
            pts[i] = (si, -radius)
        elif si < h + math.pi * radius:
            a = -math.pi / 2 + (si - h) / radius
            pts[i] = (h + radius * math.cos(a), radius * math.sin(a))
        elif si < h + math.pi * radius + straight:
            pts[i] = (h - (si - h - math.pi * radius), radius)
        elif si < h + 2 * math.pi * radius + straight:
            a = math.pi / 2 + (si - h - math.pi * radius - straight) / radius
            pts[i] = (-h + radius * math.cos(a), radius * math.sin(a))
        else:
            pts[i] = (-h + (si - h - 2 * math.pi * radius - straight), -radius)
    return pts


def _two_circle_hull(r_small, r_large, dist, n=4000):
    """Belt around two circles, the smaller one at +x."""
    # external tangent angle for circles at (0,0) radius R and (dist,0) radius r
    phi = math.acos((r_large - r_small) / dist)
    arc_small = 2 * phi * r_small
    arc_large = (2 * math.pi - 2 * phi) * r_large
    tangent = math.sqrt(dist ** 2 - (r_large - r_small) ** 2)
    per = arc_small + arc_large + 2 * tangent
    s = np.linspace(0.0, per, n, endpoint=False)
    pts = np.empty((n, 2))
    for i, si in enumerate(s):
        if si < arc_small:
            a = -phi + si / r_small
            pts[i] = (dist + r_small * math.cos(a), r_small * math.sin(a))
        elif si < arc_small + tangent:
            u = (si - arc_small) / tangent
            p0 = np.array([dist + r_small * math.cos(phi), r_small * math.sin(phi)])
            p1 = np.array([r_large * math.cos(phi), r_large * math.sin(phi)])
            pts[i] = p0 + u * (p1 - p0)
        elif si < arc_small + tangent + arc_large:
            a = phi + (si - arc_small - tangent) / r_large
            pts[i] = (r_large * math.cos(a), r_large * math.sin(a))
        else:
            u = (si - arc_small - tangent - arc_large) / tangent
            p0 = np.array([r_large * math.cos(-phi), r_large * math.sin(-phi)])
            p1 = np.array([dist + r_small * math.cos(-phi), r_small * math.sin(-phi)])
            pts[i] = p0 + u * (p1 - p0)
    # start on the lower tangent, just after the large turn
    start = int(np.searchsorted(s, arc_small + 2 * tangent + arc_large - 0.25 * tangent))
    return np.roll(pts, -start, axis=0)


def _chicane(straight, radius, amplitude, n=4000):
    pts = _stadium(straight, radius, n)
    h = straight / 2.0
    bottom = (pts[:, 1] < 0) & (np.abs(pts[:, 0]) <= h)
    u = (pts[bottom, 0] + h) / straight
    pts[bottom, 1] += amplitude * np.sin(2 * math.pi * u) * np.sin(math.pi * u) ** 2
    return pts


def _resample_closed(pts, step):
    closed = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    n = max(int(round(total / step)), 8)
    q = np.arange(n) * (total / n)
    x = np.interp(q, s, closed[:, 0])
    y = np.interp(q, s, closed[:, 1])
    return x, y


def _headings_closed(x, y):
    dx = np.roll(x, -1) - np.roll(x, 1)
    dy = np.roll(y, -1) - np.roll(y, 1)
    return np.arctan2(dy, dx)


def _dist_to_polyline(px, py, pts):
    """Distance from each query point to a closed polyline."""
    a = pts
    b = np.roll(pts, -1, axis=0)
    ab = b - a
    len2 = np.maximum((ab ** 2).sum(axis=1), 1e-18)
    out = np.full(px.shape, np.inf)
    q = np.stack([px, py], axis=-1)
    # chunk over segments to bound memory
    for i0 in range(0, len(a), 256):
        aa, abb, l2 = a[i0:i0 + 256], ab[i0:i0 + 256], len2[i0:i0 + 256]
        rel = q[:, None, :] - aa[None, :, :]
        t = np.clip((rel * abb[None]).sum(-1) / l2[None], 0.0, 1.0)
        d = np.hypot(*(rel - t[..., None] * abb[None]).transpose(2, 0, 1))
        out = np.minimum(out, d.min(axis=1))
    return out


@dataclass(frozen=True)
class TrackSpec:
    kind: str = "oval"
    scale: float = 1.0
    resolution: float = 0.1
    width: float = 2.2
    velocity: float = 2.0
    waypoint_step: float = 0.1
    hairpin_radius: float = 1.0
    margin: float = 0.3


def _centerline(spec: TrackSpec) -> np.ndarray:
    s = spec.scale
    if spec.kind == "oval":
        # unequal end radii: no 180-degree symmetry, so a scan never matches its mirrored pose
        return _two_circle_hull(2.0 * s, 2.6 * s, 2.4 * s)
    if spec.kind == "hairpin":
        return _two_circle_hull(spec.hairpin_radius * s, 1.8 * s, 3.2 * s)
    if spec.kind == "chicane":
        return _chicane(4.0 * s, 1.4 * s, 0.35 * s)
    raise ValueError(f"unknown track kind {spec.kind!r}; expected one of {TRACK_KINDS}")


def generate_track(kind="oval", scale=1.0, resolution=0.1, width=2.2, velocity=2.0,
                   **kw) -> tuple[OccupancyGrid, Trajectory]:
    """Corridor map around a closed centerline plus the resampled centerline.

    Geometry (centerline, corridor width, margin, waypoint step) scales with
    ``scale``; the grid resolution does not.
    """
    spec = TrackSpec(kind=kind, scale=scale, resolution=resolution, width=width,
                     velocity=velocity, **kw)
    if scale <= 0 or resolution <= 0:
        raise ValueError("scale and resolution must be positive")
    dense = _centerline(spec)
    half_w = spec.width * scale / 2.0
    pad = half_w + spec.margin * scale
    lo = dense.min(axis=0) - pad
    hi = dense.max(axis=0) + pad
    nx = int(math.ceil((hi[0] - lo[0]) / resolution))
    ny = int(math.ceil((hi[1] - lo[1]) / resolution))
    origin = (round(float(lo[0]), 9), round(float(lo[1]), 9))
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    cx = origin[0] + (ix + 0.5) * resolution
    cy = origin[1] + (iy + 0.5) * resolution
    d = _dist_to_polyline(cx.ravel(), cy.ravel(), dense).reshape(ny, nx)
    cells = np.where(d <= half_w, DRIVABLE, OCCUPIED).astype(np.uint8)
    grid = OccupancyGrid(cells, resolution, origin)

    x, y = _resample_closed(dense, spec.waypoint_step * scale)
    heading = _headings_closed(x, y)
    traj = Trajectory(x, y, heading, np.full(len(x), float(velocity)), closed=True)
    return grid, traj


def turn_radii(traj: Trajectory) -> np.ndarray:
    """Local turn radius at each waypoint from finite differences of heading."""
    dth = np.array([wrap_angle(float(a)) for a in np.diff(np.append(traj.heading, traj.heading[0]))])
    ds = np.hypot(np.diff(np.append(traj.x, traj.x[0])), np.diff(np.append(traj.y, traj.y[0])))
    curv = np.abs(dth) / ds
    with np.errstate(divide="ignore"):
        return np.where(curv > 0, 1.0 / curv, np.inf)
