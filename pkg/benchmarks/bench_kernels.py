"""Compare the compiled raycaster with the numpy fallback.

    python benchmarks/bench_kernels.py [--poses 200] [--repeat 5]

Both back ends run the same rays on the generated oval; the script reports the
best-of-N wall time of each and the largest disagreement between them.
"""
import argparse
import time

import numpy as np

from mindstack import _raycast_py
from mindstack.world import SensorConfig, free_poses, generate_track


def _rays(grid, sensor, n_poses, rng):
    poses = free_poses(grid, rng)
    pick = rng.choice(len(poses), size=min(n_poses, len(poses)), replace=False)
    xs, ys, angles = [], [], []
    offs = sensor.beam_offsets()
    for i in pick:
        p = poses[i]
        xs.append(np.full(sensor.n_beams, p.x))
        ys.append(np.full(sensor.n_beams, p.y))
        angles.append(p.theta + offs)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(angles)


def _best(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--poses", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--kind", default="oval")
    args = ap.parse_args()

    grid, _ = generate_track(args.kind)
    sensor = SensorConfig()
    xs, ys, angles = _rays(grid, sensor, args.poses, np.random.default_rng(0))
    call = (grid.free, grid.origin[0], grid.origin[1], grid.resolution, xs, ys, angles, sensor.max_range)
    print(f"{len(xs)} rays on the {args.kind} map ({grid.width}x{grid.height} cells)")

    t_py, r_py = _best(lambda: _raycast_py.raycast_many(*call), args.repeat)
    print(f"numpy fallback : {t_py * 1e3:8.2f} ms")
    try:
        from mindstack import _raycast_ext
    except ImportError:
        print("compiled       : not built (pip install -e . --no-build-isolation)")
        return
    t_c, r_c = _best(lambda: _raycast_ext.raycast_many(*call), args.repeat)
    print(f"compiled       : {t_c * 1e3:8.2f} ms  ({t_py / t_c:.1f}x faster)")
    print(f"max |difference| between back ends: {np.max(np.abs(r_py - r_c)):.3e} m")


if __name__ == "__main__":
    main()
