"""Shared oracles for the test-suite: finite differences and ray marching."""
import math

import numpy as np

from mindstack.autodiff import Tape, ops
from mindstack.world import DRIVABLE, OCCUPIED, OccupancyGrid

FD_STEP = 1e-5


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def tape_grads(fn, inputs):
    """Gradient of scalar ``fn(*nodes)`` with respect to every input array."""
    tape = Tape()
    nodes = [tape.leaf(x, name=str(i)) for i, x in enumerate(inputs)]
    out = fn(*nodes)
    grads = tape.backward(out)
    return float(out.value), [grads[str(i)] for i in range(len(inputs))]


def fd_grads(fn, inputs, h=FD_STEP):
    """Central finite differences of scalar ``fn`` evaluated eagerly on arrays."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out = []
    for i, x in enumerate(inputs):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(fn(*inputs))
            flat[k] = orig - h
            fm = float(fn(*inputs))
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def projected(op_fn, weights):
    """Scalar function ``sum(op(*xs) * w)`` so a tensor op can be gradient-checked."""
    def f(*xs):
        return ops.sum(ops.mul(op_fn(*xs), weights))
    return f


def march(grid: OccupancyGrid, x, y, angle, max_range, step=None):
    """Fixed-step ray marcher: first sample point that is not drivable."""
    step = grid.resolution / 20.0 if step is None else step
    c, s = math.cos(angle), math.sin(angle)
    ts = np.arange(0.0, max_range, step)
    blocked = ~grid.is_drivable(x + ts * c, y + ts * s)
    hit = np.flatnonzero(blocked)
    return float(ts[hit[0]]) if hit.size else float(max_range)


def ring_corridor(size=64, resolution=0.1, r_in=1.6, r_out=2.9):
    """Annular corridor centred in a ``size`` x ``size`` grid."""
    c = size * resolution / 2.0
    ix, iy = np.meshgrid(np.arange(size), np.arange(size))
    cx = (ix + 0.5) * resolution - c
    cy = (iy + 0.5) * resolution - c
    r = np.hypot(cx, cy)
    cells = np.where((r >= r_in) & (r <= r_out), DRIVABLE, OCCUPIED).astype(np.uint8)
    return OccupancyGrid(cells, resolution, (-c, -c))


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_LINES = {}


def report(criterion, ok, detail):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return ok
