"""Pure numpy raycaster, used when the compiled extension is unavailable.

Runs the same DDA traversal as the extension, vectorized across rays, with
the same floating-point operation order so both back ends agree.
"""
import numpy as np


def raycast_many(free, origin_x, origin_y, resolution, xs, ys, angles, max_range):
    free = np.asarray(free, dtype=np.uint8)
    ny, nx = free.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    max_cells = max_range / resolution

    gx = (xs - origin_x) / resolution
    gy = (ys - origin_y) / resolution
    dx = np.cos(angles)
    dy = np.sin(angles)
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)

    with np.errstate(divide="ignore"):
        sx = np.sign(dx).astype(np.int64)
        sy = np.sign(dy).astype(np.int64)
        tdx = np.where(dx != 0.0, np.abs(1.0 / np.where(dx != 0.0, dx, 1.0)), np.inf)
        tdy = np.where(dy != 0.0, np.abs(1.0 / np.where(dy != 0.0, dy, 1.0)), np.inf)
    tmx = np.where(dx > 0.0, (ix + 1 - gx) * tdx, np.where(dx < 0.0, (gx - ix) * tdx, np.inf))
    tmy = np.where(dy > 0.0, (iy + 1 - gy) * tdy, np.where(dy < 0.0, (gy - iy) * tdy, np.inf))

    def blocked(cx, cy):
        inside = (cx >= 0) & (cy >= 0) & (cx < nx) & (cy < ny)
        out = ~inside
        out[inside] = free[cy[inside], cx[inside]] == 0
        return out

    t = np.zeros_like(gx)
    done = blocked(ix, iy)
    t[done] = 0.0
    active = np.flatnonzero(~done)
    while active.size:
        a_tmx, a_tmy = tmx[active], tmy[active]
        stepx = a_tmx < a_tmy
        ta = np.where(stepx, a_tmx, a_tmy)
        ix[active] += np.where(stepx, sx[active], 0)
        iy[active] += np.where(stepx, 0, sy[active])
        tmx[active] = np.where(stepx, a_tmx + tdx[active], a_tmx)
        tmy[active] = np.where(stepx, a_tmy, a_tmy + tdy[active])
        capped = ta >= max_cells
        hit = blocked(ix[active], iy[active])
        t[active] = np.where(capped, max_cells, ta)
        active = active[~(capped | hit)]
    return resolution * t
