# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled grid-traversal raycaster (Amanatides-Woo DDA)."""
from libc.math cimport cos, sin, floor, fabs, INFINITY

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _cast(const unsigned char[:, ::1] free, Py_ssize_t nx, Py_ssize_t ny,
                         double gx, double gy, double dx, double dy,
                         double max_cells) noexcept nogil:
    cdef Py_ssize_t ix = <Py_ssize_t>floor(gx)
    cdef Py_ssize_t iy = <Py_ssize_t>floor(gy)
    cdef Py_ssize_t sx, sy
    cdef double tmx, tmy, tdx, tdy, t = 0.0

    if ix < 0 or iy < 0 or ix >= nx or iy >= ny or free[iy, ix] == 0:
        return 0.0
    if dx > 0.0:
        sx = 1
        tdx = 1.0 / dx
        tmx = (ix + 1 - gx) * tdx
    elif dx < 0.0:
        sx = -1
        tdx = -1.0 / dx
        tmx = (gx - ix) * tdx
    else:
        sx = 0
        tdx = INFINITY
        tmx = INFINITY
    if dy > 0.0:
        sy = 1
        tdy = 1.0 / dy
        tmy = (iy + 1 - gy) * tdy
    elif dy < 0.0:
        sy = -1
        tdy = -1.0 / dy
        tmy = (gy - iy) * tdy
    else:
        sy = 0
        tdy = INFINITY
        tmy = INFINITY

    while True:
        if tmx < tmy:
            t = tmx
            ix += sx
            tmx += tdx
        else:
            t = tmy
            iy += sy
            tmy += tdy
        if t >= max_cells:
            return max_cells
        if ix < 0 or iy < 0 or ix >= nx or iy >= ny or free[iy, ix] == 0:
            return t


def raycast_many(const unsigned char[:, ::1] free, double origin_x, double origin_y,
                 double resolution, const double[::1] xs, const double[::1] ys,
                 const double[::1] angles, double max_range):
    """Range to the first blocked cell for each ray ``(xs[i], ys[i], angles[i])``."""
    cdef Py_ssize_t n = angles.shape[0]
    cdef Py_ssize_t ny = free.shape[0], nx = free.shape[1]
    cdef Py_ssize_t i
    cdef double max_cells = max_range / resolution
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = resolution * _cast(free, nx, ny,
                                       (xs[i] - origin_x) / resolution,
                                       (ys[i] - origin_y) / resolution,
                                       cos(angles[i]), sin(angles[i]), max_cells)
    return out
