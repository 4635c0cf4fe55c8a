import math
from typing import Any, NamedTuple

import numpy as np

from .autodiff import ops


def wrap_angle(a):
    """Wrap to (-pi, pi]. Works on floats, arrays and tape nodes."""
    if isinstance(a, (float, int)):
        w = math.fmod(a + math.pi, 2.0 * math.pi)
        if w < 0.0:
            w += 2.0 * math.pi
        w -= math.pi
        return math.pi if w == -math.pi else w
    return ops.wrap_angle(a)


class Pose(NamedTuple):
    """Planar pose. Components are floats, or tape nodes inside a training step."""

    x: Any
    y: Any
    theta: Any

    @classmethod
    def wrapped(cls, x, y, theta):
        return cls(x, y, wrap_angle(theta))

    def values(self) -> "Pose":
        return Pose(*(float(ops.value(c)) for c in self))

    def as_array(self) -> np.ndarray:
        return np.array([float(ops.value(c)) for c in self], dtype=np.float64)
