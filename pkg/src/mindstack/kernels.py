"""Back-end selection for the hot raycasting kernel.

The compiled extension is used when it imports; setting the environment
variable ``MINDSTACK_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _raycast_py

BACKEND = "python"
raycast_many = _raycast_py.raycast_many

if os.environ.get("MINDSTACK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _raycast_ext
    except ImportError:
        pass
    else:
        raycast_many = _raycast_ext.raycast_many
        BACKEND = "compiled"
