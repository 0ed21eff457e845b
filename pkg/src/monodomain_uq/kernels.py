"""Backend selection for the hot inner loops.

The compiled Cython module is used when it was built; otherwise the NumPy
fallback is imported. Setting ``MONODOMAIN_UQ_PURE_PYTHON=1`` forces the
fallback, which is how the benchmark and the cross-backend tests compare them.
"""

import os

from . import _kernels_py

if os.environ.get("MONODOMAIN_UQ_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"

locate_points = _impl.locate_points
radical_inverse_block = _impl.radical_inverse_block
first_crossing = _impl.first_crossing
element_stiffness = _impl.element_stiffness

__all__ = [
    "BACKEND",
    "locate_points",
    "radical_inverse_block",
    "first_crossing",
    "element_stiffness",
]
