"""Hot kernels with a compiled backend and a numpy fallback.

The compiled module is used when it imports; set ``KSPACEQC_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _pykernels

_c = None
if os.environ.get("KSPACEQC_PURE_PYTHON", "") != "1":
    try:
        from . import _ckernels as _c
    except ImportError:  # extension not built
        _c = None

BACKEND = "cython" if _c is not None else "numpy"
_impl = _c if _c is not None else _pykernels


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def im2col3d(x, k):
    return _impl.im2col3d(_f64(x), int(k))


def col2im3d(cols, shape, k):
    return _impl.col2im3d(_f64(cols), tuple(int(s) for s in shape), int(k))


def box_mean3(x):
    return _impl.box_mean3(_f64(x))


def trilinear_sample(vol, coords):
    return _impl.trilinear_sample(_f64(vol), _f64(coords))


def nearest_sample(vol, coords):
    return _impl.nearest_sample(np.ascontiguousarray(vol, dtype=np.int64), _f64(coords))


__all__ = ["BACKEND", "im2col3d", "col2im3d", "box_mean3", "trilinear_sample", "nearest_sample"]
