"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly so one process compares them; outputs
are checked for equality before timing.
"""
import argparse
import timeit

import numpy as np

from kspaceqc._kernels import _pykernels

try:
    from kspaceqc._kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((2, 8, 18, 18, 18))
    cols = _pykernels.im2col3d(x, 3)
    vol = rng.uniform(size=(32, 32, 32))
    coords = rng.uniform(-1, 32, size=(3, 32 ** 3))
    labels = rng.integers(0, 3, size=(32, 32, 32)).astype(np.int64)
    return {
        "im2col3d 2x8x18^3": ("im2col3d", (x, 3)),
        "col2im3d 2x8x18^3": ("col2im3d", (cols, x.shape, 3)),
        "box_mean3 32^3": ("box_mean3", (vol,)),
        "trilinear 32^3": ("trilinear_sample", (vol, coords)),
        "nearest 32^3": ("nearest_sample", (labels, coords)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label, (name, a) in cases(rng).items():
        py, cy = getattr(_pykernels, name), getattr(_ckernels, name)
        assert np.array_equal(py(*a), cy(*a)), name
        t_py = min(timeit.repeat(lambda: py(*a), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: cy(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:22s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
