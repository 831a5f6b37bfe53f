"""Procedural brain-like phantoms with exact three-class labels.

Each phantom is an ellipsoid: an outer shell (class 1, the grey-matter
analogue) around a core (class 2) on background (class 0). Everything is a
pure function of ``(spec.seed, index)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import LabelVolume, Volume, normalize_array

BACKGROUND, SHELL, CORE = 0, 1, 2


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple = (32, 32, 32)
    num_classes: int = 3
    radius_range: tuple = (0.22, 0.375)  # fraction of the axis length
    shell_thickness_range: tuple = (2.0, 4.0)  # voxels
    intensity_means: tuple = (0.1, 0.7, 0.45)
    intensity_jitter: float = 0.05
    smoothing_sigma: float = 0.6
    texture_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        size = tuple(int(s) for s in (self.size if np.ndim(self.size) else (self.size,) * 3))
        object.__setattr__(self, "size", size)
        if self.num_classes != 3:
            raise PhantomError("phantoms have exactly 3 classes")
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.5:
            raise PhantomError(f"radius fractions must satisfy 0 < lo <= hi < 0.5, got {self.radius_range}")
        tlo, thi = self.shell_thickness_range
        if not 1.0 <= tlo <= thi:
            raise PhantomError(f"invalid shell thickness range {self.shell_thickness_range}")
        if min(size) * lo <= thi + 1:
            raise PhantomError(f"size {size} too small for radius range {self.radius_range} and shell {thi}")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _rng(spec, index):
    return np.random.default_rng([int(spec.seed), int(index), 7])


def phantom_geometry(spec: PhantomSpec, index):
    """Sample centre, radii and shell thickness for phantom ``index``."""
    rng = _rng(spec, index)
    size = np.array(spec.size, dtype=np.float64)
    lo, hi = spec.radius_range
    radii = rng.uniform(lo, hi, size=3) * size
    thick = rng.uniform(*spec.shell_thickness_range)
    center = np.empty(3)
    for a in range(3):
        # leave at least one background voxel between ellipsoid and border
        c_lo = radii[a] + 1.0
        c_hi = size[a] - 2.0 - radii[a]
        if c_hi < c_lo:
            raise PhantomError(f"radius {radii[a]:.2f} does not fit axis of length {size[a]:.0f}")
        center[a] = rng.uniform(c_lo, c_hi)
    return center, radii, thick, rng


def generate(spec: PhantomSpec, index):
    """Return ``(Volume, LabelVolume)`` for phantom ``index``."""
    center, radii, thick, rng = phantom_geometry(spec, index)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.size], indexing="ij")
    outer = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    inner_r = radii - thick
    inner = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, inner_r))
    labels = np.zeros(spec.size, dtype=np.int64)
    labels[outer <= 1.0] = SHELL
    labels[inner <= 1.0] = CORE
    means = np.asarray(spec.intensity_means) + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter, size=3)
    image = means[labels]
    if spec.smoothing_sigma > 0:
        image = gaussian_filter(image, spec.smoothing_sigma, mode="nearest")
    image = image + spec.texture_sigma * rng.standard_normal(spec.size)
    image = normalize_array(image)
    return Volume(image), LabelVolume(labels, spec.num_classes)


def split_sizes(n, ratios):
    """Floor each share, then hand the remainder to the largest fractional parts."""
    ratios = [float(r) for r in ratios]
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise PhantomError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    raw = [n * r for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


SPLIT_NAMES = ("train", "valid", "test")


def dataset(spec: PhantomSpec, n, split_ratios=(0.8, 0.1, 0.1)):
    """Deterministic train/valid/test partition of phantom indices ``0..n-1``.

    Returns a manifest dict with one entry per index.
    """
    if n < 1:
        raise PhantomError(f"need at least one phantom, got n={n}")
    sizes = split_sizes(n, split_ratios)
    if any(s == 0 for s in sizes):
        raise PhantomError(f"n={n} too small for non-empty splits with ratios {tuple(split_ratios)}")
    perm = np.random.default_rng([int(spec.seed), 11]).permutation(n)
    entries = []
    start = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for idx in sorted(int(i) for i in perm[start:start + size]):
            entries.append({"index": idx, "split": name})
        start += size
    entries.sort(key=lambda e: e["index"])
    return {"spec": spec.to_dict(), "count": n, "ratios": list(split_ratios), "entries": entries}


def split_indices(manifest, split):
    return [e["index"] for e in manifest["entries"] if e["split"] == split]


def spec_from_manifest(manifest):
    d = dict(manifest["spec"])
    return PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def save_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    with open(path) as fh:
        return json.load(fh)
