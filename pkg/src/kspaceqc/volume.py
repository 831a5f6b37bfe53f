"""Volume, k-space, label and uncertainty containers.

Arrays are stored as numpy arrays of shape ``(nx, ny, nz)`` in Fortran
(x-fastest) memory order, so that ``data.ravel(order="F")`` is the canonical
voxel stream used by file I/O. Containers are frozen dataclasses whose arrays
are marked read-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class VolumeError(ValueError):
    """Raised for malformed volume data (bad shape, non-finite values...)."""


def _frozen(arr, dtype):
    a = np.asfortranarray(np.array(arr, dtype=dtype, copy=True))
    a.setflags(write=False)
    return a


def _check_dims(shape):
    if len(shape) != 3:
        raise VolumeError(f"expected a 3-D array, got shape {shape}")
    if any(n < 1 for n in shape):
        raise VolumeError(f"dimensions must be positive, got {shape}")


def _check_spacing(spacing):
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise VolumeError(f"spacing must be three positive finite values, got {spacing}")
    return sp


@dataclass(frozen=True)
class Volume:
    """Real 3-D scalar field with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        _check_dims(arr.shape)
        if np.iscomplexobj(arr):
            raise VolumeError("Volume data must be real; use ComplexVolume")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("Volume data contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr, np.float64))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data):
        return Volume(data, self.spacing)


@dataclass(frozen=True)
class ComplexVolume:
    """Complex 3-D field, typically the k-space of a :class:`Volume`."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        _check_dims(arr.shape)
        if not (np.all(np.isfinite(arr.real)) and np.all(np.isfinite(arr.imag))):
            raise VolumeError("ComplexVolume data contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr, np.complex128))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data):
        return ComplexVolume(data, self.spacing)


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel class indices in ``0..num_classes-1``."""

    data: np.ndarray
    num_classes: int
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        _check_dims(arr.shape)
        if self.num_classes < 2:
            raise VolumeError(f"num_classes must be >= 2, got {self.num_classes}")
        if arr.dtype.kind == "f":
            if not np.all(arr == np.round(arr)):
                raise VolumeError("label values must be integers")
        ints = arr.astype(np.int64)
        if ints.min() < 0 or ints.max() >= self.num_classes:
            raise VolumeError(
                f"label values must lie in [0, {self.num_classes - 1}], "
                f"got range [{ints.min()}, {ints.max()}]"
            )
        object.__setattr__(self, "data", _frozen(ints, np.int64))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape


@dataclass(frozen=True)
class UncertaintyMap:
    """Log-variance maps ``s = log(sigma^2)``, one named channel per source.

    ``data`` has shape ``(K, nx, ny, nz)``.
    """

    data: np.ndarray
    channels: tuple = field(default=("task",))
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise VolumeError(f"expected (K, nx, ny, nz) log-variance array, got {arr.shape}")
        _check_dims(arr.shape[1:])
        names = tuple(str(c) for c in self.channels)
        if len(names) != arr.shape[0]:
            raise VolumeError(f"{len(names)} channel names for {arr.shape[0]} channels")
        if len(set(names)) != len(names):
            raise VolumeError(f"channel names must be unique, got {names}")
        with np.errstate(over="ignore", under="ignore"):
            var = np.exp(arr)
        if not (np.all(np.isfinite(var)) and np.all(var > 0)):
            raise VolumeError("exp(s) must be finite and positive for every stored value")
        a = np.array(arr, copy=True)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)
        object.__setattr__(self, "channels", names)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape[1:]

    def variance(self, name=None):
        """``exp(s)`` for one channel, or all channels when ``name`` is None."""
        if name is None:
            return np.exp(self.data)
        return np.exp(self.data[self.channels.index(name)])


def normalize_unit(v: Volume) -> Volume:
    """Affine rescale to [0, 1]; a constant volume maps to all zeros."""
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise VolumeError("cannot normalise a volume with non-finite values")
    lo, hi = data.min(), data.max()
    if hi == lo:
        return v.with_data(np.zeros_like(data))
    return v.with_data((data - lo) / (hi - lo))


def normalize_array(data):
    """Array form of :func:`normalize_unit`."""
    lo, hi = data.min(), data.max()
    if hi == lo:
        return np.zeros_like(data, dtype=np.float64)
    return (data - lo) / (hi - lo)


def magnitude(k: ComplexVolume) -> Volume:
    """Per-voxel modulus of a complex volume."""
    return Volume(np.abs(k.data), k.spacing)
