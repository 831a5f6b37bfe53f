"""k-space artefact simulation, bias field and spatial augmentation.

k-space arrays follow :mod:`kspaceqc.fftkit` conventions (unnormalised
forward transform, DC at index 0). "Centred" frequency coordinates map index
``i`` of an axis of length ``n`` to ``((i + n//2) % n) - n//2``.

:func:`corrupt` draws a random subset of artefacts, applies them in acquisition
order (spike, noise, then one of low-pass / wrap), and returns the magnitude
image rescaled to [0, 1] together with an :class:`AugmentationRecord` that
replays the exact corruption.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from . import _kernels
from .fftkit import fftn_array, ifftn_array
from .volume import ComplexVolume, LabelVolume, Volume, VolumeError, normalize_array


class AugmentationError(ValueError):
    pass


class AugmentationKind(str, Enum):
    RF_SPIKE = "rfspike"
    K_NOISE = "knoise"
    LOW_PASS = "lowpass"
    WRAP = "wrap"
    BIAS_FIELD = "biasfield"
    SPATIAL = "spatial"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "").replace("-", "")
        for kind in cls:
            if kind.value == key:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise AugmentationError(f"unknown augmentation kind {name!r}; valid kinds: {valid}")


KSPACE_ORDER = (AugmentationKind.RF_SPIKE, AugmentationKind.K_NOISE,
                AugmentationKind.LOW_PASS, AugmentationKind.WRAP)
IMAGE_ORDER = (AugmentationKind.SPATIAL, AugmentationKind.BIAS_FIELD)
APPLY_ORDER = IMAGE_ORDER + KSPACE_ORDER
SAMPLING_KINDS = (AugmentationKind.LOW_PASS, AugmentationKind.WRAP)


# --- parameters --------------------------------------------------------------

@dataclass(frozen=True)
class RfSpikeParams:
    location: tuple
    magnitude: float


@dataclass(frozen=True)
class KNoiseParams:
    target_snr_db: float


@dataclass(frozen=True)
class LowPassParams:
    axis: int
    ratio: float


@dataclass(frozen=True)
class WrapParams:
    axis: int
    proportion: float
    mode: str = "uniform-random"
    planes: tuple = ()


@dataclass(frozen=True)
class BiasFieldParams:
    coeffs: tuple


@dataclass(frozen=True)
class SpatialParams:
    flips: tuple = (False, False, False)
    angles_deg: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0

    @property
    def is_identity(self):
        return not any(self.flips) and not any(self.angles_deg) and self.scale == 1.0


PARAM_TYPES = {
    AugmentationKind.RF_SPIKE: RfSpikeParams,
    AugmentationKind.K_NOISE: KNoiseParams,
    AugmentationKind.LOW_PASS: LowPassParams,
    AugmentationKind.WRAP: WrapParams,
    AugmentationKind.BIAS_FIELD: BiasFieldParams,
    AugmentationKind.SPATIAL: SpatialParams,
}


def _params_from_dict(kind, d):
    cls = PARAM_TYPES[kind]
    d = dict(d)
    for key, val in d.items():
        if isinstance(val, list):
            d[key] = tuple(val)
    return cls(**d)


@dataclass(frozen=True)
class AugmentationStep:
    kind: AugmentationKind
    params: object
    seed: int

    def to_dict(self):
        return {"kind": self.kind.value, "params": asdict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d):
        kind = AugmentationKind.parse(d["kind"])
        return cls(kind, _params_from_dict(kind, d["params"]), int(d["seed"]))


@dataclass(frozen=True)
class AugmentationRecord:
    """Ordered list of applied steps; empty means the volume is clean."""

    steps: tuple = ()

    @property
    def clean(self):
        return not self.steps

    @property
    def kinds(self):
        return tuple(s.kind for s in self.steps)

    def contains(self, kind):
        return AugmentationKind.parse(kind) in self.kinds

    def to_dict(self):
        return {"steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(AugmentationStep.from_dict(s) for s in d.get("steps", [])))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PipelineConfig:
    enabled: tuple = KSPACE_ORDER
    rate: float = 0.5
    weights: dict = field(default_factory=dict)
    seed: int = 0
    multiple: bool = False
    snr_db_range: tuple = (-10.0, 30.0)
    lowpass_ratio_range: tuple = (2.0, 12.0)
    spike_magnitude_range: tuple = (0.5, 5.0)
    spike_exclusion_radius: float = 3.0
    wrap_proportion_range: tuple = (0.2, 0.7)
    bias_order: int = 2
    bias_coeff_scale: float = 0.5
    max_rotation_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        kinds = tuple(AugmentationKind.parse(k) for k in self.enabled)
        object.__setattr__(self, "enabled", kinds)
        w = {AugmentationKind.parse(k): float(v) for k, v in dict(self.weights).items()}
        object.__setattr__(self, "weights", w)
        if not 0.0 <= self.rate <= 1.0:
            raise AugmentationError(f"rate must lie in [0, 1], got {self.rate}")
        if any(v < 0 for v in w.values()):
            raise AugmentationError("selection weights must be non-negative")
        if self.rate > 0 and kinds and sum(self.weight(k) for k in kinds) <= 0:
            raise AugmentationError("selection weights of enabled kinds are all zero")
        lo, hi = self.snr_db_range
        if not -10.0 <= lo <= hi <= 30.0:
            raise AugmentationError(f"snr range must lie inside [-10, 30] dB, got {self.snr_db_range}")
        lo, hi = self.lowpass_ratio_range
        if not 2.0 <= lo <= hi <= 12.0:
            raise AugmentationError(f"low-pass ratio range must lie inside [2, 12], got {self.lowpass_ratio_range}")
        lo, hi = self.wrap_proportion_range
        if not 0.0 < lo <= hi < 1.0:
            raise AugmentationError(f"wrap proportion range must lie inside (0, 1), got {self.wrap_proportion_range}")
        if not 0 <= self.bias_order <= 3:
            raise AugmentationError(f"bias field order must be 0..3, got {self.bias_order}")
        if not 0.0 <= self.max_rotation_deg <= 10.0:
            raise AugmentationError("rotation limit must lie in [0, 10] degrees")
        lo, hi = self.scale_range
        if not 0.9 <= lo <= hi <= 1.1:
            raise AugmentationError(f"scale range must lie inside [0.9, 1.1], got {self.scale_range}")

    def weight(self, kind):
        return self.weights.get(kind, 1.0)

    def to_dict(self):
        d = asdict(self)
        d["enabled"] = [k.value for k in self.enabled]
        d["weights"] = {k.value: v for k, v in self.weights.items()}
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key, val in d.items():
            if isinstance(val, list) and key != "enabled":
                d[key] = tuple(val)
        if "enabled" in d:
            d["enabled"] = tuple(d["enabled"])
        return cls(**d)


# --- centred coordinates -----------------------------------------------------

def centered_freqs(n):
    i = np.arange(n)
    return ((i + n // 2) % n) - n // 2


def _centered_bounds(n):
    return -(n // 2), (n - 1) // 2


def _as_complex(k):
    return np.asarray(k.data if isinstance(k, ComplexVolume) else k, dtype=np.complex128)


# --- k-space operations ------------------------------------------------------

def apply_rf_spike(k: ComplexVolume, location, magnitude) -> ComplexVolume:
    """Add a conjugate-symmetric spike pair of size ``magnitude * max|k|``."""
    data = _as_complex(k)
    if magnitude < 0:
        raise AugmentationError(f"spike magnitude must be >= 0, got {magnitude}")
    loc = tuple(int(c) for c in location)
    if len(loc) != 3:
        raise AugmentationError(f"spike location must have three coordinates, got {location}")
    for c, n in zip(loc, data.shape):
        lo, hi = _centered_bounds(n)
        if not lo <= c <= hi:
            raise AugmentationError(f"spike location {loc} outside centred k-space bounds for shape {data.shape}")
    value = magnitude * np.abs(data).max()
    out = data.copy()
    idx = tuple(c % n for c, n in zip(loc, data.shape))
    partner = tuple((-c) % n for c, n in zip(loc, data.shape))
    out[idx] += value
    if partner != idx:
        out[partner] += value
    return ComplexVolume(out, k.spacing) if isinstance(k, ComplexVolume) else out


def noise_sigma(data, target_snr_db):
    """Per-component noise standard deviation for a target SNR in dB."""
    p_signal = float(np.mean(np.abs(data) ** 2))
    if p_signal <= 0:
        raise AugmentationError("k-space has zero signal power; SNR is undefined")
    p_noise = p_signal / (10.0 ** (target_snr_db / 10.0))
    return math.sqrt(p_noise / 2.0)


def apply_k_noise(k: ComplexVolume, target_snr_db, rng, noise_scale=1.0) -> ComplexVolume:
    """Add i.i.d. complex Gaussian noise hitting ``target_snr_db`` in expectation.

    Power is the mean squared modulus over k-space. ``noise_scale`` multiplies
    the noise standard deviation (0 gives the input back unchanged).
    """
    data = _as_complex(k)
    if not np.isfinite(target_snr_db):
        raise AugmentationError(f"target SNR must be finite, got {target_snr_db}")
    sigma = noise_sigma(data, target_snr_db) * noise_scale
    if sigma == 0:
        out = data.copy()
    else:
        noise = rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape)
        out = data + sigma * noise
    return ComplexVolume(out, k.spacing) if isinstance(k, ComplexVolume) else out


def lowpass_mask(n, ratio):
    """Boolean pass-band along one axis: ``|f| <= floor(n / (2 * ratio))``."""
    if ratio < 1:
        raise AugmentationError(f"low-pass ratio must be >= 1, got {ratio}")
    cutoff = math.floor(n / (2.0 * ratio))
    return np.abs(centered_freqs(n)) <= cutoff


def _axis_view(mask, axis):
    shape = [1, 1, 1]
    shape[axis] = mask.shape[0]
    return mask.reshape(shape)


def apply_lowpass(k: ComplexVolume, axis, ratio) -> ComplexVolume:
    """Zero every centred frequency with ``|f_axis| > floor(n / (2 * ratio))``."""
    data = _as_complex(k)
    if axis not in (0, 1, 2):
        raise AugmentationError(f"axis must be 0, 1 or 2, got {axis}")
    keep = lowpass_mask(data.shape[axis], ratio)
    out = np.where(_axis_view(keep, axis), data, 0.0)
    return ComplexVolume(out, k.spacing) if isinstance(k, ComplexVolume) else out


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def select_wrap_planes(n, proportion, mode, rng=None):
    """Indices of the k-space planes to zero, sorted ascending.

    ``uniform-random`` picks ``round(proportion * n)`` planes without
    replacement; ``regular-interval`` keeps every ``m``-th plane with
    ``m = round(1 / (1 - proportion))`` and zeroes the rest.
    """
    if not 0.0 <= proportion < 1.0:
        raise AugmentationError(f"wrap proportion must lie in (0, 1), got {proportion}")
    if mode == "uniform-random":
        count = _round_half_up(proportion * n)
        if count == 0:
            return ()
        if rng is None:
            raise AugmentationError("uniform-random wrap needs an rng")
        return tuple(int(i) for i in np.sort(rng.choice(n, size=count, replace=False)))
    if mode == "regular-interval":
        m = _round_half_up(1.0 / (1.0 - proportion))
        return tuple(i for i in range(n) if i % m != 0)
    raise AugmentationError(f"wrap mode must be 'uniform-random' or 'regular-interval', got {mode!r}")


def apply_wrap(k: ComplexVolume, axis, proportion, mode="uniform-random", rng=None, planes=None) -> ComplexVolume:
    """Zero k-space planes perpendicular to ``axis``.

    Pass ``planes`` to replay a recorded selection; otherwise it is drawn
    with :func:`select_wrap_planes`.
    """
    data = _as_complex(k)
    if axis not in (0, 1, 2):
        raise AugmentationError(f"axis must be 0, 1 or 2, got {axis}")
    n = data.shape[axis]
    if planes is None:
        planes = select_wrap_planes(n, proportion, mode, rng)
    keep = np.ones(n, dtype=bool)
    keep[list(planes)] = False
    out = np.where(_axis_view(keep, axis), data, 0.0)
    return ComplexVolume(out, k.spacing) if isinstance(k, ComplexVolume) else out


# --- image-domain operations -------------------------------------------------

_N_TERMS = {1: 0, 4: 1, 10: 2, 20: 3}


def monomial_exponents(order):
    """Exponents ``(a, b, c)`` of ``x^a y^b z^c`` in graded order."""
    out = []
    for d in range(order + 1):
        for a in range(d, -1, -1):
            for b in range(d - a, -1, -1):
                out.append((a, b, d - a - b))
    return out


def normalized_coords(n):
    if n == 1:
        return np.zeros(1)
    return 2.0 * np.arange(n) / (n - 1) - 1.0


def bias_field(shape, coeffs):
    """``exp(P(x, y, z))`` on coordinates normalised to [-1, 1]."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size not in _N_TERMS:
        raise AugmentationError(
            f"bias coefficient vector must have 1, 4, 10 or 20 entries (order 0-3), got {coeffs.size}")
    if not np.all(np.isfinite(coeffs)):
        raise AugmentationError("bias coefficients must be finite")
    order = _N_TERMS[coeffs.size]
    x = normalized_coords(shape[0])[:, None, None]
    y = normalized_coords(shape[1])[None, :, None]
    z = normalized_coords(shape[2])[None, None, :]
    poly = np.zeros(shape)
    for c, (a, b, d) in zip(coeffs, monomial_exponents(order)):
        if c != 0.0:
            poly = poly + c * (x ** a) * (y ** b) * (z ** d)
    return np.exp(poly)


def apply_bias_field(v: Volume, coeffs) -> Volume:
    """Multiply by a smooth polynomial bias field and rescale to [0, 1]."""
    data = np.asarray(v.data, dtype=np.float64)
    return v.with_data(normalize_array(data * bias_field(data.shape, coeffs)))


def _rotation(angles_deg):
    ax, ay, az = (math.radians(a) for a in angles_deg)
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _check_spatial(params):
    if len(params.flips) != 3 or len(params.angles_deg) != 3:
        raise AugmentationError("spatial params need three flips and three angles")
    if any(abs(a) > 10.0 for a in params.angles_deg):
        raise AugmentationError(f"rotation angles must lie in [-10, 10] degrees, got {params.angles_deg}")
    if not 0.9 <= params.scale <= 1.1:
        raise AugmentationError(f"scale must lie in [0.9, 1.1], got {params.scale}")


def spatial_arrays(image, labels, params: SpatialParams):
    """Array-level :func:`apply_spatial`; ``labels`` may be None."""
    _check_spatial(params)
    img = np.asarray(image, dtype=np.float64)
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    for axis, flip in enumerate(params.flips):
        if flip:
            img = np.flip(img, axis)
            lab = None if lab is None else np.flip(lab, axis)
    img = np.ascontiguousarray(img)
    lab = None if lab is None else np.ascontiguousarray(lab)
    if not any(params.angles_deg) and params.scale == 1.0:
        return img, lab
    shape = img.shape
    center = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    pts = grid.reshape(3, -1) - center[:, None]
    # inverse map: output point -> source point
    src = (_rotation(params.angles_deg).T @ pts) / params.scale + center[:, None]
    src = np.ascontiguousarray(src)
    out_img = _kernels.trilinear_sample(img, src).reshape(shape)
    out_lab = None if lab is None else _kernels.nearest_sample(lab, src).reshape(shape)
    return out_img, out_lab


def apply_spatial(v: Volume, labels: LabelVolume, params: SpatialParams, rng=None):
    """Flip, rotate about the centre and scale image and labels together.

    The image is resampled trilinearly, labels by nearest neighbour; voxels
    mapping outside the field become 0 / background. ``rng`` is unused and
    kept for call-signature uniformity with the other augmentations.
    """
    img, lab = spatial_arrays(v.data, labels.data, params)
    return v.with_data(img), LabelVolume(lab, labels.num_classes, labels.spacing)


# --- sampling and the pipeline -----------------------------------------------

def _sample_spike_location(shape, radius, rng):
    """Uniform over centred k-space outside a ball of ``radius`` around DC."""
    axes = [np.arange(lo, hi + 1) for lo, hi in (_centered_bounds(n) for n in shape)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij")).reshape(3, -1)
    ok = np.sqrt((grid.astype(np.float64) ** 2).sum(axis=0)) > radius
    candidates = grid[:, ok] if ok.any() else grid
    pick = int(rng.integers(candidates.shape[1]))
    return tuple(int(c) for c in candidates[:, pick])


def sample_params(kind, cfg: PipelineConfig, shape, rng):
    """Draw parameters for one augmentation kind."""
    if kind is AugmentationKind.RF_SPIKE:
        loc = _sample_spike_location(shape, cfg.spike_exclusion_radius, rng)
        return RfSpikeParams(loc, float(rng.uniform(*cfg.spike_magnitude_range)))
    if kind is AugmentationKind.K_NOISE:
        return KNoiseParams(float(rng.uniform(*cfg.snr_db_range)))
    if kind is AugmentationKind.LOW_PASS:
        return LowPassParams(int(rng.integers(3)), float(rng.uniform(*cfg.lowpass_ratio_range)))
    if kind is AugmentationKind.WRAP:
        mode = "uniform-random" if rng.random() < 0.5 else "regular-interval"
        return WrapParams(int(rng.integers(3)), float(rng.uniform(*cfg.wrap_proportion_range)), mode)
    if kind is AugmentationKind.BIAS_FIELD:
        n = len(monomial_exponents(cfg.bias_order))
        coeffs = rng.uniform(-cfg.bias_coeff_scale, cfg.bias_coeff_scale, size=n)
        coeffs[0] = 0.0
        return BiasFieldParams(tuple(float(c) for c in coeffs))
    if kind is AugmentationKind.SPATIAL:
        flips = tuple(bool(rng.random() < 0.5) for _ in range(3))
        m = cfg.max_rotation_deg
        angles = tuple(float(rng.uniform(-m, m)) for _ in range(3))
        return SpatialParams(flips, angles, float(rng.uniform(*cfg.scale_range)))
    raise AugmentationError(f"unhandled kind {kind}")


def choose_kinds(cfg: PipelineConfig, rng):
    """Kinds to apply to one corrupted volume, in application order."""
    kinds = [k for k in cfg.enabled if cfg.weight(k) > 0]
    if not kinds:
        return []
    if not cfg.multiple:
        w = np.array([cfg.weight(k) for k in kinds])
        return [kinds[int(rng.choice(len(kinds), p=w / w.sum()))]]
    chosen = [k for k in kinds if rng.random() < 0.5]
    if not chosen:
        w = np.array([cfg.weight(k) for k in kinds])
        chosen = [kinds[int(rng.choice(len(kinds), p=w / w.sum()))]]
    sampling = [k for k in chosen if k in SAMPLING_KINDS]
    if len(sampling) > 1:
        keep = sampling[int(rng.integers(len(sampling)))]
        chosen = [k for k in chosen if k not in SAMPLING_KINDS or k is keep]
    return [k for k in APPLY_ORDER if k in chosen]


def _step_rng(seed):
    return np.random.default_rng(seed)


def apply_record(image, record: AugmentationRecord, labels=None):
    """Replay a record on an array image (and optional labels)."""
    img = np.asarray(image, dtype=np.float64)
    lab = labels
    if record.clean:
        return img, lab
    kspace = None
    for step in record.steps:
        p = step.params
        if step.kind is AugmentationKind.SPATIAL:
            img, lab = spatial_arrays(img, lab, p)
        elif step.kind is AugmentationKind.BIAS_FIELD:
            img = normalize_array(img * bias_field(img.shape, p.coeffs))
        else:
            if kspace is None:
                kspace = fftn_array(img)
            if step.kind is AugmentationKind.RF_SPIKE:
                kspace = apply_rf_spike(kspace, p.location, p.magnitude)
            elif step.kind is AugmentationKind.K_NOISE:
                kspace = apply_k_noise(kspace, p.target_snr_db, _step_rng(step.seed))
            elif step.kind is AugmentationKind.LOW_PASS:
                kspace = apply_lowpass(kspace, p.axis, p.ratio)
            elif step.kind is AugmentationKind.WRAP:
                kspace = apply_wrap(kspace, p.axis, p.proportion, p.mode, planes=p.planes)
    if kspace is not None:
        img = np.abs(ifftn_array(kspace))
    return normalize_array(img), lab


def draw_record(cfg: PipelineConfig, shape, rng) -> AugmentationRecord:
    """Sample the corruption decision and every step's parameters."""
    if not rng.random() < cfg.rate:
        return AugmentationRecord()
    steps = []
    for kind in choose_kinds(cfg, rng):
        params = sample_params(kind, cfg, shape, rng)
        seed = int(rng.integers(2 ** 63 - 1))
        if kind is AugmentationKind.WRAP:
            planes = select_wrap_planes(shape[params.axis], params.proportion, params.mode, _step_rng(seed))
            params = replace(params, planes=planes)
        steps.append(AugmentationStep(kind, params, seed))
    return AugmentationRecord(tuple(steps))


def corrupt_pair(v: Volume, labels: LabelVolume | None, cfg: PipelineConfig, rng):
    """:func:`corrupt` that also carries labels through spatial transforms."""
    data = np.asarray(v.data)
    if data.min() < 0 or data.max() > 1:
        raise VolumeError("corrupt expects a volume normalised to [0, 1]")
    record = draw_record(cfg, data.shape, rng)
    if record.clean:
        return v, labels, record
    img, lab = apply_record(data, record, None if labels is None else labels.data)
    out_labels = labels if lab is None or labels is None else LabelVolume(lab, labels.num_classes, labels.spacing)
    return v.with_data(img), out_labels, record


def corrupt(v: Volume, cfg: PipelineConfig, rng):
    """Randomly corrupt a [0, 1] volume; returns ``(volume, record)``.

    With probability ``1 - cfg.rate`` the input comes back untouched with an
    empty record.
    """
    out, _, record = corrupt_pair(v, None, cfg, rng)
    return out, record


def volume_rng(seed, index):
    """Independent generator for volume ``index`` of a seeded batch."""
    return np.random.default_rng([int(seed), int(index)])
