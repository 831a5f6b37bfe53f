"""Quality-control outputs: entropy, per-source variance summaries, volume error bars.

Entropy is in nats. Error bars use a Bernoulli-sum variance per class,
inflated by how far the image's mean entropy exceeds that of a clean
reference run of the same model:

    Var(V_c) = sum p_c (1 - p_c) * (max(0, H - H0) / H0 + 1)
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .volume import UncertaintyMap, Volume


class QcError(ValueError):
    pass


def _check_probabilities(p, tol=1e-6):
    # fixed memory layout so reductions give identical bits for identical values
    p = np.ascontiguousarray(p, dtype=np.float64)
    if p.ndim < 2:
        raise QcError(f"probabilities need a leading class axis, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < -tol).any():
        raise QcError("probabilities must be finite and non-negative")
    err = np.abs(p.sum(axis=0) - 1.0).max()
    if err > tol:
        raise QcError(f"probabilities do not sum to 1 per voxel (max deviation {err:.3g})")
    return p


def entropy_array(p):
    p = _check_probabilities(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    # clip tiny negative round-off so the map stays inside [0, ln C]
    return np.clip(-t.sum(axis=0), 0.0, np.log(p.shape[0]))


def entropy_map(probabilities) -> Volume:
    """Per-voxel entropy ``-sum_c p_c log p_c`` of a (C, X, Y, Z) array."""
    return Volume(entropy_array(probabilities))


def decompose(u: UncertaintyMap):
    """Mean, max and 95th percentile of each channel's variance and of their sum."""
    out = {"channels": {}}
    total = np.zeros(u.data.shape[1:])
    for name in u.channels:
        v = u.variance(name)
        total = total + v
        out["channels"][name] = _stats(v)
    out["total"] = _stats(total)
    out["total_map"] = total
    return out


def _stats(v):
    return {"mean": float(v.mean()), "max": float(v.max()), "p95": float(np.percentile(v, 95))}


def volume_error_bars(probabilities, baseline_entropy_mean, entropy_mean=None):
    """Per-class ``(estimate, ci_low, ci_high)`` in voxels, at +-1 sigma."""
    if baseline_entropy_mean is None:
        raise QcError("volume error bars need the clean-baseline mean entropy")
    h0 = float(baseline_entropy_mean)
    if not np.isfinite(h0) or h0 <= 0:
        raise QcError(f"baseline entropy must be positive and finite, got {baseline_entropy_mean}")
    p = _check_probabilities(probabilities)
    h = float(entropy_array(p).mean()) if entropy_mean is None else float(entropy_mean)
    factor = max(0.0, h - h0) / h0 + 1.0
    axes = tuple(range(1, p.ndim))
    est = p.sum(axis=axes)
    var = (p * (1.0 - p)).sum(axis=axes) * factor
    sd = np.sqrt(np.maximum(var, 0.0))
    return [(float(e), float(e - s), float(e + s)) for e, s in zip(est, sd)], factor


def calibrate_thresholds(clean_means):
    """Flag threshold per source: mean + 3 std of its clean-run means."""
    out = {}
    for name, values in clean_means.items():
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise QcError(f"no clean values for source {name!r}")
        out[name] = float(v.mean() + 3.0 * v.std())
    return out


def input_checksum(v):
    a = np.ascontiguousarray(v.data if isinstance(v, Volume) else v, dtype="<f8")
    return hashlib.sha256(a.tobytes()).hexdigest()


@dataclass
class QcReport:
    sources: dict
    total_mean: float
    total_max: float
    mean_entropy: float
    volumes: list  # one dict per class
    flags: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def check(self):
        s = sum(d["mean"] for d in self.sources.values())
        if abs(s - self.total_mean) > 1e-10 * max(1.0, abs(s)):
            raise QcError(f"total variance {self.total_mean} != sum of source means {s}")
        for v in self.volumes:
            if not v["ci_low"] <= v["estimate"] <= v["ci_high"]:
                raise QcError(f"confidence interval does not bracket the estimate: {v}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).check()

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def build_report(probabilities, uncertainty: UncertaintyMap, baseline_entropy_mean,
                 thresholds=None, provenance=None) -> QcReport:
    dec = decompose(uncertainty)
    h = float(entropy_array(probabilities).mean())
    bars, factor = volume_error_bars(probabilities, baseline_entropy_mean, h)
    volumes = [{"class": c, "estimate": e, "ci_low": lo, "ci_high": hi}
               for c, (e, lo, hi) in enumerate(bars)]
    thresholds = dict(thresholds or {})
    flags = {name: bool(dec["channels"][name]["mean"] > thr)
             for name, thr in thresholds.items() if name in dec["channels"]}
    prov = dict(provenance or {})
    prov.setdefault("entropy_scale_factor", factor)
    prov.setdefault("baseline_entropy_mean", float(baseline_entropy_mean))
    return QcReport(dec["channels"], sum(d["mean"] for d in dec["channels"].values()),
                    dec["total"]["max"], h, volumes, flags, thresholds, prov).check()


# --- montage ------------------------------------------------------------------

def mid_slices(a):
    """Axial, coronal and sagittal mid-slices of a 3-D array."""
    x, y, z = (n // 2 for n in a.shape)
    return [a[:, :, z], a[:, y, :], a[x, :, :]]


def _to_u8(tile):
    lo, hi = float(tile.min()), float(tile.max())
    if hi <= lo:
        return np.zeros(tile.shape, dtype=np.uint8)
    return np.round((tile - lo) / (hi - lo) * 255.0).astype(np.uint8)


def montage(image, labels, uncertainty: UncertaintyMap):
    """3 rows (views) x (2 + K) columns: input, segmentation, each variance channel.

    Each tile is scaled from its own [min, max] to 0..255 and padded to the
    largest slice shape.
    """
    panels = [np.asarray(image, dtype=np.float64), np.asarray(labels, dtype=np.float64)]
    panels += [uncertainty.variance(n) for n in uncertainty.channels]
    rows = [[_to_u8(s) for s in mid_slices(p)] for p in panels]  # panel-major
    th = max(t.shape[0] for col in rows for t in col)
    tw = max(t.shape[1] for col in rows for t in col)
    out = np.zeros((3 * th, len(panels) * tw), dtype=np.uint8)
    for j, col in enumerate(rows):
        for i, t in enumerate(col):
            out[i * th:i * th + t.shape[0], j * tw:j * tw + t.shape[1]] = t
    return out


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise QcError("PGM writer expects a 2-D uint8 array")
    try:
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
            fh.write(np.ascontiguousarray(img).tobytes())
    except OSError as exc:
        raise QcError(f"cannot write montage {path}: {exc}") from exc


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise QcError(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise QcError(f"only 8-bit PGM is supported, got maxval {maxval}")
    pix = parts[4]
    if len(pix) < w * h:
        raise QcError(f"{path} is truncated")
    return np.frombuffer(pix[:w * h], dtype=np.uint8).reshape(h, w)


ERROR_BAR_COLUMNS = ("level", "estimate", "ci_low", "ci_high")


def write_error_bars(path, rows):
    """CSV with one row per corruption level: ``(level, estimate, ci_low, ci_high)``."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ERROR_BAR_COLUMNS)
            for r in rows:
                w.writerow([repr(float(x)) if not isinstance(x, str) else x for x in r])
    except OSError as exc:
        raise QcError(f"cannot write error-bar CSV {path}: {exc}") from exc


def read_error_bars(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != ERROR_BAR_COLUMNS:
        raise QcError(f"{path} lacks the expected header {ERROR_BAR_COLUMNS}")
    return [tuple(float(x) for x in r) for r in rows[1:]]


def emit_report(out_dir, report: QcReport, image, labels, uncertainty: UncertaintyMap,
                error_bar_rows=None, stem="qc"):
    """Write ``<stem>.json``, ``<stem>_montage.pgm`` and optionally ``<stem>_error_bars.csv``."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise QcError(f"cannot create report directory {out_dir}: {exc}") from exc
    paths = {"report": os.path.join(out_dir, stem + ".json"),
             "montage": os.path.join(out_dir, stem + "_montage.pgm")}
    try:
        with open(paths["report"], "w") as fh:
            fh.write(report.to_json() + "\n")
    except OSError as exc:
        raise QcError(f"cannot write report {paths['report']}: {exc}") from exc
    write_pgm(paths["montage"], montage(image, labels, uncertainty))
    if error_bar_rows is not None:
        paths["error_bars"] = os.path.join(out_dir, stem + "_error_bars.csv")
        write_error_bars(paths["error_bars"], error_bar_rows)
    return paths
