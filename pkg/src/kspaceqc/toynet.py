"""Two-headed stride-1 3-D conv net: class logits plus log-variance maps.

Body: ``len(widths)`` 3x3x3 conv + ReLU layers at full resolution. Heads:
1x1x1 convs to ``num_classes`` logits and ``uncertainty_channels`` log
variances. The log-variance head is left unconstrained; callers exponentiate.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffkit as dk


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 3
    uncertainty_channels: int = 1
    widths: tuple = (8, 16, 8)
    kernel_size: int = 3
    seed: int = 0
    channel_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.in_channels != 1:
            raise ModelError("only single-channel input is supported")
        if self.num_classes < 2:
            raise ModelError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.uncertainty_channels < 1:
            raise ModelError(f"uncertainty_channels must be >= 1, got {self.uncertainty_channels}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ModelError(f"widths must be positive, got {self.widths}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ModelError(f"kernel_size must be odd, got {self.kernel_size}")
        names = tuple(self.channel_names) or default_channel_names(self.uncertainty_channels)
        if len(names) != self.uncertainty_channels or len(set(names)) != len(names):
            raise ModelError(f"need {self.uncertainty_channels} unique channel names, got {names}")
        object.__setattr__(self, "channel_names", tuple(names))

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def default_channel_names(k):
    return ("task",) + tuple(f"aug{i}" for i in range(1, k))


def param_shapes(cfg: NetConfig):
    k = cfg.kernel_size
    shapes = {}
    prev = cfg.in_channels
    for i, w in enumerate(cfg.widths):
        shapes[f"conv{i}.weight"] = (w, prev, k, k, k)
        shapes[f"conv{i}.bias"] = (w,)
        prev = w
    shapes["seg.weight"] = (cfg.num_classes, prev, 1, 1, 1)
    shapes["seg.bias"] = (cfg.num_classes,)
    shapes["unc.weight"] = (cfg.uncertainty_channels, prev, 1, 1, 1)
    shapes["unc.bias"] = (cfg.uncertainty_channels,)
    return shapes


def param_count(cfg: NetConfig):
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


@dataclass
class SegModel:
    config: NetConfig
    params: dict
    frozen: bool = False
    provenance: str = "task"
    meta: dict = field(default_factory=dict)

    @property
    def channel_names(self):
        return self.config.channel_names

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self):
        return SegModel(self.config, {k: v.copy() for k, v in self.params.items()},
                        False, self.provenance, dict(self.meta))


def init(cfg: NetConfig, provenance="task") -> SegModel:
    """Fan-in scaled uniform weights (He-uniform bound), zero biases."""
    rng = np.random.default_rng([int(cfg.seed), 3])
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            if name.startswith(("seg.", "unc.")):
                bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return SegModel(cfg, params, False, provenance)


def freeze(m: SegModel) -> SegModel:
    """Frozen copy: arrays read-only, never registered as trainable."""
    params = {}
    for k, v in m.params.items():
        a = np.array(v, copy=True)
        a.setflags(write=False)
        params[k] = a
    return replace(m, params=params, frozen=True)


def _as_batch(patch):
    x = patch.data if isinstance(patch, dk.Tensor) else np.asarray(patch, dtype=np.float64)
    if x.ndim == 3:
        x = x[None, None]
    elif x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != 1:
        raise ModelError(f"expected a (B, 1, X, Y, Z) patch, got shape {np.shape(x)}")
    return x


def forward(m: SegModel, patch, tape: dk.Tape | None = None):
    """Return ``(logits, s_maps)`` tensors of shape (B, C, ...) and (B, K, ...).

    When ``tape`` is given and the model is not frozen, parameters are
    registered on it under their own names.
    """
    x = _as_batch(patch)
    k = m.config.kernel_size
    if min(x.shape[2:]) < k:
        raise ModelError(f"patch {x.shape[2:]} smaller than kernel size {k}")
    if tape is not None and not m.frozen:
        p = {name: tape.parameter(name, v) for name, v in m.params.items()}
    else:
        # tensors pass through so callers can differentiate w.r.t. their own params
        p = {name: v if isinstance(v, dk.Tensor) else dk.Tensor(v) for name, v in m.params.items()}
    h = dk.Tensor(x)
    for i in range(len(m.config.widths)):
        h = dk.relu(dk.conv3d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"]))
    logits = dk.conv3d(h, p["seg.weight"], p["seg.bias"])
    s = dk.conv3d(h, p["unc.weight"], p["unc.bias"])
    return logits, s


def predict(m: SegModel, patch):
    """Array outputs of :func:`forward` without recording."""
    logits, s = forward(m, patch)
    return logits.data, s.data


# --- checkpoints -------------------------------------------------------------

MANIFEST = "manifest.json"


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(m: SegModel, directory, training_seed=None):
    """Write a manifest plus one little-endian float64 blob per tensor."""
    os.makedirs(directory, exist_ok=True)
    tensors = []
    for name in sorted(m.params):
        fname = name + ".bin"
        path = os.path.join(directory, fname)
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(m.params[name], dtype="<f8").tobytes())
        tensors.append({"name": name, "file": fname, "shape": list(m.params[name].shape),
                        "dtype": "<f8", "sha256": _sha256_file(path)})
    manifest = {
        "format": "kspaceqc-checkpoint-1",
        "config": m.config.to_dict(),
        "channel_names": list(m.channel_names),
        "provenance": m.provenance,
        "frozen": bool(m.frozen),
        "training_seed": training_seed,
        "model_checksum": m.checksum(),
        "meta": m.meta,
        "tensors": tensors,
    }
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_checkpoint(directory) -> SegModel:
    """Load and verify a checkpoint; any checksum or shape mismatch is fatal."""
    mpath = os.path.join(directory, MANIFEST)
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {mpath}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {mpath}: {exc}") from None
    cfg = NetConfig.from_dict(manifest["config"])
    expected = param_shapes(cfg)
    params = {}
    for t in manifest["tensors"]:
        path = os.path.join(directory, t["file"])
        if not os.path.exists(path):
            raise CheckpointError(f"missing tensor blob {path}")
        if _sha256_file(path) != t["sha256"]:
            raise CheckpointError(f"checksum mismatch for {path}; refusing to load")
        shape = tuple(t["shape"])
        if expected.get(t["name"]) != shape:
            raise CheckpointError(f"tensor {t['name']} has shape {shape}, config expects {expected.get(t['name'])}")
        arr = np.fromfile(path, dtype="<f8")
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"blob {path} holds {arr.size} values, expected {int(np.prod(shape))}")
        params[t["name"]] = arr.reshape(shape).astype(np.float64)
    if set(params) != set(expected):
        raise CheckpointError(f"checkpoint tensors {sorted(params)} do not match config {sorted(expected)}")
    if tuple(manifest["channel_names"]) != cfg.channel_names:
        raise CheckpointError("channel names in manifest disagree with config")
    m = SegModel(cfg, params, False, manifest.get("provenance", "task"), manifest.get("meta", {}))
    if m.checksum() != manifest.get("model_checksum", m.checksum()):
        raise CheckpointError(f"model checksum mismatch in {directory}")
    return freeze(m) if manifest.get("frozen") else m
