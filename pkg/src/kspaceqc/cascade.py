"""Three-stage task / teacher / student training and sliding-window inference.

Stage 1 trains a task network on clean phantoms with the weighted CE loss.
Stage 2 trains one teacher per augmentation kind on a 50 % corrupted stream,
its task channel tied to the frozen task network's output on the same patch.
Stage 3 trains a student with one log-variance channel per source, each
channel tied to the frozen network that owns it.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffkit as dk
from . import losses
from .kspace_aug import (AugmentationKind, PipelineConfig, apply_record, draw_record)
from .phantom import SHELL, PhantomSpec, dataset, generate, split_indices
from .toynet import NetConfig, SegModel, forward, freeze, init, load_checkpoint, predict, save_checkpoint
from .volume import UncertaintyMap, Volume

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "stage", "total_loss", "ce_term", "logvar_term", "match_l1",
               "match_grad", "match_ssim", "epsilon", "lr", "val_dice")


class CascadeError(RuntimeError):
    pass


class TrainingDiverged(CascadeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    full_scale_iterations: int = 30000
    lr: float = 1e-3  # desk scale: 15x fewer steps than full_scale_lr was tuned for
    full_scale_lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 2
    patch_size: int = 16
    registry: tuple = ("knoise", "lowpass")
    rate: float = 0.5
    multiple: bool = False
    seed: int = 0
    validation_every: int = 100
    validation_count: int = 8
    epsilon: float = 0.05
    epsilon_floor: float = 1e-3
    plateau_window: int = 10
    plateau_tolerance: float = 1e-3
    widths: tuple = (8, 16, 8)
    num_classes: int = 3
    warm_start: bool = True
    aug_channel_init: str = "copy-task"  # or "constant"
    aug_log_variance_init: float = -4.0  # used by "constant"
    pipeline: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "registry", tuple(AugmentationKind.parse(k).value for k in self.registry))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not 0.0 <= self.rate <= 1.0:
            raise CascadeError(f"rate must lie in [0, 1], got {self.rate}")
        if self.iterations < 0 or self.batch_size < 1 or self.patch_size < 3:
            raise CascadeError("iterations >= 0, batch_size >= 1 and patch_size >= 3 required")
        if self.aug_channel_init not in ("copy-task", "constant"):
            raise CascadeError(f"aug_channel_init must be 'copy-task' or 'constant', got {self.aug_channel_init!r}")
        if len(set(self.registry)) != len(self.registry):
            raise CascadeError(f"duplicate kinds in registry {self.registry}")

    @property
    def kinds(self):
        return tuple(AugmentationKind.parse(k) for k in self.registry)

    def schedule(self):
        return losses.EpsilonSchedule(self.epsilon, self.epsilon_floor, self.lr,
                                      self.plateau_window, self.plateau_tolerance)

    def pipeline_for(self, kinds):
        base = dict(self.pipeline)
        base.update(enabled=tuple(k.value for k in kinds), rate=self.rate, multiple=self.multiple)
        return PipelineConfig.from_dict(base)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class PhantomData:
    """In-memory image/label arrays with train/valid/test splits."""

    def __init__(self, images, labels, splits, num_classes=3):
        self.images = images
        self.labels = labels
        self.splits = splits
        self.num_classes = num_classes

    @classmethod
    def generate(cls, spec: PhantomSpec, n, ratios=(0.8, 0.1, 0.1)):
        manifest = dataset(spec, n, ratios)
        images, labels = {}, {}
        for i in range(n):
            v, lab = generate(spec, i)
            images[i] = np.ascontiguousarray(v.data)
            labels[i] = np.ascontiguousarray(lab.data)
        splits = {s: split_indices(manifest, s) for s in ("train", "valid", "test")}
        return cls(images, labels, splits, spec.num_classes)

    def split(self, name):
        return self.splits[name]


def stage_name(stage, kind=None):
    return stage if kind is None else f"{stage}-{AugmentationKind.parse(kind).value}"


def _stage_seed(cfg, name):
    table = {"task": 1, "student": 2}
    if name in table:
        return [cfg.seed, table[name]]
    return [cfg.seed, 3, list(AugmentationKind).index(AugmentationKind.parse(name.split("-", 1)[1]))]


# --- data --------------------------------------------------------------------

def _crop(arr, start, p):
    x, y, z = start
    return arr[x:x + p, y:y + p, z:z + p]


def _patch_starts(shape, p, rng):
    return tuple(int(rng.integers(0, max(n - p, 0) + 1)) for n in shape)


def _fit_patch(arr, p, fill=0):
    """Zero-pad an array up to at least ``p`` per axis."""
    pad = [(0, max(p - n, 0)) for n in arr.shape]
    if any(b for _, b in pad):
        return np.pad(arr, pad, constant_values=fill)
    return arr


def _draw_batch(data, pipeline, cfg, rng):
    p = cfg.patch_size
    train = data.split("train")
    xs, clean, ys, recs = [], [], [], []
    for _ in range(cfg.batch_size):
        idx = train[int(rng.integers(len(train)))]
        img = data.images[idx]
        rec = draw_record(pipeline, img.shape, rng)
        cor, _ = apply_record(img, rec)
        start = _patch_starts(img.shape, p, rng)
        xs.append(_fit_patch(_crop(cor, start, p), p))
        clean.append(_fit_patch(_crop(img, start, p), p))
        ys.append(_fit_patch(_crop(data.labels[idx], start, p), p))
        recs.append(rec)
    return np.stack(xs)[:, None], np.stack(clean)[:, None], np.stack(ys), recs


def _validation_set(data, pipeline, cfg):
    """Fixed held-out inputs (full volumes) with deterministic corruption."""
    out = []
    for idx in data.split("valid")[:cfg.validation_count]:
        img = data.images[idx]
        rng = np.random.default_rng([cfg.seed, 5, idx])
        rec = draw_record(pipeline, img.shape, rng) if pipeline is not None else None
        cor = img if rec is None else apply_record(img, rec)[0]
        out.append((cor[None, None], img[None, None], data.labels[idx][None], rec))
    return out


# --- losses per stage --------------------------------------------------------

def _targets(stage, task, teachers, x, clean, recs):
    """Detached pseudo-label log-variance maps, one (B, 1, ...) array per channel."""
    if stage == "task":
        return []
    t_task = predict(task, x)[1][:, :1]
    if stage.startswith("teacher"):
        return [t_task]
    out = [t_task]
    for kind, teacher in teachers.items():
        # a teacher sees the corrupted patch only when its own kind was applied
        has = np.array([r is not None and kind in r.kinds for r in recs])
        inputs = np.where(has.reshape((-1,) + (1,) * (x.ndim - 1)), x, clean)
        out.append(predict(teacher, inputs)[1][:, 1:2])
    return out


def stage_loss(stage, logits, s, labels, targets, epsilon):
    """Loss tensor and breakdown for a stage given model outputs."""
    ce = losses.cross_entropy(logits, labels)
    K = s.shape[1]
    chans = [dk.take_channel(s, i) for i in range(K)]
    if stage == "task":
        return losses.combined_loss(ce, chans[0], [], epsilon)
    if stage.startswith("teacher"):
        return losses.aug_loss(ce, chans[0], chans[1], targets[0], epsilon)
    total, bd = losses.combined_loss(ce, chans[0], chans[1:], epsilon)
    l1 = lg = ls = 0.0
    for ch, target in zip(chans, targets):
        m, mbd = losses.uncertainty_match_loss(ch, target)
        total = dk.add(total, m)
        l1 += mbd.match_l1
        lg += mbd.match_grad
        ls += mbd.match_ssim
    bd = replace(bd, total=total.item(), match_l1=l1, match_grad=lg, match_ssim=ls)
    return total, bd


def dice(pred, truth, cls):
    a = pred == cls
    b = truth == cls
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2.0 * (a & b).sum() / denom)


# --- the training loop -------------------------------------------------------

def _write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _fmt(x):
    return repr(float(x))


def _train_stage(stage, model, data, cfg: TrainConfig, pipeline, task=None, teachers=None, out_dir=None):
    teachers = teachers or {}
    rng = np.random.default_rng(_stage_seed(cfg, stage))
    sched = cfg.schedule()
    opt = dk.Adam(model.params, lr=sched.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    val = _validation_set(data, pipeline, cfg)
    val_targets = [_targets(stage, task, teachers, x, c, [r]) for x, c, _, r in val]
    val_losses = []
    rows = []
    good = model.copy()
    ckpt_dir = None if out_dir is None else os.path.join(out_dir, stage)
    for it in range(1, cfg.iterations + 1):
        x, clean, y, recs = _draw_batch(data, pipeline or _CLEAN, cfg, rng)
        targets = _targets(stage, task, teachers, x, clean, recs)
        tape = dk.Tape()
        logits, s = forward(model, x, tape)
        loss, bd = stage_loss(stage, logits, s, y, targets, sched.epsilon)
        if not np.isfinite(loss.data).all():
            model.params.update(good.params)
            if ckpt_dir is not None:
                save_checkpoint(model, ckpt_dir, cfg.seed)
            raise TrainingDiverged(f"{stage}: non-finite loss at iteration {it}", ckpt_dir)
        opt.step(dk.backward(tape, loss))
        row = {"iteration": it, "stage": stage, "total_loss": _fmt(bd.total), "ce_term": _fmt(bd.weighted_ce_term),
               "logvar_term": _fmt(bd.log_variance_term), "match_l1": _fmt(bd.match_l1),
               "match_grad": _fmt(bd.match_grad), "match_ssim": _fmt(bd.match_ssim),
               "epsilon": _fmt(sched.epsilon), "lr": _fmt(sched.learning_rate), "val_dice": ""}
        if it % cfg.validation_every == 0 and val:
            vloss, vdice = _validate(stage, model, val, val_targets, sched.epsilon)
            row["val_dice"] = _fmt(vdice)
            val_losses.append(vloss)
            good = model.copy()
            new = losses.epsilon_step(sched, val_losses)
            if new is not sched and new.halvings != sched.halvings:
                log.info("%s: plateau at iteration %d, epsilon %.6g -> %.6g", stage, it, sched.epsilon, new.epsilon)
                val_losses = []
                opt.lr = new.learning_rate
            sched = new
        rows.append(row)
    model.meta = dict(model.meta, stage=stage, epsilon=sched.epsilon, lr=sched.learning_rate,
                      iterations=cfg.iterations)
    if ckpt_dir is not None:
        save_checkpoint(model, ckpt_dir, cfg.seed)
        _write_log(rows, os.path.join(ckpt_dir, "train_log.csv"))
    return model, rows


_CLEAN = PipelineConfig(enabled=(), rate=0.0)


def _validate(stage, model, val, val_targets, epsilon):
    total = 0.0
    inter = denom = 0
    for (x, _, y, _), targets in zip(val, val_targets):
        logits, s = forward(model, x)
        _, bd = stage_loss(stage, logits, s, y, targets, epsilon)
        total += bd.total
        pred = logits.data.argmax(axis=1)
        a, b = pred == SHELL, y == SHELL
        inter += int((a & b).sum())
        denom += int(a.sum() + b.sum())
    return total / len(val), (1.0 if denom == 0 else 2.0 * inter / denom)


def _net_config(cfg, names, stage):
    seed = int(np.random.default_rng(_stage_seed(cfg, stage)).integers(2 ** 31))
    return NetConfig(num_classes=cfg.num_classes, uncertainty_channels=len(names), widths=cfg.widths,
                     seed=seed, channel_names=tuple(names))


def train_task(data: PhantomData, cfg: TrainConfig, out_dir=None) -> SegModel:
    """Stage 1: one log-variance channel, clean data only."""
    model = init(_net_config(cfg, ("task",), "task"), provenance="task")
    model, _ = _train_stage("task", model, data, cfg, None, out_dir=out_dir)
    return model


def _new_model(task: SegModel, cfg: TrainConfig, names, provenance):
    """Fresh model for a later stage.

    With ``cfg.warm_start`` the body, segmentation head and task channel are
    copied from the frozen task net. Added channels either copy the task
    channel ("copy-task") or start at a constant log variance ("constant").
    A cold start leaves the channels interchangeable under the weighted CE
    and the aug channel tends to soak up plain task uncertainty; a very low
    constant start gets only a sliver of the variance gradient and stays put.
    """
    model = init(_net_config(cfg, names, provenance), provenance=provenance)
    if not cfg.warm_start:
        return model
    if task.config.widths != model.config.widths:
        raise CascadeError(f"cannot warm-start widths {model.config.widths} from {task.config.widths}")
    for name, v in task.params.items():
        if not name.startswith("unc."):
            model.params[name] = np.array(v, copy=True)
    if cfg.aug_channel_init == "copy-task":
        w = np.repeat(task.params["unc.weight"][:1], len(names), axis=0)
        b = np.repeat(task.params["unc.bias"][:1], len(names), axis=0)
    else:
        w = np.zeros_like(model.params["unc.weight"])
        b = np.full_like(model.params["unc.bias"], float(cfg.aug_log_variance_init))
        w[0] = task.params["unc.weight"][0]
        b[0] = task.params["unc.bias"][0]
    model.params["unc.weight"], model.params["unc.bias"] = w, b
    return model


def train_teacher(task: SegModel, kind, data: PhantomData, cfg: TrainConfig, out_dir=None) -> SegModel:
    """Stage 2: channels (task, kind); the frozen task net supplies the task target."""
    if task is None or not task.frozen:
        raise CascadeError("train_teacher needs a frozen task network (run the task stage first)")
    kind = AugmentationKind.parse(kind)
    name = stage_name("teacher", kind)
    model = _new_model(task, cfg, ("task", kind.value), name)
    model, _ = _train_stage(name, model, data, cfg, cfg.pipeline_for([kind]), task=task, out_dir=out_dir)
    return model


def train_student(task: SegModel, teachers: dict, data: PhantomData, cfg: TrainConfig, out_dir=None) -> SegModel:
    """Stage 3: one channel per registered kind, each tied to its teacher."""
    if task is None or not task.frozen:
        raise CascadeError("train_student needs a frozen task network")
    teachers = {AugmentationKind.parse(k): m for k, m in teachers.items()}
    missing = [k.value for k in cfg.kinds if k not in teachers]
    if missing:
        raise CascadeError(f"train_student is missing teachers for {missing}; run teacher:<kind> first")
    for k, m in teachers.items():
        if not m.frozen:
            raise CascadeError(f"teacher for {k.value} is not frozen")
    ordered = {k: teachers[k] for k in cfg.kinds}
    names = ("task",) + tuple(k.value for k in cfg.kinds)
    model = _new_model(task, cfg, names, "student")
    model, _ = _train_stage("student", model, data, cfg, cfg.pipeline_for(cfg.kinds),
                            task=task, teachers=ordered, out_dir=out_dir)
    return model


@dataclass
class CascadeState:
    task: SegModel | None = None
    teachers: dict = field(default_factory=dict)
    student: SegModel | None = None

    def checksums(self):
        out = {}
        if self.task is not None:
            out["task"] = self.task.checksum()
        for k, m in self.teachers.items():
            out[stage_name("teacher", k)] = m.checksum()
        if self.student is not None:
            out["student"] = self.student.checksum()
        return out


def run_cascade(data: PhantomData, cfg: TrainConfig, out_dir=None) -> CascadeState:
    """Train all three stages in order, freezing each model before the next."""
    state = CascadeState()
    state.task = freeze(train_task(data, cfg, out_dir))
    for kind in cfg.kinds:
        state.teachers[kind] = freeze(train_teacher(state.task, kind, data, cfg, out_dir))
    state.student = freeze(train_student(state.task, state.teachers, data, cfg, out_dir))
    if out_dir is not None:
        with open(os.path.join(out_dir, "cascade.json"), "w") as fh:
            json.dump({"config": cfg.to_dict(), "checksums": state.checksums()}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return state


def load_cascade(out_dir, cfg: TrainConfig | None = None) -> CascadeState:
    """Load whatever stages exist under ``out_dir``."""
    state = CascadeState()
    if os.path.isdir(os.path.join(out_dir, "task")):
        state.task = freeze(load_checkpoint(os.path.join(out_dir, "task")))
    for kind in AugmentationKind:
        d = os.path.join(out_dir, stage_name("teacher", kind))
        if os.path.isdir(d):
            state.teachers[kind] = freeze(load_checkpoint(d))
    if os.path.isdir(os.path.join(out_dir, "student")):
        state.student = freeze(load_checkpoint(os.path.join(out_dir, "student")))
    return state


# --- inference ---------------------------------------------------------------

@dataclass
class Inference:
    probabilities: np.ndarray  # (C, X, Y, Z)
    labels: np.ndarray  # (X, Y, Z)
    uncertainty: UncertaintyMap
    logits: np.ndarray

    @property
    def total_variance(self):
        return np.exp(self.uncertainty.data).sum(axis=0)


def _starts(n, p):
    if n <= p:
        return [0]
    stride = max(p // 2, 1)
    s = list(range(0, n - p + 1, stride))
    if s[-1] != n - p:
        s.append(n - p)
    return s


def infer(model: SegModel, volume, patch_size=16) -> Inference:
    """Sliding-window inference with 50 % overlap and uniform averaging.

    Logits and log-variances are averaged over windows; probabilities use the
    scaled softmax with the summed variance of all predicted channels.
    """
    data = np.asarray(volume.data if isinstance(volume, Volume) else volume, dtype=np.float64)
    shape = data.shape
    p = patch_size
    padded = _fit_patch(data, p)
    full = padded.shape
    C = model.config.num_classes
    K = model.config.uncertainty_channels
    acc_logits = np.zeros((C,) + full)
    acc_s = np.zeros((K,) + full)
    count = np.zeros(full)
    for x0 in _starts(full[0], p):
        for y0 in _starts(full[1], p):
            for z0 in _starts(full[2], p):
                sl = (slice(x0, x0 + p), slice(y0, y0 + p), slice(z0, z0 + p))
                lg, s = predict(model, padded[sl][None, None])
                acc_logits[(slice(None),) + sl] += lg[0]
                acc_s[(slice(None),) + sl] += s[0]
                count[sl] += 1.0
    crop = (slice(None), slice(0, shape[0]), slice(0, shape[1]), slice(0, shape[2]))
    logits = (acc_logits / count)[crop]
    s = (acc_s / count)[crop]
    var = np.exp(s).sum(axis=0)
    probs = losses.scaled_softmax(logits[None], var[None])[0]
    spacing = volume.spacing if isinstance(volume, Volume) else (1.0, 1.0, 1.0)
    return Inference(probs, probs.argmax(axis=0), UncertaintyMap(s, model.channel_names, spacing), logits)
