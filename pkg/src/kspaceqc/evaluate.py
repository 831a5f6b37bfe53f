"""End-to-end checks on a trained cascade.

Each function corrupts held-out phantoms deterministically, runs inference
and reduces the uncertainty maps to the scalar the check needs.
"""
from __future__ import annotations

import numpy as np

from .cascade import PhantomData, TrainConfig, dice, infer
from .kspace_aug import AugmentationKind, PipelineConfig, apply_record, draw_record
from .phantom import SHELL


# k-noise is evaluated at one fixed, clearly corrupting SNR: at the top of
# the training range (30 dB) the image is indistinguishable from clean
EVAL_SNR_DB = -5.0


def corrupt_with(img, kind, cfg: TrainConfig, seed, snr_db=EVAL_SNR_DB):
    """Always-corrupted copy of ``img`` using one kind.

    k-noise uses ``snr_db`` (``None`` samples the training range); other
    kinds sample their parameters from the training ranges.
    """
    base = dict(cfg.pipeline)
    base.update(enabled=(AugmentationKind.parse(kind).value,), rate=1.0, multiple=False)
    if snr_db is not None:
        base["snr_db_range"] = (float(snr_db), float(snr_db))
    pipe = PipelineConfig.from_dict(base)
    rec = draw_record(pipe, img.shape, np.random.default_rng(seed))
    return apply_record(img, rec)[0], rec


def task_dice(model, data: PhantomData, cfg: TrainConfig, split="test"):
    """Shell-class Dice of the argmax segmentation pooled over a split."""
    scores = []
    for idx in data.split(split):
        res = infer(model, data.images[idx], cfg.patch_size)
        scores.append(dice(res.labels, data.labels[idx], SHELL))
    return float(np.mean(scores)), scores


def _channel_var(res, name):
    return res.uncertainty.variance(name)


def teacher_contrast(teacher, kind, data: PhantomData, cfg: TrainConfig, split="valid"):
    """Mean sigma_i^2 on corrupted vs clean held-out volumes."""
    name = AugmentationKind.parse(kind).value
    clean, corrupted = [], []
    for idx in data.split(split):
        img = data.images[idx]
        cor, _ = corrupt_with(img, kind, cfg, [cfg.seed, 21, idx])
        clean.append(_channel_var(infer(teacher, img, cfg.patch_size), name).mean())
        corrupted.append(_channel_var(infer(teacher, cor, cfg.patch_size), name).mean())
    return float(np.mean(corrupted)), float(np.mean(clean))


def student_teacher_correlation(student, teacher, kind, data: PhantomData, cfg: TrainConfig, split="valid"):
    """Pearson r between student and teacher sigma_i^2 over corrupted voxels."""
    name = AugmentationKind.parse(kind).value
    a, b = [], []
    for idx in data.split(split):
        cor, _ = corrupt_with(data.images[idx], kind, cfg, [cfg.seed, 22, idx])
        a.append(_channel_var(infer(student, cor, cfg.patch_size), name).ravel())
        b.append(_channel_var(infer(teacher, cor, cfg.patch_size), name).ravel())
    return float(np.corrcoef(np.concatenate(a), np.concatenate(b))[0, 1])


def cross_decoupling(student, kind_a, kind_b, data: PhantomData, cfg: TrainConfig, split="valid"):
    """Mean student sigma_A^2 and sigma_B^2 on volumes corrupted with A only."""
    na = AugmentationKind.parse(kind_a).value
    nb = AugmentationKind.parse(kind_b).value
    va, vb = [], []
    for idx in data.split(split):
        cor, _ = corrupt_with(data.images[idx], kind_a, cfg, [cfg.seed, 23, idx])
        res = infer(student, cor, cfg.patch_size)
        va.append(_channel_var(res, na).mean())
        vb.append(_channel_var(res, nb).mean())
    return float(np.mean(va)), float(np.mean(vb))
