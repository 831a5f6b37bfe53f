"""Heteroscedastic segmentation losses and the uncertainty-matching terms.

Networks predict log-variance ``s``; every loss here works with
``sigma^2 = exp(s)``. Voxel reductions are means so values do not depend on
patch size. Inputs may be :class:`~kspaceqc.diffkit.Tensor` or arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffkit as dk

MATCH_SSIM_WEIGHT = 0.1
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE_FLOOR = 1e-3


class LossError(ValueError):
    pass


@dataclass
class LossBreakdown:
    total: float = 0.0
    weighted_ce_term: float = 0.0
    log_variance_term: float = 0.0
    match_l1: float = 0.0
    match_grad: float = 0.0
    match_ssim: float = 0.0
    mean_sigma_sq: dict = field(default_factory=dict)

    def check(self, tol=1e-10):
        parts = (self.weighted_ce_term + self.log_variance_term + self.match_l1
                 + self.match_grad + MATCH_SSIM_WEIGHT * self.match_ssim)
        return abs(parts - self.total) <= tol * max(1.0, abs(self.total))


def _t(x):
    return x if isinstance(x, dk.Tensor) else dk.Tensor(x)


def _same_shape(op, *ts):
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise LossError(f"{op}: shape mismatch {[t.shape for t in ts]}")


def scaled_softmax(logits, sigma_sq):
    """``softmax(logits / sigma^2)`` over the channel axis.

    ``logits`` is (B, C, ...); ``sigma_sq`` is (B, 1, ...) or (B, ...).
    Arrays in, array out.
    """
    logits = np.asarray(logits, dtype=np.float64)
    var = np.asarray(sigma_sq, dtype=np.float64)
    if np.any(var <= 0):
        raise LossError("sigma^2 must be strictly positive")
    if var.ndim == logits.ndim - 1:
        var = var[:, None]
    z = logits / var
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Unscaled per-voxel cross entropy, shape (B, 1, ...).

    ``labels`` is an integer array (B, ...) of class indices.
    """
    logits = _t(logits)
    labels = np.asarray(labels)
    C = logits.shape[1]
    onehot = (labels[:, None] == np.arange(C).reshape((1, C) + (1,) * (labels.ndim - 1))).astype(np.float64)
    logp = dk.log_softmax_along_channel(logits)
    return dk.neg(dk.sum(dk.mul(logp, dk.Tensor(onehot)), axis=1, keepdims=True))


def _check_eps(epsilon):
    if not epsilon > 0:
        raise LossError(f"epsilon must be positive, got {epsilon}")


def _nll_terms(ce, var, epsilon):
    """Mean of CE/(var+eps) and of 0.5*log(var+eps)."""
    shifted = dk.add(var, float(epsilon))
    ce_term = dk.mean(dk.mul(ce, dk.reciprocal(shifted)))
    lv_term = dk.mul(dk.mean(dk.log(shifted)), 0.5)
    return ce_term, lv_term


def weighted_ce(ce, s, epsilon):
    """``mean(CE / (exp(s) + eps) + 0.5 * log(exp(s) + eps))``; returns a Tensor."""
    _check_eps(epsilon)
    ce, s = _t(ce), _t(s)
    _same_shape("weighted_ce", ce, s)
    ce_term, lv_term = _nll_terms(ce, dk.exp(s), epsilon)
    return dk.add(ce_term, lv_term)


def combined_variance(s_task, s_augs=()):
    """``exp(s_task) + sum_i exp(s_i)`` voxelwise (Tensor)."""
    s_task = _t(s_task)
    var = dk.exp(s_task)
    for s in s_augs:
        s = _t(s)
        _same_shape("combined_variance", s_task, s)
        var = dk.add(var, dk.exp(s))
    return var


def combined_loss(ce, s_task, s_augs, epsilon):
    """Weighted CE with the variance-sum of task and augmentation sources."""
    _check_eps(epsilon)
    ce = _t(ce)
    var = combined_variance(s_task, s_augs)
    _same_shape("combined_loss", ce, var)
    ce_term, lv_term = _nll_terms(ce, var, epsilon)
    total = dk.add(ce_term, lv_term)
    bd = LossBreakdown(total=total.item(), weighted_ce_term=ce_term.item(),
                       log_variance_term=lv_term.item())
    return total, bd


def ssim3(a, b):
    """Mean local SSIM with 3x3x3 zero-padded box statistics.

    Works on (..., X, Y, Z) tensors. The dynamic range ``L`` is the joint
    range of both inputs floored at 1e-3; it is part of the graph, so the
    stabilisers carry gradient too.
    """
    a, b = _t(a), _t(b)
    _same_shape("ssim3", a, b)
    hi = dk.maximum(dk.amax(a), dk.amax(b))
    lo = dk.neg(dk.maximum(dk.amax(dk.neg(a)), dk.amax(dk.neg(b))))
    L = dk.maximum(dk.add(hi, dk.neg(lo)), SSIM_RANGE_FLOOR)
    c1 = dk.mul(dk.mul(L, L), SSIM_K1 ** 2)
    c2 = dk.mul(dk.mul(L, L), SSIM_K2 ** 2)
    mu_a = dk.avg_pool3(a)
    mu_b = dk.avg_pool3(b)
    mu_aa = dk.mul(mu_a, mu_a)
    mu_bb = dk.mul(mu_b, mu_b)
    mu_ab = dk.mul(mu_a, mu_b)
    var_a = dk.add(dk.avg_pool3(dk.mul(a, a)), dk.neg(mu_aa))
    var_b = dk.add(dk.avg_pool3(dk.mul(b, b)), dk.neg(mu_bb))
    cov = dk.add(dk.avg_pool3(dk.mul(a, b)), dk.neg(mu_ab))
    num = dk.mul(dk.add(dk.mul(mu_ab, 2.0), c1), dk.add(dk.mul(cov, 2.0), c2))
    den = dk.mul(dk.add(dk.add(mu_aa, mu_bb), c1), dk.add(dk.add(var_a, var_b), c2))
    return dk.mean(dk.mul(num, dk.reciprocal(den)))


def gradient_l1(a, b):
    """Mean absolute difference of forward-difference gradients, summed over x, y, z."""
    a, b = _t(a), _t(b)
    total = None
    for axis in (-3, -2, -1):
        ax = a.ndim + axis
        d = dk.add(dk.forward_diff(a, ax), dk.neg(dk.forward_diff(b, ax)))
        term = dk.mean(dk.abs(d))
        total = term if total is None else dk.add(total, term)
    return total


def uncertainty_match_loss(s_hat, s_ref):
    """L1 + gradient-L1 + 0.1 * (1 - SSIM) between ``exp(s_hat)`` and ``exp(s_ref)``.

    ``s_ref`` is treated as a constant: no gradient reaches it.
    Returns ``(total, breakdown)``.
    """
    s_hat = _t(s_hat)
    ref = dk.Tensor(np.asarray(s_ref.data if isinstance(s_ref, dk.Tensor) else s_ref, dtype=np.float64))
    _same_shape("uncertainty_match_loss", s_hat, ref)
    v_hat = dk.exp(s_hat)
    v_ref = dk.Tensor(np.exp(ref.data))
    l1 = dk.mean(dk.abs(dk.add(v_hat, dk.neg(v_ref))))
    lg = gradient_l1(v_hat, v_ref)
    lssim = dk.add(1.0, dk.neg(ssim3(v_hat, v_ref)))
    total = dk.add(dk.add(l1, lg), dk.mul(lssim, MATCH_SSIM_WEIGHT))
    bd = LossBreakdown(total=total.item(), match_l1=l1.item(), match_grad=lg.item(),
                       match_ssim=lssim.item())
    return total, bd


def aug_loss(ce, s_task, s_aug, s_task_teacher, epsilon):
    """Teacher-stage loss: two-source weighted CE plus task-map matching."""
    nll, bd = combined_loss(ce, s_task, [s_aug], epsilon)
    match, mbd = uncertainty_match_loss(s_task, s_task_teacher)
    total = dk.add(nll, match)
    bd = replace(bd, total=total.item(), match_l1=mbd.match_l1,
                 match_grad=mbd.match_grad, match_ssim=mbd.match_ssim)
    return total, bd


@dataclass(frozen=True)
class EpsilonSchedule:
    epsilon: float = 0.05
    floor: float = 1e-3
    learning_rate: float = 1e-4
    window: int = 10
    tolerance: float = 1e-3
    halvings: int = 0

    @property
    def frozen(self):
        return self.epsilon < self.floor


def is_plateau(losses, window, tolerance):
    """True when the best of the last window fails to beat the previous window's best.

    Improvement is measured relative to the previous best.
    """
    if len(losses) < 2 * window:
        return False
    recent = losses[-2 * window:]
    prev_best = min(recent[:window])
    last_best = min(recent[window:])
    return (prev_best - last_best) < tolerance * abs(prev_best)


def epsilon_step(schedule: EpsilonSchedule, recent_validation_losses) -> EpsilonSchedule:
    """Halve epsilon and the learning rate on a plateau until epsilon < floor."""
    if schedule.frozen:
        return schedule
    if not is_plateau(list(recent_validation_losses), schedule.window, schedule.tolerance):
        return schedule
    return replace(schedule, epsilon=schedule.epsilon / 2.0,
                   learning_rate=schedule.learning_rate / 2.0,
                   halvings=schedule.halvings + 1)
