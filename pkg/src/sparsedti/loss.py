"""Normalized data term plus singular-value alignment term, and its gradient.

For a prediction and ground truth patch of shape ``(P, P, 3)``::

    data = ||gt - pred||^2 / ||gt||^2
    reg  = mean over channels c of ||s(gt_c) - s(pred_c)||^2 / ||s(gt_c)||^2
    total = data + lam * reg

where ``s(.)`` is the descending singular-value vector of a ``P x P``
channel slice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .svd import singular_values, svd_batch


@dataclass(frozen=True)
class LossBreakdown:
    data_term: float
    reg_term: float
    lam: float
    total: float


@dataclass
class LambdaState:
    """Running state of the gradient-ratio balancing rule."""

    lam: float = 0.1
    ema_data: float = 0.0
    ema_reg: float = 0.0
    rho: float = 0.1
    beta: float = 0.9
    lam_min: float = 1e-4
    lam_max: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValidationError(f"target ratio rho must be in (0, 1), got {self.rho}")
        if self.lam_min > self.lam_max:
            raise ValidationError("lam_min exceeds lam_max")


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    if pred.ndim < 3:
        raise ValidationError("patches must be (..., P, P, C)")
    return pred, gt


def gt_spectra(gt):
    """Singular values of every channel slice of ``gt`` (..., P, P, C),
    shaped (..., C, P); pass to ``loss_terms`` to avoid recomputing them."""
    return singular_values(np.moveaxis(np.asarray(gt, dtype=np.float64), -1, -3))


def loss_terms(pred, gt, with_reg=True, want_grad=False, want_reg_grad=None, gt_sigma=None):
    """Per-patch data and regularization terms for a batch ``(..., P, P, C)``.

    Returns ``(data, reg, g_data, g_reg)`` where ``g_*`` are gradients with
    respect to ``pred`` (``None`` unless requested; ``want_reg_grad``
    defaults to ``want_grad``). ``reg`` and ``g_reg`` are zero when
    ``with_reg`` is false. ``gt_sigma`` optionally supplies ``gt_spectra(gt)``.
    """
    if want_reg_grad is None:
        want_reg_grad = want_grad
    pred, gt = _check_pair(pred, gt)
    axes = (-3, -2, -1)
    diff = pred - gt
    gt_sq = np.sum(gt * gt, axis=axes)
    if np.any(gt_sq <= 0):
        raise ValidationError("ground-truth patch has zero norm")
    data = np.sum(diff * diff, axis=axes) / gt_sq
    g_data = 2.0 * diff / gt_sq[..., None, None, None] if want_grad else None

    if not with_reg:
        zeros = np.zeros_like(data)
        return data, zeros, g_data, (np.zeros_like(pred) if want_reg_grad else None)

    n_ch = pred.shape[-1]
    # channel slices as a (..., C, P, P) stack
    pred_c = np.moveaxis(pred, -1, -3)
    s_gt = gt_spectra(gt) if gt_sigma is None else np.asarray(gt_sigma, dtype=np.float64)
    if want_reg_grad:
        u, s_pred, v = svd_batch(pred_c)
    else:
        s_pred = singular_values(pred_c)
    s_gt_sq = np.sum(s_gt * s_gt, axis=-1)
    if np.any(s_gt_sq <= 0):
        raise ValidationError("ground-truth channel has zero singular-value norm")
    ds = s_pred - s_gt
    reg = np.mean(np.sum(ds * ds, axis=-1) / s_gt_sq, axis=-1)
    g_reg = None
    if want_reg_grad:
        w = (2.0 / n_ch) * ds / s_gt_sq[..., None]
        g_c = (u * w[..., None, :]) @ np.swapaxes(v, -1, -2)
        g_reg = np.moveaxis(g_c, -3, -1)
    return data, reg, g_data, g_reg


def svd_reg_loss(pred, gt, lam):
    """Loss breakdown for a single ``(P, P, 3)`` patch pair."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 3:
        raise ValidationError("svd_reg_loss takes a single (P, P, C) patch")
    data, reg, _, _ = loss_terms(pred, gt)
    data, reg = float(data), float(reg)
    return LossBreakdown(data, reg, float(lam), data + float(lam) * reg)


def svd_reg_loss_grad(pred, gt, lam):
    """Gradient of ``svd_reg_loss(...).total`` with respect to ``pred``."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 3:
        raise ValidationError("svd_reg_loss_grad takes a single (P, P, C) patch")
    if lam == 0:
        _, _, g_data, _ = loss_terms(pred, gt, with_reg=False, want_grad=True)
        return g_data
    _, _, g_data, g_reg = loss_terms(pred, gt, want_grad=True)
    return g_data + lam * g_reg


def adapt_lambda(state, grad_data_norm, grad_reg_norm):
    """Fold one observation of the two gradient norms into the running
    averages and return the rebalanced weight (also stored on ``state``)."""
    if grad_data_norm < 0 or grad_reg_norm < 0:
        raise ValidationError("gradient norms must be non-negative")
    b = state.beta
    state.ema_data = b * state.ema_data + (1.0 - b) * float(grad_data_norm)
    state.ema_reg = b * state.ema_reg + (1.0 - b) * float(grad_reg_norm)
    if state.ema_reg >= 1e-12:
        lam = state.rho * state.ema_data / (state.ema_reg + 1e-12)
        state.lam = float(min(max(lam, state.lam_min), state.lam_max))
    return state.lam
