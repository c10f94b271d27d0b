"""MSE, PSNR and SSIM image quality measures.

The peak (dynamic range) used by PSNR and SSIM is taken from the
reference image, ``max(ref) - min(ref)`` over the optional mask, never a
fixed 1.0.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1 = 0.01
K2 = 0.03


def format_float(x, digits=6):
    """CSV formatting: fixed decimals, ``inf`` for the perfect-match sentinel."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.{digits}f}"


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValidationError("non-finite values in image")
    return a, b


def _select(a, mask):
    if mask is None:
        return a.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ValidationError(f"mask shape {mask.shape} does not match image {a.shape}")
    return a[mask]


def mse(a, b, mask=None):
    a, b = _pair(a, b)
    d = _select(a, mask) - _select(b, mask)
    # Correctly rounded sum, so exact cases (e.g. constant offsets) stay exact.
    return math.fsum(d * d) / d.size


def peak(reference, mask=None):
    ref = _select(np.asarray(reference, dtype=np.float64), mask)
    return float(ref.max() - ref.min())


def psnr(reference, test, mask=None):
    """``10 log10(peak^2 / mse)`` in dB; ``inf`` when the images agree."""
    reference, test = _pair(reference, test)
    rng = peak(reference, mask)
    if rng <= 0:
        raise ValidationError("reference image is constant; PSNR peak is zero")
    err = mse(reference, test, mask)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(rng * rng / err)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, win):
    """Correlate ``img`` (..., H, W) with a separable window over the valid region."""
    g = win.sum(axis=1)
    k = g.shape[0]
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim_map(reference, test, data_range=None):
    reference, test = _pair(reference, test)
    if reference.ndim < 2:
        raise ValidationError("ssim needs 2D images")
    if min(reference.shape[-2:]) < SSIM_WINDOW:
        raise ValidationError(
            f"image {reference.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    L = peak(reference) if data_range is None else float(data_range)
    if L <= 0:
        raise ValidationError("reference image is constant; SSIM dynamic range is zero")
    c1 = (K1 * L) ** 2
    c2 = (K2 * L) ** 2
    win = gaussian_window()
    mu_x = _filter_valid(reference, win)
    mu_y = _filter_valid(test, win)
    sxx = _filter_valid(reference * reference, win) - mu_x * mu_x
    syy = _filter_valid(test * test, win) - mu_y * mu_y
    sxy = _filter_valid(reference * test, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(reference, test, data_range=None):
    """Mean local SSIM of a 2D image, or the slice average for a stack
    ``(..., H, W)``. ``data_range`` defaults to the reference's peak."""
    reference, test = _pair(reference, test)
    if reference.ndim == 2:
        return float(np.mean(ssim_map(reference, test, data_range)))
    if data_range is None:
        data_range = peak(reference)
    slices_r = reference.reshape((-1,) + reference.shape[-2:])
    slices_t = test.reshape((-1,) + test.shape[-2:])
    vals = [np.mean(ssim_map(r, t, data_range)) for r, t in zip(slices_r, slices_t)]
    return float(np.mean(vals))
