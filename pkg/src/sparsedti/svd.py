"""One-sided Jacobi SVD, rank truncation and singular-value sensitivities.

The Jacobi sweeps use a round-robin (tournament) ordering so every round
rotates ``n/2`` disjoint column pairs at once; this vectorizes both across
pairs and across a batch of equally shaped matrices, which is what the
training loss needs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from . import quality

_EPS = np.finfo(np.float64).eps
MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdFactors:
    """``a = u @ diag(sigma) @ v.T`` with ``r = min(m, n)`` columns each."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank_bound(self):
        return self.sigma.shape[-1]

    def reconstruct(self):
        return (self.u * self.sigma[..., None, :]) @ np.swapaxes(self.v, -1, -2)


def _round_robin(n):
    """Pairings for ``n - 1`` rounds covering every pair once (``n`` even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(w, accumulate=True):
    """Orthogonalize the columns of ``w`` (batch, m, n) by right rotations.
    Returns ``(w, v)`` with ``v`` the accumulated rotation (``None`` when
    ``accumulate`` is false)."""
    batch, m, n = w.shape
    if n == 1:
        return w, np.ones((batch, 1, 1)) if accumulate else None
    n_even = n + (n % 2)
    # Row layout: rows of ``wt``/``vt`` are the columns being rotated.
    wt = np.zeros((batch, n_even, m))
    wt[:, :n, :] = np.swapaxes(w, -1, -2)
    vt = np.broadcast_to(np.eye(n_even), (batch, n_even, n_even)).copy() if accumulate else None
    tol = 10.0 * _EPS * max(m, 1)
    # Columns below this squared norm are numerically null; rotating them
    # only chases rounding noise.
    floor = ((_EPS * max(m, n)) ** 2 * np.einsum("bij,bij->b", wt, wt))[:, None]
    rounds = _round_robin(n_even)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            wp = wt[:, p]
            wq = wt[:, q]
            alpha = np.einsum("bij,bij->bi", wp, wp)
            beta = np.einsum("bij,bij->bi", wq, wq)
            gamma = np.einsum("bij,bij->bi", wp, wq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not active.any():
                continue
            rotated = True
            safe_gamma = np.where(active, gamma, 1.0)
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * safe_gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[:, :, None]
            s = np.where(active, s, 0.0)[:, :, None]
            wt[:, p] = c * wp - s * wq
            wt[:, q] = s * wp + c * wq
            if not accumulate:
                continue
            vp = vt[:, p]
            vq = vt[:, q]
            vt[:, p] = c * vp - s * vq
            vt[:, q] = s * vp + c * vq
        if not rotated:
            break
    # A padding row stays zero and never rotates, so dropping it is exact.
    w = np.swapaxes(wt[:, :n, :], -1, -2)
    if not accumulate:
        return w, None
    v = np.swapaxes(vt[:, :n, :n], -1, -2)
    return w, v


def _complete_basis(u, good):
    """Replace the columns of ``u`` not flagged ``good`` by an orthonormal
    completion built from coordinate vectors (deterministic)."""
    m, r = u.shape
    basis = u[:, good]
    out = u.copy()
    for j in np.nonzero(~good)[0]:
        # Project every coordinate vector off the current basis (twice, for
        # stability) and keep the one with the largest remainder.
        cand = np.eye(m)
        for _ in range(2):
            cand = cand - basis @ (basis.T @ cand)
        k = int(np.argmax(np.linalg.norm(cand, axis=0)))
        e = cand[:, k] / np.linalg.norm(cand[:, k])
        basis = np.column_stack([basis, e])
        out[:, j] = e
    return out


def _sign_fix(u, v):
    """Make the first nonzero component of each u-column positive."""
    mag = np.abs(u)
    thresh = 1e-12 * np.max(mag, axis=-2, keepdims=True)
    first = np.argmax(mag > thresh, axis=-2)
    lead = np.take_along_axis(u, first[..., None, :], axis=-2)
    sign = np.where(lead < 0, -1.0, 1.0)
    return u * sign, v * sign


def _check_input(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or min(a.shape[-2:]) < 1:
        raise ValidationError(f"svd needs a matrix (or stack), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("svd input contains non-finite values")
    return a


def svd_batch(a):
    """SVD of a stack ``(..., m, n)``. Returns u (..., m, r), sigma (..., r),
    v (..., n, r) with r = min(m, n), singular values descending."""
    a = _check_input(a)
    lead = a.shape[:-2]
    m, n = a.shape[-2:]
    flat = a.reshape((-1, m, n))
    transposed = m < n
    if transposed:
        flat = np.swapaxes(flat, -1, -2)
        m, n = n, m
    w = np.array(flat, dtype=np.float64, copy=True)
    w, v = _jacobi_columns(w)
    sigma = np.sqrt(np.einsum("bij,bij->bj", w, w))
    order = np.argsort(-sigma, axis=-1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=-1)
    w = np.take_along_axis(w, order[:, None, :], axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)

    # Matches the null-column floor used inside the sweeps.
    cutoff = 2.0 * max(m, n) * _EPS * np.sqrt(np.sum(sigma * sigma, axis=-1, keepdims=True))
    good = (sigma > cutoff) & (sigma > 0)
    u = w / np.where(good, sigma, 1.0)[:, None, :]
    for b in np.nonzero(~good.all(axis=1))[0]:
        u[b] = _complete_basis(u[b], good[b])
        sigma[b] = np.where(good[b], sigma[b], 0.0)
    if transposed:
        u, v = v, u
    u, v = _sign_fix(u, v)
    r = sigma.shape[-1]
    return (u.reshape(lead + u.shape[-2:]), sigma.reshape(lead + (r,)),
            v.reshape(lead + v.shape[-2:]))


def svd(a):
    """Singular value decomposition of one finite ``m x n`` matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"svd expects a 2D matrix, got shape {a.shape}")
    u, s, v = svd_batch(a)
    return SvdFactors(u, s, v)


def singular_values(a):
    """Descending singular values of a matrix or a stack of matrices.

    Skips accumulating the singular vectors, so it is cheaper than
    ``svd_batch``; the values are identical.
    """
    a = _check_input(a)
    lead = a.shape[:-2]
    m, n = a.shape[-2:]
    flat = a.reshape((-1, m, n))
    if m < n:
        flat = np.swapaxes(flat, -1, -2)
    w, _ = _jacobi_columns(np.array(flat, dtype=np.float64, copy=True), accumulate=False)
    sigma = -np.sort(-np.sqrt(np.einsum("bij,bij->bj", w, w)), axis=-1)
    return sigma.reshape(lead + (sigma.shape[-1],))


def truncate(f, k):
    """Rank-``k`` reconstruction from the leading ``k`` singular triplets."""
    r = f.rank_bound
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= r:
        raise ValidationError(f"rank {k} outside 1..{r}")
    return (f.u[:, :k] * f.sigma[:k]) @ f.v[:, :k].T


def sv_sensitivity(f, weights):
    """``sum_k w_k u_k v_k^T``: pulls a weight vector on the singular values
    back to matrix space (the adjoint of ``a -> sigma(a)``).

    Where singular values are repeated this is one valid subgradient.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[-1] != f.sigma.shape[-1] or w.shape[:-1] != f.sigma.shape[:-1]:
        raise ValidationError(f"weights shape {w.shape} does not match sigma {f.sigma.shape}")
    return (f.u * w[..., None, :]) @ np.swapaxes(f.v, -1, -2)


def rank_sweep(clean, noisy, ks):
    """PSNR and SSIM of rank-k reconstructions of ``noisy`` against ``clean``.

    Returns a list of ``(k, psnr, ssim)`` tuples, in the order of ``ks``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if clean.shape != noisy.shape or clean.ndim != 2:
        raise ValidationError(f"shape mismatch: {clean.shape} vs {noisy.shape}")
    f = svd(noisy)
    ks = [int(k) for k in ks]
    for k in ks:
        if not 1 <= k <= f.rank_bound:
            raise ValidationError(f"rank {k} outside 1..{f.rank_bound}")
    rows = []
    for k in ks:
        recon = truncate(f, k)
        rows.append((k, quality.psnr(clean, recon), quality.ssim(clean, recon)))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["k", "psnr", "ssim"])
        for k, p, s in rows:
            out.writerow([k, quality.format_float(p), quality.format_float(s)])
