"""Diffusion tensor forward model, log-linear OLS fit and scalar metrics."""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ValidationError
from .volume import METRIC_CHANNELS, EigenSystem, TensorField, Volume3D

# Below this, the analytic root separation is unreliable and Jacobi takes over.
DISCRIMINANT_TOL = 1e-12
# Relative eigenvalue gap below which the trigonometric roots lose about
# half their digits; such tensors (e.g. prolate, two equal radial values)
# are refined with Jacobi rotations.
GAP_TOL = 1e-4
NULL_TENSOR_TOL = 1e-20


def design_matrix(gtab):
    """Rows ``b * (gx^2, gy^2, gz^2, 2gxgy, 2gxgz, 2gygz)`` for every b>0 entry."""
    g = gtab.bvecs[gtab.dw_mask]
    b = gtab.bvals[gtab.dw_mask]
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    rows = np.stack([gx * gx, gy * gy, gz * gz, 2 * gx * gy, 2 * gx * gz, 2 * gy * gz], axis=1)
    return b[:, None] * rows


def _as_matrix(tensor):
    t = np.asarray(tensor, dtype=np.float64)
    if t.shape == (6,):
        dxx, dyy, dzz, dxy, dxz, dyz = t
        t = np.array([[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]])
    if t.shape[-2:] != (3, 3):
        raise ValidationError(f"expected 3x3 tensor(s), got shape {t.shape}")
    return t


def predict_signal(tensor, s0, gtab):
    """Signal ``s0 * exp(-b g^T D g)`` for each gradient-table entry.

    ``tensor`` may be a single 3x3 matrix (or 6-vector of unique components)
    or a stack ``(..., 3, 3)``; ``s0`` broadcasts against the leading shape.
    The result has the gradient entries on the last axis.
    """
    D = _as_matrix(tensor)
    s0 = np.asarray(s0, dtype=np.float64)
    if np.any(s0 < 0):
        raise ValidationError("s0 must be non-negative")
    adc = np.einsum("ni,...ij,nj->...n", gtab.bvecs, D, gtab.bvecs)
    atten = np.exp(-gtab.bvals * adc)
    # b=0 entries stay at exactly s0.
    atten = np.where(gtab.bvals == 0, 1.0, atten)
    return s0[..., None] * atten


def fit_tensor_ols(dwi, gtab):
    """Voxel-wise ordinary least squares fit of ``A d = -ln(S / S0)``.

    S0 is fixed to the mean of the b=0 channels. Voxels with any signal
    <= 0 are flagged invalid and returned as zero tensors with zero S0.
    """
    data = dwi.data if isinstance(dwi, Volume3D) else np.asarray(dwi, dtype=np.float64)
    if data.shape[-1] != len(gtab):
        raise ValidationError(
            f"volume has {data.shape[-1]} channels but gradient table has {len(gtab)} entries")
    n_b0 = int(np.sum(gtab.b0_mask))
    n_dw = int(np.sum(gtab.dw_mask))
    if n_b0 < 1 or n_dw < 6:
        raise ConfigurationError(f"need >=1 b=0 and >=6 weighted volumes, got {n_b0} and {n_dw}")
    A = design_matrix(gtab)
    if np.linalg.matrix_rank(A) < 6:
        raise ConfigurationError("design matrix is singular; directions do not span tensor space")
    pinv = np.linalg.pinv(A)

    valid = np.all(data > 0, axis=-1)
    s0 = np.mean(data[..., gtab.b0_mask], axis=-1)
    safe = np.where(valid[..., None], data, 1.0)
    safe_s0 = np.where(valid, s0, 1.0)
    y = -np.log(safe[..., gtab.dw_mask] / safe_s0[..., None])
    comps = y @ pinv.T
    comps = np.where(valid[..., None], comps, 0.0)
    s0 = np.where(valid, s0, 0.0)
    return TensorField.from_components(comps, s0, valid=valid)


# ---------------------------------------------------------------------------
# eigen-decomposition


def _closed_form_eigvals(m):
    """Descending eigenvalues of symmetric ``(..., 3, 3)`` via the trigonometric
    solution of the characteristic cubic. Returns (values, p, q)."""
    q = np.trace(m, axis1=-2, axis2=-1) / 3.0
    b = m - q[..., None, None] * np.eye(3)
    p = np.sqrt(np.sum(b * b, axis=(-2, -1)) / 6.0)
    safe_p = np.where(p > 0, p, 1.0)
    r = np.linalg.det(b / safe_p[..., None, None]) / 2.0
    r = np.clip(r, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    vals = np.stack([l1, l2, l3], axis=-1)
    vals = np.where((p > 0)[..., None], vals, q[..., None])
    return vals, p, q


def _jacobi_eig3(mats, max_sweeps=30):
    """Cyclic Jacobi on a stack ``(N, 3, 3)`` of symmetric matrices.

    Returns unsorted eigenvalues ``(N, 3)`` and eigenvectors ``(N, 3, 3)``
    (columns).
    """
    a = np.array(mats, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    for _ in range(max_sweeps):
        off = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
        scale = np.sum(a * a, axis=(1, 2))
        if np.all((off == 0) | (off <= (np.finfo(float).eps ** 2) * 1e-4 * scale)):
            break
        for p_, q_ in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p_, q_]
            nz = apq != 0
            # A huge theta (tiny apq) overflows to inf, which correctly gives t = 0.
            with np.errstate(over="ignore", divide="ignore"):
                theta = (a[:, q_, q_] - a[:, p_, p_]) / (2.0 * np.where(nz, apq, 1.0))
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(nz, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            rot[:, p_, p_] = c
            rot[:, q_, q_] = c
            rot[:, p_, q_] = s
            rot[:, q_, p_] = -s
            a = np.swapaxes(rot, 1, 2) @ a @ rot
            v = v @ rot
    return np.diagonal(a, axis1=1, axis2=2).copy(), v


def _null_vector(m):
    """Unit vector spanning the null space of a rank-2 symmetric 3x3."""
    cands = np.array([np.cross(m[0], m[1]), np.cross(m[0], m[2]), np.cross(m[1], m[2])])
    norms = np.linalg.norm(cands, axis=1)
    k = int(np.argmax(norms))
    return cands[k] / norms[k]


def eig_symmetric3(tensor):
    """Eigen-decomposition of one symmetric 3x3 tensor, descending order.

    Uses the analytic cubic solution when the eigenvalues are well
    separated and falls back to Jacobi rotations when the discriminant is
    near zero or two roots nearly coincide.
    """
    a = _as_matrix(tensor)
    if a.shape != (3, 3):
        raise ValidationError("eig_symmetric3 takes a single 3x3 tensor")
    if not np.allclose(a, a.T, rtol=0, atol=1e-14 * max(1.0, np.abs(a).max())):
        raise ValidationError("tensor is not symmetric")
    a = 0.5 * (a + a.T)
    vals, p, q = _closed_form_eigvals(a)
    scale = max(abs(q), float(p), np.finfo(float).tiny)
    gaps = np.diff(-vals)
    if p <= DISCRIMINANT_TOL * scale or gaps.min() <= GAP_TOL * scale:
        w, v = _jacobi_eig3(a[None])
        w, v = w[0], v[0]
        order = np.argsort(-w, kind="stable")
        w, v = w[order], v[:, order]
        # Re-orthonormalize against rounding drift.
        v, _ = np.linalg.qr(v)
        return EigenSystem(w, v)
    e1 = _null_vector(a - vals[0] * np.eye(3))
    e3 = _null_vector(a - vals[2] * np.eye(3))
    e3 = e3 - (e3 @ e1) * e1
    e3 /= np.linalg.norm(e3)
    e2 = np.cross(e3, e1)
    return EigenSystem(vals.copy(), np.stack([e1, e2, e3], axis=1))


def eigvals_symmetric3(mats):
    """Descending eigenvalues for a stack ``(..., 3, 3)`` of symmetric tensors."""
    mats = np.asarray(mats, dtype=np.float64)
    vals, p, q = _closed_form_eigvals(mats)
    scale = np.maximum(np.maximum(np.abs(q), p), np.finfo(float).tiny)
    gap = np.min(vals[..., :-1] - vals[..., 1:], axis=-1)
    near = (p > 0) & ((p <= DISCRIMINANT_TOL * scale) | (gap <= GAP_TOL * scale))
    if np.any(near):
        w, _ = _jacobi_eig3(mats[near])
        vals[near] = -np.sort(-w, axis=-1)
    return vals


# ---------------------------------------------------------------------------
# scalar maps


def metrics_from_eigvals(evals):
    """FA, MD, AD from descending eigenvalues on the last axis.

    Negative eigenvalues are kept for MD and AD but clamped to zero inside
    the FA formula so FA stays in [0, 1].
    """
    evals = np.asarray(evals, dtype=np.float64)
    md = evals.mean(axis=-1)
    ad = evals[..., 0]
    lam = np.maximum(evals, 0.0)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    # sqrt(3/2 * sum (l_i - mean)^2) written with pairwise differences, which
    # is exactly zero for equal eigenvalues.
    num = np.sqrt(0.5 * ((l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2))
    den2 = np.sum(lam * lam, axis=-1)
    null = den2 < NULL_TENSOR_TOL
    fa = np.where(null, 0.0, num / np.sqrt(np.where(null, 1.0, den2)))
    return np.clip(fa, 0.0, 1.0), md, ad


def compute_metrics(field, voxel_size=(1.0, 1.0, 1.0)):
    """FA/MD/AD volume (channels in that order) of a tensor field."""
    evals = eigvals_symmetric3(field.matrices())
    fa, md, ad = metrics_from_eigvals(evals)
    return Volume3D(np.stack([fa, md, ad], axis=-1), voxel_size, METRIC_CHANNELS)
