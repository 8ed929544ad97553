"""Small dense linear-algebra helpers shared by the backward recursions.

Everything here operates on float64 numpy arrays.  The pseudo-inverse
policy is the one used throughout the solvers: symmetrize, optionally add
Tikhonov damping, eigendecompose, and zero eigenvalues below a relative
cutoff.
"""
from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

# Relative eigenvalue cutoff for pseudo-inversion.
EIG_CUTOFF = 1e-9


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Return (M + M^T)/2; controls floating-point drift in value Hessians."""
    return 0.5 * (mat + mat.T)


def psd_pinv_solve(mat: np.ndarray, rhs: np.ndarray, damping: float = 0.0,
                   warn_label: str = "") -> np.ndarray:
    """Solve mat^+ @ rhs for a (near) symmetric PSD matrix.

    The matrix is symmetrized, `damping` is added to the diagonal, and the
    eigendecomposition is pseudo-inverted with eigenvalues below
    EIG_CUTOFF * max_eig treated as zero.  `rhs` may be a vector or a
    matrix of stacked right-hand sides.
    """
    m = symmetrize(np.asarray(mat, dtype=np.float64))
    if damping:
        m = m + damping * np.eye(m.shape[0])
    w, q = np.linalg.eigh(m)
    top = np.max(np.abs(w)) if w.size else 0.0
    keep = np.abs(w) > EIG_CUTOFF * top
    if not np.all(keep) and warn_label:
        logger.warning("pseudo-inverse fallback engaged for %s (%d/%d modes dropped)",
                       warn_label, int(np.sum(~keep)), w.size)
    inv_w = np.zeros_like(w)
    inv_w[keep] = 1.0 / w[keep]
    return q @ (inv_w[:, None] * (q.T @ rhs)) if rhs.ndim > 1 else q @ (inv_w * (q.T @ rhs))


def psd_pinv(mat: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """Explicit pseudo-inverse under the same policy as psd_pinv_solve."""
    return psd_pinv_solve(mat, np.eye(mat.shape[0]), damping)


def check_finite(arr: np.ndarray, exc: type, what: str) -> None:
    """Raise `exc` naming `what` if arr contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise exc(f"non-finite values in {what}")


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max relative error between arrays, guarded against zero denominators."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0
