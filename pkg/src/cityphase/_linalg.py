"""PSD repair and robust factorization for correlation matrices."""

import numpy as np

from .errors import NumericError, ValidationError

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def check_correlation(matrix, atol=1e-12):
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"correlation matrix must be square, got {a.shape}")
    if a.size and not np.allclose(a, a.T, rtol=0.0, atol=atol):
        raise ValidationError("correlation matrix is not symmetric")
    if a.size and not np.all(np.diag(a) == 1.0):
        raise ValidationError("correlation matrix diagonal must be exactly 1")
    if a.size and (a.min() < -1.0 - atol or a.max() > 1.0 + atol):
        raise ValidationError("correlation entries must lie in [-1, 1]")
    return a


def repair_psd(matrix):
    """Clip negative eigenvalues at zero and rescale to unit diagonal.

    Matrices that are already PSD are returned unchanged (symmetrized), so
    repair never perturbs a valid input.
    """
    a = np.asarray(matrix, dtype=float)
    a = 0.5 * (a + a.T)
    if a.size == 0:
        return a.copy()
    w, v = np.linalg.eigh(a)
    if w.min() >= 0.0:
        out = a.copy()
    else:
        w = np.clip(w, 0.0, None)
        out = (v * w) @ v.T
        d = np.sqrt(np.clip(np.diag(out), 1e-300, None))
        out = out / np.outer(d, d)
        out = 0.5 * (out + out.T)
        np.clip(out, -1.0, 1.0, out=out)
    np.fill_diagonal(out, 1.0)
    return out


def factorize(matrix):
    """Lower Cholesky factor, walking a diagonal jitter ladder on failure."""
    a = np.asarray(matrix, dtype=float)
    if a.size == 0:
        return a.copy()
    eye = np.eye(a.shape[0])
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    wmin = float(np.linalg.eigvalsh(0.5 * (a + a.T)).min())
    raise NumericError(
        f"Cholesky factorization failed after jitter {JITTER_LADDER[-1]:g}; "
        f"minimum eigenvalue {wmin:.3e}"
    )


def pairwise_distances(xy):
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))
