"""Dense linear-algebra kernels used throughout the package.

All routines are pure functions on float64 arrays; the singular-value
cutoff is relative to the largest singular value.
"""

import numpy as np

from .errors import InvalidInputError, RankDeficiencyError

# relative singular-value cutoff; double-precision noise floor with headroom
# for the ~100-column stacks this package works with
DEFAULT_TOL = 1e-12


def ensure_finite(a, name="matrix"):
    """Return ``a`` as a float64 ndarray, rejecting NaN/Inf entries."""
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def pinv(a, tol=DEFAULT_TOL):
    """Moore-Penrose pseudoinverse via SVD with relative cutoff ``tol``."""
    arr = ensure_finite(a)
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if arr.size == 0:
        return arr.T.copy()
    u, s, vt = np.linalg.svd(arr, full_matrices=False)
    cutoff = tol * (s[0] if s.size else 0.0)
    inv_s = np.where(s > cutoff, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return (vt.T * inv_s) @ u.T


def rank(a, tol=DEFAULT_TOL):
    """Numerical rank: number of singular values above ``tol * sigma_max``."""
    arr = ensure_finite(a)
    if arr.size == 0:
        return 0
    s = np.linalg.svd(arr, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def orth_projection(c, tol=DEFAULT_TOL, label=None):
    """Orthogonal projector ``P = C'(CC')^{-1}C`` onto the row space of ``c``.

    ``c`` must have full row rank; ``label`` names the owner in error
    messages (e.g. which agent supplied the matrix).
    """
    arr = ensure_finite(c, name=label or "matrix")
    if arr.ndim != 2:
        raise InvalidInputError("projection input must be 2-D")
    if rank(arr, tol) < arr.shape[0]:
        who = f" ({label})" if label else ""
        raise RankDeficiencyError(
            f"matrix{who} with shape {arr.shape} is row-rank deficient; "
            "the orthogonal projector onto its row space is undefined"
        )
    gram = arr @ arr.T
    p = arr.T @ np.linalg.solve(gram, arr)
    # symmetrize to kill the last bits of round-off asymmetry
    return 0.5 * (p + p.T)


def frobenius(a):
    """Frobenius norm."""
    return float(np.linalg.norm(ensure_finite(a), "fro" if np.ndim(a) == 2 else 2))


def spectral_norm(a):
    """Largest singular value (the matrix 2-norm)."""
    arr = ensure_finite(a)
    if arr.size == 0:
        return 0.0
    return float(np.linalg.svd(arr, compute_uv=False)[0])


def sigma_min(a):
    """Smallest singular value (of min(m, n) values)."""
    arr = ensure_finite(a)
    if arr.size == 0:
        return 0.0
    return float(np.linalg.svd(arr, compute_uv=False)[-1])
