"""Small dense linear-algebra helpers shared across the package."""

import numpy as np


def opnorm(mat, iters: int = 50, tol: float = 1e-10) -> float:
    """Operator 2-norm of a dense matrix.

    Small matrices (every dimension in this package's hot paths) use an
    exact LAPACK SVD; larger ones use power iteration on ``M^T M`` with a
    deterministic start vector.
    """
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.size == 0:
        return 0.0
    if max(mat.shape) <= 64:
        return float(np.linalg.svd(mat, compute_uv=False)[0])
    gram = mat.T @ mat if mat.shape[0] >= mat.shape[1] else mat @ mat.T
    v = np.ones(gram.shape[0]) / np.sqrt(gram.shape[0])
    prev = 0.0
    for _ in range(iters):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - prev) <= tol * max(1.0, norm):
            prev = norm
            break
        prev = norm
    return float(np.sqrt(prev))


def spectral_radius(mat) -> float:
    """Largest eigenvalue magnitude of a square matrix."""
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(mat, dtype=float)))))


def symmetrize(mat) -> np.ndarray:
    """Return (M + M^T)/2; keeps Riccati iterates symmetric under rounding."""
    mat = np.asarray(mat, dtype=float)
    return 0.5 * (mat + mat.T)
