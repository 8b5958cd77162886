"""Symmetric eigendecomposition (cyclic Jacobi) and the positive-part spectral
functionals used by the filtering estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 100
OFF_TOL = 1e-12
SYM_TOL = 1e-8


class SpectralError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Eigenvalues in descending order; ``eigenvectors[:, i]`` pairs with
    ``eigenvalues[i]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        V = self.eigenvectors
        return (V * self.eigenvalues) @ V.T


def _check_symmetric(A) -> np.ndarray:
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SpectralError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, np.abs(A).max(initial=0.0))
    if np.abs(A - A.T).max(initial=0.0) > SYM_TOL * scale:
        raise SpectralError("matrix is not symmetric")
    return 0.5 * (A + A.T)


def _off_norm(A: np.ndarray) -> float:
    return float(np.linalg.norm(A - np.diag(np.diag(A))))


def sym_eig(A) -> SpectralDecomposition:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Pairs (p, q) are visited in row-major order every sweep, so the result is
    a deterministic function of ``A``. Iteration stops once the off-diagonal
    Frobenius norm falls below ``1e-12`` (relative to ``||A||_F`` when that
    exceeds one) or after 100 sweeps.
    """
    A = _check_symmetric(A)
    d = A.shape[0]
    V = np.eye(d)
    fro = float(np.linalg.norm(A))
    tol = OFF_TOL * max(1.0, fro)
    sweeps = 0
    while sweeps < MAX_SWEEPS and _off_norm(A) >= tol:
        sweeps += 1
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                app, aqq = A[p, p], A[q, q]
                # Negligible relative to both diagonal entries: zero it outright.
                if abs(apq) < 1e-18 * (abs(app) + abs(aqq)):
                    A[p, q] = A[q, p] = 0.0
                    continue
                theta = (aqq - app) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) Givens rotation.
                ap = A[:, p].copy()
                aq = A[:, q]
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp = A[p, :].copy()
                rq = A[q, :]
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q]
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    lam = np.diag(A).copy()
    V = _canonical_signs(V)
    order = np.argsort(-lam, kind="stable")
    return SpectralDecomposition(lam[order], V[:, order], sweeps)


def _canonical_signs(V: np.ndarray) -> np.ndarray:
    """Flip each column so its first non-negligible component is positive."""
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            V[:, j] = -col
    return V


def positive_part_trace(A, shift: float) -> float:
    """``sum_i max(lambda_i(A) - shift, 0)``, i.e. ``tr(A - shift I)_+``."""
    lam = sym_eig(A).eigenvalues
    return float(np.sum(np.maximum(lam - shift, 0.0)))


def nonneg_projector(A, shift: float) -> np.ndarray:
    """Orthogonal projector onto the eigenvectors of ``A - shift I`` whose
    eigenvalues are nonnegative."""
    dec = sym_eig(np.asarray(A, dtype=float) - shift * np.eye(len(A)))
    V = dec.eigenvectors[:, dec.eigenvalues >= 0]
    return V @ V.T


def top_projector(A) -> np.ndarray:
    """Rank-one projector onto the leading eigenvector of ``A``."""
    v = sym_eig(A).eigenvectors[:, :1]
    return v @ v.T


def w2_shrink_map(cov) -> np.ndarray:
    """``A = sum_i min(1, 1/sqrt(lambda_i)) v_i v_i^T`` for a PSD covariance.

    Pushing a measure with covariance ``cov`` through ``x -> mu + A (x - mu)``
    yields covariance ``A cov A`` with every eigenvalue at most one.
    """
    dec = sym_eig(cov)
    lam = np.maximum(dec.eigenvalues, 0.0)
    scale = np.ones_like(lam)
    big = lam > 1.0
    scale[big] = 1.0 / np.sqrt(lam[big])
    V = dec.eigenvectors
    return (V * scale) @ V.T


def shrink_cost(cov) -> float:
    """Closed-form identity-coupling cost ``sum_{lambda_i > 1} (sqrt(lambda_i) - 1)^2``
    of the shrink map."""
    lam = sym_eig(cov).eigenvalues
    lam = lam[lam > 1.0]
    return float(np.sum((np.sqrt(lam) - 1.0) ** 2))
