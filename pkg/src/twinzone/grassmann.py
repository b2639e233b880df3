"""Principal angles, Grassmann distance and the sin-theta reliability check."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .subspace import Covariance, eig_hermitian

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class PrincipalAngles:
    angles: np.ndarray  # ascending, in [0, pi/2]

    @property
    def max(self) -> float:
        return float(self.angles[-1]) if self.angles.size else 0.0


def _basis(U):
    return U.basis if hasattr(U, "basis") else np.asarray(U)


def _check_orthonormal(U, name):
    k = U.shape[1]
    err = np.linalg.norm(U.conj().T @ U - np.eye(k))
    if err > ORTHO_TOL:
        raise ValueError(f"{name} is not column-orthonormal (||U^H U - I||_F = {err:.2e})")


def principal_angles(U1, U2) -> PrincipalAngles:
    """Angles ``arccos(sigma_i)`` from the singular values of ``U1^H U2``."""
    A, B = _basis(U1), _basis(U2)
    if A.shape != B.shape:
        raise ValueError(f"rank/dimension mismatch: {A.shape} vs {B.shape}")
    _check_orthonormal(A, "U1")
    _check_orthonormal(B, "U2")
    M = A.conj().T @ B
    cos = np.sort(np.clip(np.linalg.svd(M, compute_uv=False), 0.0, 1.0))[::-1]
    # arccos loses accuracy near 1, so small angles come from the residual's singular values
    sin = np.sort(np.clip(np.linalg.svd(B - A @ M, compute_uv=False), 0.0, 1.0))
    theta = np.where(cos ** 2 >= 0.5, np.arcsin(sin), np.arccos(cos))
    return PrincipalAngles(np.sort(theta))


def grassmann_distance(U1, U2) -> float:
    """Sum of squared principal angles (squared 2-norm of the angle vector)."""
    th = principal_angles(U1, U2).angles
    return float(np.sum(th**2))


def grassmann_distance_min_rank(U1, U2) -> float:
    """Distance between subspaces of possibly unequal rank, compared at the smaller rank.

    Bases are assumed ordered by importance, so truncation keeps the leading
    directions of the larger subspace.
    """
    A, B = _basis(U1), _basis(U2)
    k = min(A.shape[1], B.shape[1])
    return grassmann_distance(A[:, :k], B[:, :k])


def spectral_gap(eigenvalues, k: int) -> float:
    """``lambda_k - lambda_{k+1}`` of a descending spectrum, ``k`` counted from 1."""
    lam = np.asarray(eigenvalues, dtype=float)
    if not 1 <= k < lam.size:
        raise ValueError(f"k={k} out of range for a spectrum of length {lam.size}")
    return float(max(lam[k - 1] - lam[k], 0.0))


def spectral_norm(M: np.ndarray, max_iter: int = 200, rtol: float = 1e-10) -> float:
    """Largest singular value of a Hermitian matrix by power iteration on ``M^2``."""
    M = np.asarray(M, dtype=complex)
    n = M.shape[0]
    if not np.any(M):
        return 0.0
    # fixed, generic start vector keeps the result deterministic
    x = np.exp(1j * np.arange(n) * 0.7) * (1.0 + np.arange(n) / n)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = M @ (M @ x)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        new = math.sqrt(ny)
        x = y / ny
        if est > 0 and abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    # Rayleigh quotient of M^2 at the final iterate is never above the true norm
    return float(max(est, math.sqrt(max(np.vdot(x, M @ (M @ x)).real, 0.0))))


@dataclass(frozen=True)
class BoundReport:
    k: int
    gap: float
    diff_norm: float
    bound: float
    max_sin_theta: float
    holds: bool

    def row(self):
        return [self.k, self.gap, self.bound, self.max_sin_theta, self.holds]


def davis_kahan_bound(R_dt, R_rw, k: int, eig_dt=None, eig_rw=None) -> BoundReport:
    """Compare the leading-k subspace rotation with ``||R_dt - R_rw||_2 / gap_k``.

    A zero gap gives an infinite bound, which holds trivially.  Precomputed
    ``(eigenvalues, eigenvectors)`` pairs may be passed to skip decomposition.
    """
    A = R_dt.matrix if isinstance(R_dt, Covariance) else np.asarray(R_dt)
    B = R_rw.matrix if isinstance(R_rw, Covariance) else np.asarray(R_rw)
    lam_dt, V_dt = eig_dt if eig_dt is not None else eig_hermitian(A)
    lam_rw, V_rw = eig_rw if eig_rw is not None else eig_hermitian(B)
    gap = spectral_gap(lam_rw, k)
    dnorm = spectral_norm(A - B)
    if gap > 0:
        bound = dnorm / gap
    else:
        bound = 0.0 if dnorm == 0 else math.inf
    theta = principal_angles(V_dt[:, :k], V_rw[:, :k]).max
    sin_t = math.sin(theta)
    return BoundReport(k, gap, dnorm, bound, sin_t, bool(sin_t <= bound + 1e-9))
