"""Covariance, Hermitian eigen-subspaces, projection and estimation metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

HERMITIAN_TOL = 1e-10


@dataclass
class Covariance:
    matrix: np.ndarray
    sample_count: int
    # kept so that low-sample covariances can be decomposed through the Gram matrix
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass
class Subspace:
    basis: np.ndarray  # (N, k), orthonormal columns
    eigenvalues: np.ndarray  # (k,), descending
    energy_fraction: float = 1.0

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def truncated(self, k: int) -> "Subspace":
        k = min(k, self.rank)
        return Subspace(self.basis[:, :k], self.eigenvalues[:k], self.energy_fraction)

    def to_dict(self) -> dict:
        b = self.basis
        return {
            "shape": list(b.shape),
            "basis_re": b.real.ravel().tolist(),
            "basis_im": b.imag.ravel().tolist(),
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "energy_fraction": float(self.energy_fraction),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Subspace":
        shape = tuple(doc["shape"])
        basis = (np.array(doc["basis_re"]) + 1j * np.array(doc["basis_im"])).reshape(shape)
        return cls(basis, np.array(doc["eigenvalues"], dtype=float), float(doc["energy_fraction"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def covariance(channels) -> Covariance:
    """Sample covariance ``(1/U) sum h h^H`` of raw channel vectors (no mean removal).

    ``channels`` is a sequence of N-vectors or a (U, N) array.
    """
    X = np.asarray(channels, dtype=complex)
    if X.size == 0:
        raise ValueError("covariance of an empty channel list")
    if X.ndim == 1:
        X = X[None, :]
    U = X.shape[0]
    R = X.T @ X.conj() / U
    R = 0.5 * (R + R.conj().T)
    return Covariance(R, U, X)


@lru_cache(maxsize=64)
def _circle_shift(m: int) -> np.ndarray:
    """Layout permutation advancing a round-robin tournament by one round.

    Positions ``k`` and ``k + m/2`` are paired; position 0 stays fixed and
    every other player moves one seat around the table.
    """
    h = m // 2
    if h < 2:
        return np.arange(m)
    return np.array([0, h] + list(range(1, h - 1)) + list(range(h + 1, m)) + [h - 1])


def jacobi_eigh(A: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Cyclic Jacobi eigendecomposition of a complex Hermitian matrix.

    Each 2x2 Hermitian block is first made real by a diagonal phase and then
    annihilated with a plane rotation.  Pairs follow a round-robin schedule
    in which the matrix is kept permuted so that the pairs of one round sit at
    positions (k, k + h); a round is then two slice updates and a permutation.

    Returns ``(w, V)`` with unsorted eigenvalues ``w`` and ``A V = V diag(w)``.
    """
    A0 = np.asarray(A, dtype=complex)
    n = A0.shape[0]
    if n == 1:
        return A0.real.diagonal().copy(), np.eye(1, dtype=complex)
    m = n + (n % 2)
    A = np.zeros((m, m), dtype=complex)
    A[:n, :n] = A0
    V = np.eye(m, dtype=complex)
    scale = np.linalg.norm(A0)
    if scale == 0:
        return np.zeros(n), np.eye(n, dtype=complex)
    h = m // 2
    sigma = _circle_shift(m)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(A.diagonal()))
        if off <= tol * scale:
            break
        for _ in range(m - 1):
            diag = A.diagonal().real
            a, d = diag[:h], diag[h:]
            b = A[:h, h:].diagonal().copy()
            mag = np.abs(b)
            nz = mag > 1e-20 * scale  # negligible entries are left alone (avoids subnormal division)
            ph = np.where(nz, b / np.where(nz, mag, 1.0), 1.0)  # e^{i phi}
            theta = np.where(nz, 0.5 * np.arctan2(2 * mag, d - a), 0.0)
            # inner rotation (|theta| <= pi/4); the outer one is a swap that
            # would reshuffle the round-robin schedule
            theta = np.where(theta > np.pi / 4, theta - np.pi / 2, theta)
            c = np.cos(theta)
            s = np.sin(theta)
            # J = [[c, s], [-s e^{-i phi}, c e^{-i phi}]] on each pair
            sq = s / ph
            cq = c / ph
            # columns: M <- M J
            for M in (A, V):
                left = M[:, :h].copy()
                right = M[:, h:]
                M[:, :h] = left * c - right * sq
                M[:, h:] = left * s + right * cq
            # rows: A <- J^H A
            top = A[:h].copy()
            bot = A[h:]
            A[:h] = top * c[:, None] - bot * (s * ph)[:, None]
            A[h:] = top * s[:, None] + bot * (c * ph)[:, None]
            k = np.arange(h)
            A[k, k + h] = 0
            A[k + h, k] = 0
            A = A.take(sigma, 0).take(sigma, 1)
            V = V.take(sigma, 1)
    w = A.diagonal().real.copy()
    # the padding coordinate never rotates; drop its eigenpair
    keep = np.flatnonzero(np.abs(V[:n]).sum(axis=0) > 0.5) if m > n else np.arange(m)
    return w[keep], V[:n, keep]


def _fix_phase(V: np.ndarray) -> np.ndarray:
    """Rotate each column so that its largest-magnitude entry is real positive."""
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    lead = V[idx, np.arange(V.shape[1])]
    return V * (np.abs(lead) / lead)[None, :]


def _check_hermitian(R: np.ndarray):
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {R.shape}")
    err = np.linalg.norm(R - R.conj().T)
    if err > HERMITIAN_TOL * max(1.0, np.linalg.norm(R)):
        raise ValueError(f"matrix is not Hermitian (||R - R^H||_F = {err:.3e})")


def eig_hermitian(R):
    """Eigenvalues (descending) and phase-normalised orthonormal eigenvectors."""
    M = R.matrix if isinstance(R, Covariance) else np.asarray(R, dtype=complex)
    _check_hermitian(M)
    w, V = jacobi_eigh(0.5 * (M + M.conj().T))
    order = np.argsort(-w, kind="stable")
    return w[order], _fix_phase(V[:, order])


def select_rank(eigenvalues, p: float) -> int:
    """Smallest k whose leading eigenvalues hold at least a fraction ``p`` of the energy."""
    lam = np.asarray(eigenvalues, dtype=float)
    if not 0 < p <= 1:
        raise ValueError(f"energy fraction must be in (0, 1], got {p}")
    if lam.size == 0 or lam[0] <= 0:
        raise ValueError("spectrum is empty or all zero")
    lam = np.where(lam > 1e-12 * lam[0], lam, 0.0)
    frac = np.cumsum(lam) / lam.sum()
    return int(np.argmax(frac >= p - 1e-12)) + 1


def _leading_pairs(cov: Covariance):
    """Descending eigenpairs, through the U x U Gram matrix when U < N."""
    X = cov.samples
    if X is not None and X.shape[0] < cov.n:
        G = X.conj() @ X.T / X.shape[0]  # G[u, v] = h_u^H h_v / U
        lam, W = eig_hermitian(0.5 * (G + G.conj().T))
        keep = lam > 1e-12 * max(lam[0], 1e-300)
        lam, W = lam[keep], W[:, keep]
        V = X.T @ W / np.sqrt(X.shape[0] * lam)[None, :]
        # one Gram-Schmidt pass cleans roundoff from the lift
        V, _ = np.linalg.qr(V)
        V = _fix_phase(V)
        return lam, V
    return eig_hermitian(cov)


def eig_subspace(cov: Covariance, k: int | None = None, p: float | None = None) -> Subspace:
    """Leading eigen-subspace of ``cov`` with a fixed rank ``k`` or energy fraction ``p``."""
    lam, V = _leading_pairs(cov)
    lam = np.clip(lam, 0.0, None)
    total = lam.sum()
    if k is None:
        k = select_rank(lam, 1.0 if p is None else p)
    k = min(k, len(lam))
    frac = float(lam[:k].sum() / total) if total > 0 else 0.0
    return Subspace(V[:, :k], lam[:k].copy(), frac)


def project_reconstruct(sub, h):
    """Coefficients ``z = U^H h`` and reconstruction ``U z``."""
    U = sub.basis if isinstance(sub, Subspace) else np.asarray(sub)
    h = np.asarray(h, dtype=complex)
    z = U.conj().T @ h
    return z, U @ z


def nmse(h, h_hat) -> float:
    h = np.asarray(h)
    den = np.vdot(h, h).real
    if den <= 0:
        raise ValueError("NMSE undefined for a zero channel")
    e = h - np.asarray(h_hat)
    return float(np.vdot(e, e).real / den)


def cosine_similarity(h, h_hat) -> float:
    h = np.asarray(h)
    g = np.asarray(h_hat)
    nh, ng = np.linalg.norm(h), np.linalg.norm(g)
    if nh == 0 or ng == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(min(abs(np.vdot(h, g)) / (nh * ng), 1.0))


def _power_ratio(power_rw, power_ss):
    if not power_rw > 0:
        raise ValueError(f"total channel power must be positive, got {power_rw}")
    return min(max(power_ss, 0.0), power_rw) / power_rw


def feedback_nmse(power_rw: float, power_ss: float) -> float:
    """NMSE from the UE-reported total power and the in-subspace power."""
    return 1.0 - _power_ratio(power_rw, power_ss)


def feedback_cosine(power_rw: float, power_ss: float) -> float:
    return float(np.sqrt(_power_ratio(power_rw, power_ss)))
