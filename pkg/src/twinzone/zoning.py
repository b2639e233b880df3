"""Two-step zoning: position k-means into fine clusters, then k-medoids on a
blended Grassmann + positional distance between fine clusters."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .grassmann import grassmann_distance_min_rank
from .subspace import Subspace, covariance, eig_subspace, select_rank, _leading_pairs


@dataclass
class FineCluster:
    id: int
    member_ids: np.ndarray
    centroid: np.ndarray
    subspace: Subspace | None = None


@dataclass
class Zone:
    zone_id: int
    fine_cluster_ids: list[int]
    member_ids: np.ndarray
    medoid_fine_cluster: int
    subspace: Subspace | None = None

    @property
    def rank(self) -> int | None:
        return None if self.subspace is None else self.subspace.rank


@dataclass
class ZonePartition:
    zones: list[Zone]
    fine_clusters: list[FineCluster] = field(default_factory=list)

    @property
    def Z(self) -> int:
        return len(self.zones)

    def validate(self, user_ids) -> None:
        """Raise unless zones are pairwise disjoint and cover ``user_ids``."""
        seen: set[int] = set()
        for z in self.zones:
            m = set(int(i) for i in z.member_ids)
            if len(m) != len(z.member_ids):
                raise ValueError(f"zone {z.zone_id} lists a user twice")
            if seen & m:
                raise ValueError(f"zone {z.zone_id} overlaps another zone")
            seen |= m
        if seen != set(int(i) for i in user_ids):
            raise ValueError("zones do not cover the user set exactly")

    def to_dict(self) -> dict:
        fc = {c.id: c for c in self.fine_clusters}
        return {
            "Z": self.Z,
            "zones": [
                {
                    "zone_id": z.zone_id,
                    "medoid_fine_cluster": z.medoid_fine_cluster,
                    "k": z.rank,
                    "energy_fraction": None if z.subspace is None else z.subspace.energy_fraction,
                    "fine_clusters": [
                        {
                            "id": cid,
                            "member_ids": [int(i) for i in fc[cid].member_ids] if cid in fc else [],
                            "k": None if cid not in fc or fc[cid].subspace is None else fc[cid].subspace.rank,
                            "energy_fraction": None if cid not in fc or fc[cid].subspace is None
                            else fc[cid].subspace.energy_fraction,
                        }
                        for cid in z.fine_cluster_ids
                    ],
                    "member_ids": [int(i) for i in z.member_ids],
                }
                for z in self.zones
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# -- k-means ------------------------------------------------------------------

def _sqdist(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def kmeans(points, k: int, rng: np.random.Generator, max_iter: int = 100):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(labels, centers, objective_history)``.  A cluster that goes empty
    is reseeded at the point farthest from its current center.
    """
    X = np.asarray(points, dtype=float)
    n = len(X)
    if k < 1:
        raise ValueError("number of clusters must be >= 1")
    if k > n:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = _sqdist(X, centers[:1])[:, 0]
    for j in range(1, k):
        tot = d2.sum()
        idx = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centers[j] = X[idx]
        d2 = np.minimum(d2, _sqdist(X, centers[j:j + 1])[:, 0])

    history = []
    labels = None
    for _ in range(max_iter):
        D = _sqdist(X, centers)
        new = D.argmin(1)
        for j in range(k):
            if not np.any(new == j):
                far = int(D[np.arange(n), new].argmax())
                new[far] = j
                D[far, j] = 0.0
        history.append(float(D[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([X[labels == j].mean(0) for j in range(k)])
    D = _sqdist(X, centers)
    history.append(float(D[np.arange(n), labels].sum()))
    return labels, centers, history


def kmeans_positions(positions, z_prime: int, rng, max_iter: int = 100, ids=None) -> list[FineCluster]:
    """Fine clusters of users by position (subspaces left unset)."""
    X = np.asarray(positions, dtype=float)
    ids = np.arange(len(X)) if ids is None else np.asarray(ids)
    labels, _, _ = kmeans(X, z_prime, rng, max_iter)
    out = []
    for j in range(z_prime):
        sel = np.flatnonzero(labels == j)
        out.append(FineCluster(j, ids[sel], X[sel].mean(0)))
    return out


def fine_cluster_subspaces(clusters, dt_channels, p: float) -> list[FineCluster]:
    """Attach the DT-covariance subspace holding at least ``p`` of the energy.

    ``dt_channels`` is indexed by user id.
    """
    H = np.asarray(dt_channels)
    for c in clusters:
        if len(c.member_ids) == 0:
            raise ValueError(f"fine cluster {c.id} is empty")
        c.subspace = eig_subspace(covariance(H[c.member_ids]), p=p)
    return clusters


def combined_distance_matrix(clusters, weight_w: float = 0.5) -> np.ndarray:
    """``w * d_g / max d_g + (1 - w) * ||c_i - c_j|| / max``; a zero-max term is dropped."""
    if not 0 <= weight_w <= 1:
        raise ValueError("blend weight must lie in [0, 1]")
    n = len(clusters)
    if any(c.subspace is None for c in clusters):
        raise ValueError("all fine clusters need subspaces")
    G = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            G[i, j] = G[j, i] = grassmann_distance_min_rank(clusters[i].subspace, clusters[j].subspace)
    C = np.array([c.centroid for c in clusters])
    P = np.sqrt(_sqdist(C, C))
    P = 0.5 * (P + P.T)
    np.fill_diagonal(P, 0.0)
    D = np.zeros((n, n))
    if G.max() > 0:
        D += weight_w * G / G.max()
    if P.max() > 0:
        D += (1 - weight_w) * P / P.max()
    return D


# -- k-medoids ----------------------------------------------------------------

@dataclass
class MedoidResult:
    labels: np.ndarray
    medoids: np.ndarray
    cost: float
    history: list[float]


def _assign_cost(D, medoids):
    sub = D[:, medoids]
    labels = sub.argmin(1)
    labels[list(medoids)] = np.arange(len(medoids))  # a medoid always owns itself
    return labels, float(sub.min(1).sum())


def kmedoids(D, Z: int, rng=None, max_iter: int = 100, init: str = "build") -> MedoidResult:
    """PAM: greedy BUILD (or random) initialisation, then best-improvement SWAP.

    Ties go to the lowest index, so ``init="build"`` is deterministic and does
    not consume ``rng``.
    """
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    if Z < 1:
        raise ValueError("number of zones must be >= 1")
    if Z > n:
        raise ValueError(f"cannot form {Z} zones from {n} fine clusters")
    if init == "random":
        medoids = list(np.sort(rng.choice(n, Z, replace=False)))
    else:
        medoids = [int(D.sum(0).argmin())]
        nearest = D[:, medoids[0]].copy()
        for _ in range(1, Z):
            gain = np.maximum(nearest[:, None] - D, 0.0).sum(0)
            gain[medoids] = -1.0
            m = int(gain.argmax())
            medoids.append(m)
            nearest = np.minimum(nearest, D[:, m])
    _, cost = _assign_cost(D, medoids)
    history = [cost]
    for _ in range(max_iter):
        best = (cost, None, None)
        for i in range(Z):
            rest = [m for t, m in enumerate(medoids) if t != i]
            d_rest = D[:, rest].min(1) if rest else np.full(n, np.inf)
            costs = np.minimum(d_rest[:, None], D).sum(0)
            costs[medoids] = np.inf
            o = int(costs.argmin())
            if costs[o] < best[0] - 1e-12 * max(1.0, abs(best[0])):
                best = (float(costs[o]), i, o)
        if best[1] is None:
            break
        medoids[best[1]] = best[2]
        cost = best[0]
        history.append(cost)
    labels, cost = _assign_cost(D, medoids)
    return MedoidResult(labels, np.array(medoids), cost, history)


def build_partition(clusters, result: MedoidResult) -> ZonePartition:
    zones = []
    for z, m in enumerate(result.medoids):
        fc = [c for c, lab in zip(clusters, result.labels) if lab == z]
        members = np.sort(np.concatenate([c.member_ids for c in fc])) if fc else np.array([], dtype=int)
        zones.append(Zone(z, [c.id for c in fc], members, int(clusters[m].id)))
    return ZonePartition(zones, list(clusters))


def rank_for_nmse(channels, basis, eps: float) -> int:
    """Smallest k whose member-average projection NMSE is at most ``eps``.

    ``basis`` columns must be ordered by importance.
    """
    H = np.asarray(channels)
    power = np.sum(np.abs(H) ** 2, axis=1)
    ok = power > 0
    coef = np.abs(H[ok].conj() @ basis) ** 2  # |u_i^H h|^2
    resid = 1.0 - np.cumsum(coef, axis=1) / power[ok, None]
    mean = resid.mean(0)
    for k in range(1, basis.shape[1] + 1):  # linear ascending search
        if mean[k - 1] <= eps:
            return k
    return basis.shape[1]


def zone_subspaces(partition: ZonePartition, channels, p: float | None = None,
                   eps: float | None = None, k: int | None = None) -> ZonePartition:
    """Per-zone eigen-subspace with rank from energy ``p``, NMSE target ``eps`` or fixed ``k``."""
    H = np.asarray(channels)
    if sum(x is not None for x in (p, eps, k)) != 1:
        raise ValueError("give exactly one of p, eps, k")
    zones = []
    for z in partition.zones:
        if len(z.member_ids) == 0:
            raise ValueError(f"zone {z.zone_id} is empty")
        cov = covariance(H[z.member_ids])
        lam, V = _leading_pairs(cov)
        lam = np.clip(lam, 0.0, None)
        if p is not None:
            kz = select_rank(lam, p)
        elif eps is not None:
            kz = rank_for_nmse(H[z.member_ids], V, eps)
        else:
            kz = min(k, len(lam))
        frac = float(lam[:kz].sum() / lam.sum()) if lam.sum() > 0 else 0.0
        sub = Subspace(V[:, :kz], lam[:kz].copy(), frac)
        zones.append(Zone(z.zone_id, list(z.fine_cluster_ids), z.member_ids, z.medoid_fine_cluster, sub))
    return ZonePartition(zones, partition.fine_clusters)


def write_distance_csv(path, D) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i"] + [f"j{j}" for j in range(D.shape[1])])
        for i, row in enumerate(D):
            w.writerow([i] + [repr(float(x)) for x in row])
