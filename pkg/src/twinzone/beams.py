"""DFT pilot codebook, majority-vote beam ranking and pilot-based estimation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .channel import ArrayGeometry, noise_variance

STRATEGIES = ("rw_oracle", "dt_prior", "random")


@dataclass(frozen=True)
class DFTCodebook:
    matrix: np.ndarray  # (N, N) unitary
    geometry: ArrayGeometry

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def beam_power(self, channels) -> np.ndarray:
        """``|F_b^H h|^2`` for every channel row and beam column."""
        H = np.atleast_2d(channels)
        return np.abs(H @ self.matrix.conj()) ** 2


@dataclass
class BeamSet:
    zone_id: int
    beams: list[int]
    origin: str  # rw_oracle | dt_prior | random | calibrated

    def __post_init__(self):
        self.beams = [int(b) for b in self.beams]
        if len(set(self.beams)) != len(self.beams):
            raise ValueError("beam indices must be distinct")

    @property
    def k(self) -> int:
        return len(self.beams)

    def to_dict(self) -> dict:
        return {"zone_id": self.zone_id, "beams": self.beams, "origin": self.origin}

    @classmethod
    def from_dict(cls, doc) -> "BeamSet":
        return cls(int(doc["zone_id"]), list(doc["beams"]), doc["origin"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(2j * np.pi * np.outer(k, k) / n) / math.sqrt(n)


def dft_codebook(geom: ArrayGeometry) -> DFTCodebook:
    """Kronecker 2D DFT; column ``p * n_v + q`` pairs horizontal bin p with vertical bin q."""
    return DFTCodebook(np.kron(dft_matrix(geom.n_h), dft_matrix(geom.n_v)), geom)


def rank_beams(channels, codebook: DFTCodebook, votes_per_channel: int = 3):
    """All N beams ordered by votes, then accumulated power, then index.

    Returns ``(order, votes, power)``.
    """
    P = codebook.beam_power(channels)
    n = codebook.n
    m = min(votes_per_channel, n)
    top = np.argsort(-P, axis=1, kind="stable")[:, :m]
    # beams carrying no power (relative to the channel's strongest) do not vote
    live = np.take_along_axis(P, top, 1) > 1e-12 * P.max(1, keepdims=True)
    votes = np.bincount(top[live], minlength=n)
    power = P.sum(0)
    order = np.lexsort((np.arange(n), -power, -votes))
    return order, votes, power


def dominant_beams_vote(channels, k: int, codebook: DFTCodebook, votes_per_channel: int = 3,
                        zone_id: int = 0, origin: str = "dt_prior") -> BeamSet:
    if k < 1:
        raise ValueError("need at least one beam")
    if k > codebook.n:
        raise ValueError(f"k={k} exceeds codebook size {codebook.n}")
    if len(channels) == 0:
        raise ValueError("no channels to vote with")
    order, _, _ = rank_beams(channels, codebook, votes_per_channel)
    return BeamSet(zone_id, order[:k].tolist(), origin)


def measure_beams(channels, beams, codebook: DFTCodebook, snr_db: float, rng=None, noise=None):
    """Pilot measurements ``y[u, i] = f_{b_i}^H h_u + n`` for every channel and beam.

    ``noise`` may carry pre-drawn unit-variance complex Gaussians of shape (U, N),
    indexed by beam, so that different beam sets see common noise per beam.
    """
    H = np.atleast_2d(channels)
    beams = np.asarray(beams, dtype=int)
    Y = H @ codebook.matrix[:, beams].conj()
    var = np.array([noise_variance(h, snr_db) for h in H])
    if np.any(var > 0):
        if noise is None:
            z = (rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape)) / math.sqrt(2)
        else:
            z = np.atleast_2d(noise)[:, beams]
        Y = Y + np.sqrt(var)[:, None] * z
    return Y


def estimate_channels(channels, beams, codebook: DFTCodebook, snr_db: float, rng=None, noise=None):
    """Least-squares reconstruction ``sum_b y_b f_b`` from the selected beams."""
    beams = np.asarray(beams, dtype=int)
    H = np.atleast_2d(channels)
    if beams.size == 0:
        return np.zeros_like(H, dtype=complex)
    Y = measure_beams(H, beams, codebook, snr_db, rng, noise)
    return Y @ codebook.matrix[:, beams].T


def pilot_estimate(h_rw, beam_set, snr_db: float, rng, codebook: DFTCodebook) -> np.ndarray:
    beams = beam_set.beams if isinstance(beam_set, BeamSet) else list(beam_set)
    return estimate_channels(np.asarray(h_rw)[None, :], beams, codebook, snr_db, rng)[0]


def complex_noise(rng, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def per_user_metrics(H, H_hat):
    """Row-wise cosine similarity and NMSE; rows with a zero estimate get similarity 0."""
    nh = np.linalg.norm(H, axis=1)
    ng = np.linalg.norm(H_hat, axis=1)
    inner = np.abs(np.sum(H.conj() * H_hat, axis=1))
    defined = (nh > 0) & (ng > 0)
    cos = np.zeros(len(H))
    cos[defined] = np.minimum(inner[defined] / (nh[defined] * ng[defined]), 1.0)
    err = np.sum(np.abs(H - H_hat) ** 2, axis=1)
    nm = np.where(nh > 0, err / np.where(nh > 0, nh**2, 1.0), np.nan)
    return cos, nm, defined


def strategy_order(strategy: str, rw, dt, codebook: DFTCodebook, rng, votes_per_channel: int = 3):
    """Full beam ranking for a strategy; a k-beam set is its length-k prefix."""
    if strategy == "rw_oracle":
        return rank_beams(rw, codebook, votes_per_channel)[0]
    if strategy == "dt_prior":
        return rank_beams(dt, codebook, votes_per_channel)[0]
    if strategy == "random":
        return rng.permutation(codebook.n)
    raise ValueError(f"unknown strategy {strategy!r}")


def evaluate_strategy(scene, partition, strategy: str, pilot_fractions, snr_db: float, rng,
                      codebook: DFTCodebook | None = None, votes_per_channel: int = 3,
                      seed=None, rw_channels=None, dt_channels=None, noise_rngs=None):
    """Mean estimation quality per zone and overall for each pilot fraction.

    Each zone uses ``round(rho * N)`` beams.  Random beam sets are nested
    prefixes of one permutation per zone.  ``noise_rngs`` (zone_id -> rng)
    lets several strategies share the same per-beam noise draws.
    """
    codebook = codebook or dft_codebook(scene.geometry)
    H_rw = scene.rw_channels() if rw_channels is None else rw_channels
    H_dt = scene.dt_channels() if dt_channels is None else dt_channels
    n = codebook.n
    rows = []
    per_zone = {}
    for z in partition.zones:
        rw, dt = H_rw[z.member_ids], H_dt[z.member_ids]
        order = strategy_order(strategy, rw, dt, codebook, rng, votes_per_channel)
        nrng = noise_rngs[z.zone_id] if noise_rngs is not None else rng
        noise = complex_noise(nrng, rw.shape) if not math.isinf(snr_db) else None
        per_zone[z.zone_id] = []
        for rho in pilot_fractions:
            k = int(round(rho * n))
            H_hat = estimate_channels(rw, order[:k], codebook, snr_db, noise=noise)
            cos, nm, defined = per_user_metrics(rw, H_hat)
            per_zone[z.zone_id].append((cos, nm, k > 0))
            rows.append(dict(strategy=strategy, zone_id=z.zone_id, pilot_fraction=float(rho),
                             mean_cosine_similarity=float(cos.mean()), mean_nmse=float(np.nanmean(nm)),
                             seed=seed, defined=bool(k > 0 and defined.all())))
    for i, rho in enumerate(pilot_fractions):
        cos = np.concatenate([v[i][0] for v in per_zone.values()])
        nm = np.concatenate([v[i][1] for v in per_zone.values()])
        rows.append(dict(strategy=strategy, zone_id="all", pilot_fraction=float(rho),
                         mean_cosine_similarity=float(cos.mean()), mean_nmse=float(np.nanmean(nm)),
                         seed=seed, defined=bool(all(v[i][2] for v in per_zone.values()))))
    return rows


def min_fraction_for(rows, target: float, zone_id="all"):
    """Smallest pilot fraction whose mean similarity reaches ``target`` (None if never)."""
    pts = sorted((r["pilot_fraction"], r["mean_cosine_similarity"]) for r in rows if r["zone_id"] == zone_id)
    for rho, s in pts:
        if s >= target:
            return rho
    return None
