"""Paired real-world / digital-twin geometric channels over a synthetic site.

The real-world (RW) scene is a point-scatterer model with a quasi-LOS path and
up to three reflection orders per user.  The digital twin (DT) keeps only the
strongest path(s) of each user and perturbs their angles and gains, which is
how a coarse ray-traced replica of a shifted geometry tends to go wrong.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array with ``n_h`` horizontal and ``n_v`` vertical elements."""

    n_h: int = 16
    n_v: int = 8
    spacing: float = 0.5  # wavelengths

    def __post_init__(self):
        if self.n_h < 1 or self.n_v < 1:
            raise ValueError(f"array dimensions must be >= 1, got {self.n_h}x{self.n_v}")
        if not self.spacing > 0:
            raise ValueError(f"element spacing must be positive, got {self.spacing}")

    @property
    def n(self) -> int:
        return self.n_h * self.n_v


@dataclass(frozen=True)
class PathComponent:
    gain: complex
    azimuth: float
    elevation: float


@dataclass
class UserRecord:
    id: int
    position: tuple[float, float, float]
    paths: list[PathComponent] = field(default_factory=list)

    @property
    def in_outage(self) -> bool:
        return not self.paths


@dataclass
class ScenePair:
    rw_users: list[UserRecord]
    dt_users: list[UserRecord]
    geometry: ArrayGeometry
    seed: int | None = None

    @property
    def ids(self) -> np.ndarray:
        return np.array([u.id for u in self.rw_users], dtype=np.int64)

    @property
    def positions(self) -> np.ndarray:
        return np.array([u.position for u in self.rw_users], dtype=float)

    def rw_channels(self) -> np.ndarray:
        return channel_matrix(self.geometry, self.rw_users)

    def dt_channels(self) -> np.ndarray:
        return channel_matrix(self.geometry, self.dt_users)


@dataclass
class SynthConfig:
    user_count: int = 2000
    max_paths_rw: int = 25
    max_paths_dt: int = 1
    angle_jitter_std: float = 0.05
    gain_jitter_db: float = 2.0
    scatterer_count: int = 120
    site_extent: float = 200.0
    snr_db: float = 10.0
    n_h: int = 16
    n_v: int = 8
    spacing: float = 0.5
    bs_height: float = 15.0
    user_height: float = 1.5
    bs_standoff: float = 20.0
    scatter_radius: float = 40.0
    reflection_loss_db: float = 3.0
    reflectivity: tuple[float, float] = (0.4, 1.0)
    los_block_prob: float = 0.5
    los_block_loss_db: float = 10.0
    max_order: int = 3
    chains_per_order: int = 8

    def __post_init__(self):
        self.reflectivity = tuple(self.reflectivity)
        if self.max_paths_dt > self.max_paths_rw:
            raise ValueError("max_paths_dt must not exceed max_paths_rw")
        if self.angle_jitter_std < 0:
            raise ValueError("angle_jitter_std must be >= 0")

    @property
    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry(self.n_h, self.n_v, self.spacing)


def steering_vector(geom: ArrayGeometry, azimuth: float, elevation: float) -> np.ndarray:
    """Unit-norm UPA response ``kron(a_h, a_v) / sqrt(N)``."""
    m = np.arange(geom.n_h)
    n = np.arange(geom.n_v)
    a_h = np.exp(2j * np.pi * geom.spacing * m * math.sin(azimuth) * math.cos(elevation))
    a_v = np.exp(2j * np.pi * geom.spacing * n * math.sin(elevation))
    return np.kron(a_h, a_v) / math.sqrt(geom.n)


def steering_matrix(geom: ArrayGeometry, azimuth, elevation) -> np.ndarray:
    """Stacked steering vectors, one row per (azimuth, elevation) pair."""
    az = np.asarray(azimuth, dtype=float).reshape(-1, 1)
    el = np.asarray(elevation, dtype=float).reshape(-1, 1)
    m = np.arange(geom.n_h)
    n = np.arange(geom.n_v)
    a_h = np.exp(2j * np.pi * geom.spacing * m * (np.sin(az) * np.cos(el)))
    a_v = np.exp(2j * np.pi * geom.spacing * n * np.sin(el))
    out = (a_h[:, :, None] * a_v[:, None, :]).reshape(len(az), geom.n)
    return out / math.sqrt(geom.n)


def assemble_channel(geom: ArrayGeometry, paths) -> np.ndarray:
    h = np.zeros(geom.n, dtype=complex)
    for p in paths:
        h += p.gain * steering_vector(geom, p.azimuth, p.elevation)
    return h


def channel_matrix(geom: ArrayGeometry, users) -> np.ndarray:
    """Channels of many users as a (U, N) array.

    Vectorised over paths; numerically matches ``assemble_channel`` to roundoff.
    """
    counts = [len(u.paths) for u in users]
    out = np.zeros((len(users), geom.n), dtype=complex)
    if sum(counts) == 0:
        return out
    gains = np.array([p.gain for u in users for p in u.paths], dtype=complex)
    az = np.array([p.azimuth for u in users for p in u.paths])
    el = np.array([p.elevation for u in users for p in u.paths])
    owner = np.repeat(np.arange(len(users)), counts)
    contrib = gains[:, None] * steering_matrix(geom, az, el)
    np.add.at(out, owner, contrib)
    return out


def _wrap_azimuth(a: float) -> float:
    if -math.pi <= a < math.pi:
        return a
    return (a + math.pi) % (2 * math.pi) - math.pi


def _clamp_elevation(e: float) -> float:
    return min(max(e, -math.pi / 2), math.pi / 2)


def _poisson_disk(rng, count, lo, hi, min_dist, max_tries=60):
    """Dart-throwing Poisson-disk sampler in the axis-aligned box [lo, hi]."""
    pts = []
    tries = 0
    while len(pts) < count and tries < max_tries * count:
        tries += 1
        p = rng.uniform(lo, hi)
        if all(np.hypot(*(p - q)) >= min_dist for q in pts):
            pts.append(p)
    return np.array(pts).reshape(-1, 2)


def _direction(src, dst):
    d = dst - src
    horiz = math.hypot(d[0], d[1])
    return math.atan2(d[1], d[0]), math.atan2(d[2], horiz)


def synth_scene(cfg: SynthConfig, rng: np.random.Generator, seed: int | None = None) -> ScenePair:
    if cfg.user_count < 1:
        raise ValueError("user_count must be >= 1")
    if not cfg.site_extent > 0:
        raise ValueError(f"site_extent must be positive, got {cfg.site_extent}")
    geom = cfg.geometry
    ext = cfg.site_extent
    lo = np.array([cfg.bs_standoff, -ext / 2])
    hi = np.array([cfg.bs_standoff + ext, ext / 2])
    bs = np.array([0.0, 0.0, cfg.bs_height])

    min_dist = 0.5 * ext / math.sqrt(max(cfg.scatterer_count, 1))
    sc_xy = _poisson_disk(rng, cfg.scatterer_count, lo, hi, min_dist)
    n_sc = len(sc_xy)
    sc = np.column_stack([sc_xy, rng.uniform(2.0, 30.0, n_sc)])
    refl = rng.uniform(cfg.reflectivity[0], cfg.reflectivity[1], n_sc)
    sc_dist = np.linalg.norm(sc[:, None, :2] - sc[None, :, :2], axis=-1)
    bounce = 10 ** (-cfg.reflection_loss_db / 20)

    user_xy = rng.uniform(lo, hi, size=(cfg.user_count, 2))
    rw_users, dt_users = [], []
    for uid in range(cfg.user_count):
        pos = np.array([user_xy[uid, 0], user_xy[uid, 1], cfg.user_height])
        cands = []  # (amplitude, first-hop point)

        d_los = float(np.linalg.norm(pos - bs))
        amp = 1.0 / d_los
        if rng.random() < cfg.los_block_prob:
            amp *= 10 ** (-cfg.los_block_loss_db / 20)
        cands.append((amp, pos))

        near = np.flatnonzero(np.hypot(*(sc[:, :2] - pos[:2]).T) <= cfg.scatter_radius)
        for s in near:
            length = np.linalg.norm(sc[s] - bs) + np.linalg.norm(pos - sc[s])
            cands.append((bounce * refl[s] / length, sc[s]))
        for order in range(2, cfg.max_order + 1):
            if len(near) == 0:
                break
            for _ in range(cfg.chains_per_order):
                chain = [int(rng.choice(near))]
                for _ in range(order - 2):
                    nbrs = np.flatnonzero((sc_dist[chain[-1]] <= cfg.scatter_radius)
                                          & (sc_dist[chain[-1]] > 0))
                    if len(nbrs) == 0:
                        break
                    chain.append(int(rng.choice(nbrs)))
                # the BS-side bounce may be anywhere on site (long-range reflection)
                last = int(rng.integers(n_sc))
                if len(chain) < order - 1 or last in chain:
                    continue
                chain.append(last)
                # chain is listed user-side first; the BS sees the last scatterer
                pts = [pos] + [sc[c] for c in chain] + [bs]
                length = sum(np.linalg.norm(pts[i + 1] - pts[i]) for i in range(len(pts) - 1))
                amp = bounce ** order * np.prod(refl[chain]) / length
                cands.append((amp, sc[chain[-1]]))

        phases = rng.uniform(0, 2 * np.pi, len(cands))
        order_idx = sorted(range(len(cands)), key=lambda i: -cands[i][0])[: cfg.max_paths_rw]
        paths = []
        for i in order_idx:
            amp, hop = cands[i]
            az, el = _direction(bs, hop)
            paths.append(PathComponent(complex(amp * np.exp(1j * phases[i])),
                                       _wrap_azimuth(az), _clamp_elevation(el)))

        dt_paths = []
        for p in paths[: cfg.max_paths_dt]:
            daz, dez = rng.normal(0.0, cfg.angle_jitter_std, 2)
            g = 10 ** (rng.normal(0.0, cfg.gain_jitter_db) / 20) if cfg.gain_jitter_db > 0 else 1.0
            dt_paths.append(PathComponent(p.gain * g,
                                          _wrap_azimuth(p.azimuth + daz),
                                          _clamp_elevation(p.elevation + dez)))
        pos_t = (float(pos[0]), float(pos[1]), float(pos[2]))
        rw_users.append(UserRecord(uid, pos_t, paths))
        dt_users.append(UserRecord(uid, pos_t, dt_paths))
    return ScenePair(rw_users, dt_users, geom, seed)


def noise_variance(h: np.ndarray, snr_db: float) -> float:
    """Per-measurement noise power, referenced to mean per-element channel power."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    h = np.asarray(h)
    return float(np.vdot(h, h).real) * 10 ** (-snr_db / 10) / h.shape[-1]


def measure_pilot(h, f, snr_db: float, rng: np.random.Generator) -> complex:
    """One received pilot sample ``f^H h + n``; ``snr_db=inf`` disables noise."""
    y = complex(np.vdot(f, h))
    var = noise_variance(h, snr_db)
    if var == 0.0:
        return y
    n = math.sqrt(var / 2) * (rng.standard_normal() + 1j * rng.standard_normal())
    return y + n


# -- serialization -----------------------------------------------------------

def _users_to_json(users):
    return [
        {
            "id": u.id,
            "position": list(u.position),
            "paths": [[p.gain.real, p.gain.imag, p.azimuth, p.elevation] for p in u.paths],
        }
        for u in users
    ]


def _users_from_json(items):
    return [
        UserRecord(int(it["id"]), tuple(float(x) for x in it["position"]),
                   [PathComponent(complex(g_re, g_im), az, el) for g_re, g_im, az, el in it["paths"]])
        for it in items
    ]


def scene_to_dict(scene: ScenePair) -> dict:
    return {
        "geometry": asdict(scene.geometry),
        "seed": scene.seed,
        "rw_users": _users_to_json(scene.rw_users),
        "dt_users": _users_to_json(scene.dt_users),
    }


def scene_from_dict(doc: dict) -> ScenePair:
    return ScenePair(
        rw_users=_users_from_json(doc["rw_users"]),
        dt_users=_users_from_json(doc["dt_users"]),
        geometry=ArrayGeometry(**doc["geometry"]),
        seed=doc.get("seed"),
    )


def save_scene(scene: ScenePair, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)))


def load_scene(path) -> ScenePair:
    return scene_from_dict(json.loads(Path(path).read_text()))


def write_channels_csv(path, ids, channels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "element", "re", "im"])
        for uid, h in zip(ids, channels):
            for m, v in enumerate(h):
                w.writerow([int(uid), m, repr(float(v.real)), repr(float(v.imag))])
