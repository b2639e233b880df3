"""Experiment configuration, seed substreams, orchestration and file emission."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .beams import STRATEGIES, complex_noise, dft_codebook, dominant_beams_vote, estimate_channels, \
    evaluate_strategy, per_user_metrics, rank_beams
from .calibration import AgentConfig, ZoneProblem, train_all_zones, write_curve_csv, save_checkpoint, \
    zone_problem
from .channel import SynthConfig, synth_scene, save_scene, write_channels_csv
from .grassmann import davis_kahan_bound
from .subspace import covariance, eig_hermitian, select_rank
from .zoning import build_partition, combined_distance_matrix, fine_cluster_subspaces, kmeans_positions, \
    kmedoids, write_distance_csv, zone_subspaces

CALIB_POPULATIONS = ("rw_oracle", "dt_uncalibrated", "dt_init_calibrated", "random_init_calibrated",
                     "random_uncalibrated")


class ConfigError(ValueError):
    pass


def default_fractions() -> list[float]:
    return [round(0.05 * i, 2) for i in range(21)]


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    z_prime: int = 80
    z: int = 12
    energy_p: float = 0.95
    blend_w: float = 0.5
    pilot_fractions: list[float] = field(default_factory=default_fractions)
    snr_db: float = 10.0
    noiseless: bool = False
    agent: AgentConfig = field(default_factory=AgentConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "out"
    calib_fraction: float = 0.2
    votes_per_channel: int = 3
    kmeans_max_iter: int = 100
    parallelism: int = 1
    save_checkpoints: bool = True
    rank_energy_grid: list[float] = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])

    def __post_init__(self):
        self.pilot_fractions = [float(x) for x in self.pilot_fractions]
        self.seeds = [int(s) for s in self.seeds]
        self.rank_energy_grid = [float(x) for x in self.rank_energy_grid]
        if any(not 0 < x <= 1 for x in self.rank_energy_grid):
            raise ConfigError("rank_energy_grid entries must lie in (0, 1]")
        if not self.pilot_fractions:
            raise ConfigError("pilot_fractions must be nonempty")
        if any(not 0 <= x <= 1 for x in self.pilot_fractions):
            raise ConfigError("pilot fractions must lie in [0, 1]")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if not 1 <= self.z <= self.z_prime:
            raise ConfigError(f"need 1 <= z <= z_prime, got z={self.z}, z_prime={self.z_prime}")
        if not 0 < self.energy_p <= 1:
            raise ConfigError("energy_p must lie in (0, 1]")
        if not 0 <= self.blend_w <= 1:
            raise ConfigError("blend_w must lie in [0, 1]")
        if not 0 < self.calib_fraction <= 1:
            raise ConfigError("calib_fraction must lie in (0, 1]")
        if self.votes_per_channel < 1 or self.parallelism < 1 or self.kmeans_max_iter < 1:
            raise ConfigError("votes_per_channel, parallelism and kmeans_max_iter must be >= 1")

    @property
    def effective_snr(self) -> float:
        return math.inf if self.noiseless else self.snr_db

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        synth = asdict(self.synth)
        synth["reflectivity"] = list(self.synth.reflectivity)
        d["synth"] = synth
        d["agent"] = self.agent.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        doc = dict(doc)
        try:
            synth = _sub(SynthConfig, doc.pop("synth", {}), "synth")
            agent = _sub(AgentConfig, doc.pop("agent", {}), "agent")
            _reject_unknown(cls, doc, "experiment")
            return cls(synth=synth, agent=agent, **doc)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _reject_unknown(kind, doc, where):
    known = {f.name for f in fields(kind)}
    extra = sorted(set(doc) - known)
    if extra:
        raise ConfigError(f"unknown {where} config keys: {', '.join(extra)}")


def _sub(kind, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    _reject_unknown(kind, doc, where)
    try:
        return kind(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(source: str | None) -> ExperimentConfig:
    """``None`` or ``"default"`` gives the built-in defaults; otherwise a JSON file path."""
    if source is None or source == "default":
        return ExperimentConfig()
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


# -- seeding ------------------------------------------------------------------

def seed_sequence(master: int, name: str, *keys: int) -> np.random.SeedSequence:
    """Named, counter-keyed child of a master seed; independent of every other name."""
    return np.random.SeedSequence([int(master), zlib.crc32(name.encode()), *[int(k) for k in keys]])


def substream(master: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, name, *keys))


# -- per-seed pipeline ----------------------------------------------------------

@dataclass
class SeedContext:
    seed: int
    scene: object
    rw: np.ndarray
    dt: np.ndarray
    clusters: list
    distance: np.ndarray
    partition: object
    codebook: object
    _eigs: dict = field(default_factory=dict, repr=False)

    def zone_eig(self, zone, which: str):
        """Cached full eigendecomposition of a zone's RW or DT covariance."""
        key = (zone.zone_id, which)
        if key not in self._eigs:
            H = self.rw if which == "rw" else self.dt
            self._eigs[key] = eig_hermitian(covariance(H[zone.member_ids]))
        return self._eigs[key]


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedContext:
    """Scene, fine clusters, zones and DT zone subspaces for one seed."""
    scene = synth_scene(cfg.synth, substream(seed, "scene"), seed=seed)
    rw, dt = scene.rw_channels(), scene.dt_channels()
    clusters = kmeans_positions(scene.positions, cfg.z_prime, substream(seed, "clustering"),
                                cfg.kmeans_max_iter, ids=scene.ids)
    fine_cluster_subspaces(clusters, dt, cfg.energy_p)
    D = combined_distance_matrix(clusters, cfg.blend_w)
    part = build_partition(clusters, kmedoids(D, cfg.z))
    part.validate(scene.ids)
    part = zone_subspaces(part, dt, p=cfg.energy_p)
    return SeedContext(seed, scene, rw, dt, clusters, D, part, dft_codebook(scene.geometry))


def rank_beams_order(channels, codebook, votes_per_channel):
    return rank_beams(channels, codebook, votes_per_channel)[0]


def _zone_noise(seed, zone_id, shape):
    return complex_noise(substream(seed, "noise", zone_id), shape)


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            if len(r) != len(header):
                raise ValueError(f"row width {len(r)} does not match header width {len(header)}")
            w.writerow([_fmt(x) for x in r])


CURVE_HEADER = ["strategy", "zone_id", "pilot_fraction", "mean_cosine_similarity", "mean_nmse", "seed",
                "defined"]


def sweep_rows(cfg: ExperimentConfig, ctx: SeedContext) -> list[dict]:
    rows = []
    snr = cfg.effective_snr
    for strategy in STRATEGIES:
        noise_rngs = {z.zone_id: substream(ctx.seed, "noise", z.zone_id) for z in ctx.partition.zones}
        rows += evaluate_strategy(ctx.scene, ctx.partition, strategy, cfg.pilot_fractions, snr,
                                  substream(ctx.seed, "random_beams"), ctx.codebook, cfg.votes_per_channel,
                                  seed=ctx.seed, rw_channels=ctx.rw, dt_channels=ctx.dt, noise_rngs=noise_rngs)
    return rows


def summarize_curves(rows) -> list[dict]:
    """Seed-averaged overall curves, one row per (strategy, fraction)."""
    out = []
    for strategy in STRATEGIES:
        for rho in sorted({r["pilot_fraction"] for r in rows}):
            sel = [r for r in rows if r["strategy"] == strategy and r["zone_id"] == "all"
                   and r["pilot_fraction"] == rho]
            if not sel:
                continue
            out.append(dict(strategy=strategy, zone_id="all", pilot_fraction=rho,
                            mean_cosine_similarity=float(np.mean([r["mean_cosine_similarity"] for r in sel])),
                            mean_nmse=float(np.mean([r["mean_nmse"] for r in sel])),
                            seed="mean", defined=all(r["defined"] for r in sel)))
    return out


def write_curves(path, rows) -> None:
    write_csv(path, CURVE_HEADER, [[r[c] for c in CURVE_HEADER] for r in rows])


def run_pilot_sweep(cfg: ExperimentConfig, out_dir=None, contexts=None) -> list[dict]:
    """All strategies x fractions x seeds; writes ``curves.csv`` and returns every row."""
    out = _out_dir(cfg, out_dir)
    rows = []
    for seed in cfg.seeds:
        ctx = contexts[seed] if contexts else prepare_seed(cfg, seed)
        rows += sweep_rows(cfg, ctx)
        k = int(round(cfg.calib_fraction * ctx.codebook.n))
        sets = []
        for z in ctx.partition.zones:
            for origin, H in (("rw_oracle", ctx.rw), ("dt_prior", ctx.dt)):
                sets.append(dominant_beams_vote(H[z.member_ids], k, ctx.codebook, cfg.votes_per_channel,
                                                z.zone_id, origin).to_dict())
        (out / f"beamsets_seed{seed}.json").write_text(json.dumps(sets, indent=1))
    rows += summarize_curves(rows)
    write_curves(out / "curves.csv", rows)
    return rows


RANK_HEADER = ["strategy", "energy_p", "mean_pilot_fraction", "mean_cosine_similarity", "seed"]


def rank_sweep_rows(cfg: ExperimentConfig, ctx: SeedContext) -> list[list]:
    """Curves where each zone spends ``k_z`` pilots, its rank at energy ``p``.

    The x value is the zone-average ``k_z / N``; rw_oracle takes ranks from RW
    covariances, the DT-informed and random strategies from DT covariances.
    """
    rows = []
    snr = cfg.effective_snr
    n = ctx.codebook.n
    for strategy in STRATEGIES:
        src = "rw" if strategy == "rw_oracle" else "dt"
        orders = {}
        rng = substream(ctx.seed, "random_beams")
        for z in ctx.partition.zones:
            H = ctx.rw if strategy == "rw_oracle" else ctx.dt
            if strategy == "random":
                orders[z.zone_id] = rng.permutation(n)
            else:
                orders[z.zone_id] = rank_beams_order(H[z.member_ids], ctx.codebook, cfg.votes_per_channel)
        for p in cfg.rank_energy_grid:
            ks, cos_all = [], []
            for z in ctx.partition.zones:
                lam = np.clip(ctx.zone_eig(z, src)[0], 0.0, None)
                k = select_rank(lam, p)
                rw = ctx.rw[z.member_ids]
                noise = None if math.isinf(snr) else _zone_noise(ctx.seed, z.zone_id, rw.shape)
                H_hat = estimate_channels(rw, orders[z.zone_id][:k], ctx.codebook, snr, noise=noise)
                ks.append(k / n)
                cos_all.append(per_user_metrics(rw, H_hat)[0])
            rows.append([strategy, float(p), float(np.mean(ks)), float(np.concatenate(cos_all).mean()), ctx.seed])
    return rows


def run_rank_sweep(cfg: ExperimentConfig, out_dir=None, contexts=None) -> list[list]:
    out = _out_dir(cfg, out_dir)
    rows = []
    for seed in cfg.seeds:
        ctx = contexts[seed] if contexts else prepare_seed(cfg, seed)
        rows += rank_sweep_rows(cfg, ctx)
    write_csv(out / "rank_curves.csv", RANK_HEADER, rows)
    return rows


# -- calibration ------------------------------------------------------------------

def calibration_problems(cfg: ExperimentConfig, ctx: SeedContext) -> list[ZoneProblem]:
    return [zone_problem(z, ctx.rw, ctx.dt, ctx.codebook, cfg.calib_fraction, cfg.effective_snr,
                         cfg.votes_per_channel) for z in ctx.partition.zones]


def calibrate_seed(cfg: ExperimentConfig, ctx: SeedContext):
    """Train both initialisations on every zone and score five per-user populations.

    Returns ``(per_user, zone_means, results)``; populations share per-beam
    noise within a zone so identical beam sets score identically.
    """
    problems = calibration_problems(cfg, ctx)
    results = {}
    for idx, init in enumerate(("dt_based", "random")):
        acfg = AgentConfig(**{**cfg.agent.to_dict(), "init": init})
        seeds = {p.zone_id: seed_sequence(ctx.seed, "agent", p.zone_id, idx) for p in problems}
        results[init] = train_all_zones(problems, acfg, seeds, cfg.parallelism)
    per_user = {name: [] for name in CALIB_POPULATIONS}
    zone_means = []
    snr = cfg.effective_snr
    for p, z in zip(problems, ctx.partition.zones):
        rw = ctx.rw[z.member_ids]
        sets = {
            "rw_oracle": dominant_beams_vote(rw, p.k, ctx.codebook, cfg.votes_per_channel, z.zone_id,
                                             "rw_oracle").beams,
            "dt_uncalibrated": p.dt_beams,
            "dt_init_calibrated": results["dt_based"][p.zone_id].beam_set.beams,
            "random_init_calibrated": results["random"][p.zone_id].beam_set.beams,
            "random_uncalibrated": results["random"][p.zone_id].init_beam_set.beams,
        }
        noise = None if math.isinf(snr) else _zone_noise(ctx.seed, z.zone_id, rw.shape)
        for name in CALIB_POPULATIONS:
            H_hat = estimate_channels(rw, sets[name], ctx.codebook, snr, noise=noise)
            cos, _, _ = per_user_metrics(rw, H_hat)
            per_user[name].append(cos)
            zone_means.append(dict(seed=ctx.seed, zone_id=z.zone_id, population=name, k=p.k,
                                   users=len(rw), mean_cosine_similarity=float(cos.mean())))
    return {k: np.concatenate(v) for k, v in per_user.items()}, zone_means, results


def run_calibration_cdf(cfg: ExperimentConfig, out_dir=None, contexts=None) -> dict:
    """Writes ``cdf.csv``, ``calibration_zone_means.csv``, learning curves and calibrated beam sets."""
    out = _out_dir(cfg, out_dir)
    pooled = {name: [] for name in CALIB_POPULATIONS}
    zone_rows = []
    for seed in cfg.seeds:
        ctx = contexts[seed] if contexts else prepare_seed(cfg, seed)
        per_user, zm, results = calibrate_seed(cfg, ctx)
        for name in CALIB_POPULATIONS:
            pooled[name].append(per_user[name])
        zone_rows += zm
        for init, res in results.items():
            ordered = [res[zid] for zid in sorted(res)]
            write_curve_csv(out / f"learning_curve_seed{seed}_{init}.csv", ordered)
            (out / f"calibrated_beamsets_seed{seed}_{init}.json").write_text(
                json.dumps([r.summary() for r in ordered], indent=1))
            if cfg.save_checkpoints:
                ck = out / "checkpoints"
                ck.mkdir(exist_ok=True)
                for r in ordered:
                    if r.network is not None:
                        save_checkpoint(r.network, ck / f"q_seed{seed}_{init}_zone{r.zone_id}.bin")
    cdf_rows = []
    for name in CALIB_POPULATIONS:
        vals = np.sort(np.concatenate(pooled[name]))
        n = len(vals)
        cdf_rows += [[name, i, float(v), (i + 1) / n] for i, v in enumerate(vals)]
    write_csv(out / "cdf.csv", ["population", "index", "cosine_similarity", "cdf"], cdf_rows)
    header = ["seed", "zone_id", "population", "k", "users", "mean_cosine_similarity"]
    write_csv(out / "calibration_zone_means.csv", header, [[r[c] for c in header] for r in zone_rows])
    overall = {name: float(np.mean(np.concatenate(pooled[name]))) for name in CALIB_POPULATIONS}
    return {"zone_means": zone_rows, "overall": overall,
            "per_user": {k: np.concatenate(v) for k, v in pooled.items()}}


# -- bound audit ------------------------------------------------------------------

BOUND_HEADER = ["seed", "zone_id", "k", "gap", "diff_norm", "bound", "sin_theta", "holds"]


def audit_seed(ctx: SeedContext) -> list[list]:
    rows = []
    for z in ctx.partition.zones:
        R_dt = covariance(ctx.dt[z.member_ids])
        R_rw = covariance(ctx.rw[z.member_ids])
        k = min(z.rank, R_rw.n - 1)
        rep = davis_kahan_bound(R_dt, R_rw, k, ctx.zone_eig(z, "dt"), ctx.zone_eig(z, "rw"))
        rows.append([ctx.seed, z.zone_id, rep.k, rep.gap, rep.diff_norm, rep.bound, rep.max_sin_theta, rep.holds])
    return rows


def run_bound_audit(cfg: ExperimentConfig, out_dir=None, contexts=None) -> list[list]:
    out = _out_dir(cfg, out_dir)
    rows = []
    for seed in cfg.seeds:
        ctx = contexts[seed] if contexts else prepare_seed(cfg, seed)
        rows += audit_seed(ctx)
    write_csv(out / "bounds.csv", BOUND_HEADER, rows)
    return rows


# -- artifacts ------------------------------------------------------------------

def _out_dir(cfg, out_dir) -> Path:
    out = Path(cfg.output_dir if out_dir is None else out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not out.is_dir():
        raise OSError(f"output path {out} is not a directory")
    return out


def write_scene_artifacts(ctx: SeedContext, out: Path, channels: bool = False) -> None:
    save_scene(ctx.scene, out / f"scene_seed{ctx.seed}.json")
    if channels:
        write_channels_csv(out / f"channels_rw_seed{ctx.seed}.csv", ctx.scene.ids, ctx.rw)
        write_channels_csv(out / f"channels_dt_seed{ctx.seed}.csv", ctx.scene.ids, ctx.dt)


def write_zone_artifacts(ctx: SeedContext, out: Path) -> None:
    (out / f"partition_seed{ctx.seed}.json").write_text(ctx.partition.to_json())
    write_distance_csv(out / f"distance_seed{ctx.seed}.csv", ctx.distance)


def write_manifest(cfg: ExperimentConfig, out: Path, command: str) -> dict:
    arts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            arts[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    doc = {"command": command, "version": __version__, "config": cfg.to_dict(), "seeds": cfg.seeds,
           "artifacts": arts}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc
