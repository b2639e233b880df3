"""Per-zone beam-set calibration with a clipped double deep Q-network.

A zone agent holds a mask of ``k_z`` active DFT beams.  Each step one active
beam leaves (chosen by a fixed rule) and the agent picks the inactive beam that
enters.  The score of a mask is the zone-average cosine similarity inferred
from noisy pilot power feedback.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .beams import BeamSet, DFTCodebook, complex_noise, dominant_beams_vote
from .channel import noise_variance

HISTORY = 10
INITS = ("dt_based", "random")


@dataclass
class AgentConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    epsilon_floor: float = 0.1
    epsilon_decay: float = 0.9995
    episodes: int = 300
    steps_per_episode: int = 20
    replay_capacity: int = 5000
    batch_size: int = 64
    target_sync_every: int = 100
    # environment steps per gradient step
    train_every: int = 4
    hidden_layers: tuple[int, ...] = (128, 128)
    grad_norm_cap: float = 1.0
    init: str = "dt_based"
    # S_0 in the reward: score at the start of each episode, or of training
    s0_reference: str = "episode"
    # retention check: top candidates re-scored over this many noisy rounds
    verify_candidates: int = 5
    verify_rounds: int = 16
    retention_margin: float = 1e-3

    def __post_init__(self):
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0 < self.epsilon_decay < 1:
            raise ValueError(f"epsilon_decay must lie in (0, 1), got {self.epsilon_decay}")
        for name in ("episodes", "steps_per_episode", "replay_capacity", "batch_size",
                     "target_sync_every", "train_every", "verify_rounds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.s0_reference not in ("episode", "training"):
            raise ValueError("s0_reference must be 'episode' or 'training'")
        if not self.grad_norm_cap > 0:
            raise ValueError("grad_norm_cap must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d


# -- environment --------------------------------------------------------------

@dataclass
class ZoneProblem:
    """Everything a zone agent sees: RW channels (through feedback only), DT channels, k_z."""

    zone_id: int
    rw_channels: np.ndarray  # (U, N)
    dt_channels: np.ndarray  # (U, N)
    codebook: DFTCodebook
    k: int
    dt_beams: list[int]
    snr_db: float = 10.0

    def __post_init__(self):
        n = self.codebook.n
        if not 1 <= self.k <= n:
            raise ValueError(f"k_z={self.k} must lie in [1, {n}]")
        if len(self.dt_beams) != self.k:
            raise ValueError("DT beam set size must equal k_z")
        self._proj = np.atleast_2d(self.rw_channels) @ self.codebook.matrix.conj()  # f_b^H h
        self._beam_pow = np.abs(self._proj) ** 2
        self._power = np.sum(np.abs(self.rw_channels) ** 2, axis=1)
        if np.any(self._power <= 0):
            raise ValueError("zone contains a zero channel")
        self._sigma = np.sqrt([noise_variance(h, self.snr_db) for h in np.atleast_2d(self.rw_channels)])
        self.dt_beam_power = self.codebook.beam_power(self.dt_channels).mean(0)

    @property
    def n(self) -> int:
        return self.codebook.n

    @property
    def noiseless(self) -> bool:
        return not np.any(self._sigma > 0)

    def score(self, mask, rng=None, noise=None) -> float:
        """Zone-mean feedback cosine ``sqrt(min(P_ss, P_rw) / P_rw)`` for one pilot round.

        Without explicit ``noise`` the received power over the k active beams is
        drawn from its exact law, ``(sigma^2 / 2) * chi2'(2k, 2 P_cap / sigma^2)``,
        which is one draw per user instead of 2k Gaussians.
        """
        m = np.asarray(mask, dtype=float)
        if noise is not None and not self.noiseless:
            beams = np.flatnonzero(m)
            y = self._proj[:, beams] + self._sigma[:, None] * noise[:, beams]
            p_ss = np.sum(np.abs(y) ** 2, axis=1)
        else:
            p_ss = self._beam_pow @ m
            if not self.noiseless:
                half = 0.5 * self._sigma**2
                p_ss = half * rng.noncentral_chisquare(2 * int(m.sum()), p_ss / half)
        return float(np.mean(np.sqrt(np.minimum(p_ss, self._power) / self._power)))


def zone_problem(zone, rw_channels, dt_channels, codebook: DFTCodebook, pilot_fraction: float,
                 snr_db: float, votes_per_channel: int = 3) -> ZoneProblem:
    ids = zone.member_ids
    k = int(round(pilot_fraction * codebook.n))
    k = min(max(k, 1), codebook.n)
    bs = dominant_beams_vote(dt_channels[ids], k, codebook, votes_per_channel, zone.zone_id)
    return ZoneProblem(zone.zone_id, rw_channels[ids], dt_channels[ids], codebook, k, bs.beams, snr_db)


@dataclass
class CalibState:
    mask: np.ndarray  # (N,) of 0/1
    history: np.ndarray  # (10,), most recent last

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int8)
        self.history = np.asarray(self.history, dtype=float)
        if self.history.shape != (HISTORY,):
            raise ValueError(f"history must have length {HISTORY}")

    @property
    def beams(self) -> list[int]:
        return np.flatnonzero(self.mask).tolist()

    @property
    def score(self) -> float:
        return float(self.history[-1])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.mask.astype(float), self.history])


@dataclass(frozen=True)
class RewardRecord:
    s_prev: float
    s_next: float
    s_init: float
    reward: float


def reward_value(s_prev: float, s_next: float, s_init: float) -> float:
    """Relative change clipped to [-1, 1], minus 0.5 when below the reference score."""
    denom = abs(s_init) if s_init != 0 else 1e-12
    r = min(max((s_next - s_prev) / denom, -1.0), 1.0)
    return r - 0.5 * float(s_next < s_init)


def initial_mask(problem: ZoneProblem, init: str, rng) -> np.ndarray:
    mask = np.zeros(problem.n, dtype=np.int8)
    if init == "dt_based":
        mask[problem.dt_beams] = 1
    elif init == "random":
        mask[rng.choice(problem.n, problem.k, replace=False)] = 1
    else:
        raise ValueError(f"unknown init {init!r}")
    return mask


def env_reset(problem: ZoneProblem, init: str, rng, mask=None) -> CalibState:
    """Fresh state with zero history and one noisy score of the initial mask.

    ``mask`` replays a previously drawn initial mask.
    """
    if problem.k > problem.n:
        raise ValueError(f"k_z={problem.k} exceeds N={problem.n}")
    m = initial_mask(problem, init, rng) if mask is None else np.asarray(mask, dtype=np.int8).copy()
    hist = np.zeros(HISTORY)
    hist[-1] = problem.score(m, rng)
    return CalibState(m, hist)


def select_outgoing_beam(state: CalibState, init: str, dt_beam_power, rng) -> int:
    """Weakest active beam by mean DT power (``dt_based``) or a uniform active beam."""
    active = np.flatnonzero(state.mask)
    if active.size == 0:
        raise ValueError("no active beams")
    if init == "dt_based":
        p = np.asarray(dt_beam_power)[active]
        return int(active[np.argmin(p)])
    return int(active[rng.integers(active.size)])


def env_step(state: CalibState, incoming: int, outgoing: int, problem: ZoneProblem, rng,
             s_init: float | None = None, noise=None):
    """Swap ``outgoing`` for ``incoming``, re-score, and return ``(next_state, RewardRecord)``."""
    if state.mask[incoming]:
        raise ValueError(f"beam {incoming} is already active")
    if not state.mask[outgoing]:
        raise ValueError(f"beam {outgoing} is not active")
    mask = state.mask.copy()
    mask[outgoing] = 0
    mask[incoming] = 1
    s_next = problem.score(mask, rng, noise)
    hist = np.empty(HISTORY)
    hist[:-1] = state.history[1:]
    hist[-1] = s_next
    s_prev = state.score
    s0 = s_prev if s_init is None else s_init
    return CalibState(mask, hist), RewardRecord(s_prev, s_next, s0, reward_value(s_prev, s_next, s0))


def epsilon(t: int, floor: float = 0.1, decay: float = 0.9995) -> float:
    if t < 0:
        raise ValueError("step index must be >= 0")
    return max(floor, decay**t)


# -- Q network ----------------------------------------------------------------

class QNetwork:
    """Fully connected ReLU network trained with Adam.

    All weights live in one flat float32 buffer so that norm clipping and the
    optimiser step are a handful of vector operations.
    """

    def __init__(self, sizes, rng=None, lr: float = 1e-3, betas=(0.9, 0.999), adam_eps: float = 1e-8,
                 dtype=np.float32):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.dtype = np.dtype(dtype)
        shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        self._shapes = shapes
        total = sum(int(np.prod(s)) for s in shapes)
        self.theta = np.zeros(total, dtype=self.dtype)
        self.params = self._views(self.theta)
        if rng is not None:
            for i in range(0, len(self.params), 2):
                bound = math.sqrt(6.0 / self.params[i].shape[0])  # He-uniform
                self.params[i][...] = rng.uniform(-bound, bound, self.params[i].shape)
        self.lr = lr
        self.betas = betas
        self.adam_eps = adam_eps
        self._m = np.zeros(total, dtype=self.dtype)
        self._v = np.zeros(total, dtype=self.dtype)
        self._tmp = np.zeros(total, dtype=self.dtype)
        self._grad = np.zeros_like(self.theta)
        self._grad_views = self._views(self._grad)
        self.t = 0
        self.last_grad_norm = 0.0
        self.last_applied_norm = 0.0

    def _views(self, flat):
        out, pos = [], 0
        for s in self._shapes:
            size = int(np.prod(s))
            out.append(flat[pos:pos + size].reshape(s))
            pos += size
        return out

    def forward(self, X):
        """Activations of every layer, input first and Q values last."""
        acts = [np.asarray(X, dtype=self.dtype)]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = acts[-1] @ self.params[2 * i]
            z += self.params[2 * i + 1]
            acts.append(np.maximum(z, 0.0, out=z) if i < n_layers - 1 else z)
        return acts

    def predict(self, X) -> np.ndarray:
        return self.forward(X)[-1]

    __call__ = predict

    def gradients(self, X, actions, targets, acts=None):
        """Loss ``mean((Q(s, a) - y)^2)`` and its gradient as a flat array.

        ``acts`` may hold forward activations whose leading rows belong to ``X``.
        """
        B = len(actions)
        acts = self.forward(X) if acts is None else [a[:B] for a in acts]
        out = acts[-1]
        rows = np.arange(B)
        err = out[rows, actions].astype(float) - targets
        loss = float(np.mean(err**2))
        delta = np.zeros_like(out)
        delta[rows, actions] = 2.0 * err / B
        g = self._grad_views
        for i in range(len(self.params) // 2 - 1, -1, -1):
            np.matmul(acts[i].T, delta, out=g[2 * i])
            np.sum(delta, axis=0, out=g[2 * i + 1])
            if i > 0:
                delta = (delta @ self.params[2 * i].T) * (acts[i] > 0)
        return loss, self._grad

    def apply(self, grad, max_norm: float) -> None:
        """Adam step on ``grad`` rescaled to global norm at most ``max_norm``."""
        g = np.asarray(grad, dtype=self.dtype)
        norm = math.sqrt(float(np.square(g, dtype=float).sum()))  # float64 accumulation
        self.last_grad_norm = norm
        if norm > max_norm:
            g = g * self.dtype.type(max_norm / (norm + 1e-6))
            self.last_applied_norm = math.sqrt(float(np.square(g, dtype=float).sum()))
        else:
            self.last_applied_norm = norm
        self.t += 1
        b1, b2 = self.betas
        corr = math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        m, v, tmp = self._m, self._v, self._tmp
        m *= b1
        np.multiply(g, 1 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1 - b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp += self.adam_eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr * corr
        self.theta -= tmp

    def copy_from(self, other: "QNetwork") -> None:
        if other.sizes != self.sizes:
            raise ValueError("topology mismatch")
        self.theta[...] = other.theta

    def clone(self) -> "QNetwork":
        net = QNetwork(self.sizes, None, self.lr, self.betas, self.adam_eps, self.dtype)
        net.copy_from(self)
        return net

    def flat(self) -> np.ndarray:
        return self.theta.copy()


_MAGIC = b"TZQN"


def save_checkpoint(net: QNetwork, path) -> None:
    """``TZQN``, u32 layer count, u32 sizes, then float32 W/b per layer, all little-endian."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(net.sizes)))
        fh.write(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
        fh.write(net.flat().astype("<f4").tobytes())


def load_checkpoint(path) -> QNetwork:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a Q-network checkpoint")
    (count,) = struct.unpack_from("<I", raw, 4)
    sizes = list(struct.unpack_from(f"<{count}I", raw, 8))
    flat = np.frombuffer(raw, dtype="<f4", offset=8 + 4 * count).astype(float)
    net = QNetwork(sizes)
    if flat.size != net.theta.size:
        raise ValueError("checkpoint size does not match its header")
    net.theta[...] = flat
    return net


# -- replay and updates -------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring buffer sampled uniformly with replacement."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done=False) -> None:
        i = self._pos
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng):
        if self.size == 0:
            raise ValueError("replay buffer is empty")
        idx = rng.integers(self.size, size=batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


def _inactive(states, n):
    return states[:, :n] < 0.5


def act(state: CalibState, q_online, eps: float, rng) -> int:
    """Epsilon-greedy choice among inactive beams; active beams are never returned."""
    inactive = np.flatnonzero(state.mask == 0)
    if inactive.size == 0:
        raise ValueError("every beam is already active")
    if rng.random() < eps:
        return int(inactive[rng.integers(inactive.size)])
    q = np.asarray(q_online(state.vector()[None, :]))[0]
    return int(inactive[np.argmax(q[inactive])])


def ddqn_targets(rewards, next_states, dones, q_online, q_target, gamma: float, n: int,
                 q_online_next=None):
    """``r + gamma * Q_target(s', argmax_a Q_online(s', a))`` over inactive beams of ``s'``.

    ``q_online_next`` may carry precomputed online values at ``next_states``.
    """
    rewards = np.asarray(rewards, dtype=float)
    S2 = np.asarray(next_states, dtype=float)
    free = _inactive(S2, n)
    q_next = q_online(S2) if q_online_next is None else q_online_next
    q_on = np.where(free, np.asarray(q_next, dtype=float)[:, :n], -np.inf)
    best = np.argmax(q_on, axis=1)
    q_tg = np.asarray(q_target(S2))[np.arange(len(S2)), best]
    terminal = np.asarray(dones, dtype=bool) | ~free.any(1)
    return rewards + np.where(terminal, 0.0, gamma * q_tg)


def ddqn_update(batch, q_online: QNetwork, q_target, cfg: AgentConfig) -> float:
    """One clipped double-Q regression step; returns the pre-step loss."""
    s, a, r, s2, done = batch
    if len(a) == 0:
        raise ValueError("empty batch")
    B = len(a)
    acts = q_online.forward(np.concatenate([s, s2]))  # one pass serves both s and s'
    y = ddqn_targets(r, s2, done, q_online, q_target, cfg.gamma, q_online.sizes[-1],
                     q_online_next=acts[-1][B:])
    loss, grad = q_online.gradients(s, a, y, acts=acts)
    q_online.apply(grad, cfg.grad_norm_cap)
    return loss


# -- training -----------------------------------------------------------------

@dataclass
class ZoneResult:
    zone_id: int
    beam_set: BeamSet
    init_beam_set: BeamSet
    curve: list[dict]
    final_score: float
    init_score: float
    steps: int
    q_evaluations: int
    network: QNetwork | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {"zone_id": self.zone_id, "beams": self.beam_set.beams,
                "init_beams": self.init_beam_set.beams, "final_score": self.final_score,
                "init_score": self.init_score, "steps": self.steps, "q_evaluations": self.q_evaluations}


def _verify(problem: ZoneProblem, masks, rounds: int, rng):
    """Scores of each mask averaged over common noisy rounds."""
    if problem.noiseless:
        return [problem.score(m) for m in masks]
    noises = [complex_noise(rng, problem._proj.shape) for _ in range(rounds)]
    return [float(np.mean([problem.score(m, noise=z) for z in noises])) for m in masks]


def train_zone_agent(problem: ZoneProblem, cfg: AgentConfig, rng) -> ZoneResult:
    """Train one agent and return the best verified mask as the calibrated beam set."""
    n = problem.n
    init_mask = initial_mask(problem, cfg.init, rng)  # drawn once per agent
    init_set = BeamSet(problem.zone_id, np.flatnonzero(init_mask).tolist(), cfg.init)
    net = QNetwork([n + HISTORY, *cfg.hidden_layers, n], rng, cfg.lr)
    target = net.clone()
    buf = ReplayBuffer(cfg.replay_capacity, n + HISTORY)
    seen: dict[bytes, list] = {}  # mask -> [sum of scores, count, mask]

    def record(mask, s):
        key = mask.tobytes()
        if key in seen:
            seen[key][0] += s
            seen[key][1] += 1
        else:
            seen[key] = [s, 1, mask.copy()]

    curve = []
    t = 0
    s0_train = None
    for ep in range(cfg.episodes):
        state = env_reset(problem, cfg.init, rng, mask=init_mask)
        record(state.mask, state.score)
        if s0_train is None:
            s0_train = state.score
        s_init = state.score if cfg.s0_reference == "episode" else s0_train
        scores, losses = [], []
        for _ in range(cfg.steps_per_episode):
            if problem.k == n:  # nothing to swap in
                scores.append(state.score)
                continue
            eps = epsilon(t, cfg.epsilon_floor, cfg.epsilon_decay)
            b_in = act(state, net, eps, rng)
            b_out = select_outgoing_beam(state, cfg.init, problem.dt_beam_power, rng)
            nxt, rec = env_step(state, b_in, b_out, problem, rng, s_init)
            buf.push(state.vector(), b_in, rec.reward, nxt.vector(), False)
            record(nxt.mask, rec.s_next)
            state = nxt
            scores.append(rec.s_next)
            t += 1
            if len(buf) >= cfg.batch_size and t % cfg.train_every == 0:
                losses.append(ddqn_update(buf.sample(cfg.batch_size, rng), net, target, cfg))
            if t % cfg.target_sync_every == 0:
                target.copy_from(net)
        curve.append({"zone_id": problem.zone_id, "episode": ep,
                      "mean_similarity": float(np.mean(scores)),
                      "epsilon": epsilon(t, cfg.epsilon_floor, cfg.epsilon_decay),
                      "loss": float(np.mean(losses)) if losses else float("nan")})

    ranked = sorted(seen.values(), key=lambda e: -e[0] / e[1])
    cands = [init_mask] + [e[2] for e in ranked[:cfg.verify_candidates] if not np.array_equal(e[2], init_mask)]
    ver = _verify(problem, cands, cfg.verify_rounds, rng)
    best = int(np.argmax(ver))
    if ver[best] < ver[0] + cfg.retention_margin:
        best = 0
    beams = np.flatnonzero(cands[best]).tolist()
    return ZoneResult(problem.zone_id, BeamSet(problem.zone_id, beams, "calibrated"), init_set,
                      curve, float(ver[best]), float(ver[0]), t, t * n, net)


def _train_job(args):
    problem, cfg, seed = args
    return train_zone_agent(problem, cfg, np.random.default_rng(seed))


def train_all_zones(problems, cfg: AgentConfig, seeds, parallelism: int = 1) -> dict:
    """Independent agents per zone; ``seeds`` maps zone_id to a seed or SeedSequence."""
    jobs = [(p, cfg, seeds[p.zone_id]) for p in problems]
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            results = list(ex.map(_train_job, jobs))
    else:
        results = [train_zone_agent(p, cfg, np.random.default_rng(s)) for p, _, s in jobs]
    return {r.zone_id: r for r in results}


def write_curve_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["zone_id", "episode", "mean_similarity", "epsilon", "loss"])
        for res in results:
            for row in res.curve:
                w.writerow([row["zone_id"], row["episode"], repr(row["mean_similarity"]),
                            repr(row["epsilon"]), repr(row["loss"])])


def write_beamsets_json(path, results) -> None:
    Path(path).write_text(json.dumps([r.beam_set.to_dict() for r in results], indent=1))
