"""Seeded experiments: episode loop, metrics, and persisted results.

Each seed owns a fresh environment stream and fresh agents; learning persists
across the episodes of a seed.  One CSV is written per (seed, episode), plus a
JSON summary with per-episode means and standard errors across seeds.
"""

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import rng as rngmod
from .agents import AgentConfig, make_agent
from .environment import quadcopter_env, rover_env
from .gp import BetaSchedule, KernelSpec
from .safety import Lattice, SafetyConfig

__all__ = [
    "ExperimentConfig",
    "EpisodeLog",
    "MetricsSummary",
    "rover_config",
    "quadcopter_config",
    "build_env",
    "build_agents",
    "initial_state",
    "run_episode",
    "run_seed",
    "run_experiment",
    "new_states_visited",
    "episode_metrics",
    "METRICS",
]

log = logging.getLogger(__name__)

CAUSES = ("horizon", "individual_unsafe", "joint_unsafe")
METRICS = ("reward", "unsafe_events", "safe_steps", "new_cells")
MAX_INIT_ATTEMPTS = 10_000


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; every field round-trips through text."""

    env: str = "rover"
    agents: str = "multisafe,epsgreedy,epsgreedy,epsgreedy"
    episodes: int = 20
    steps: int = 50
    seeds: list = field(default_factory=lambda: list(range(10)))
    out: Optional[str] = None
    # safety
    h: float = -0.5
    tau: float = 1.0
    c: float = 0.7
    mc_samples: int = 32
    rho: float = 1.0
    fixpoint_cap: int = 50
    refresh_every: int = 1
    seed_radius: int = 1
    # reward model and learning
    beta: float = 2.0
    length_scale: float = 2.0
    signal_std: float = 1.0
    white_noise_std: float = 0.1
    gp_max_points: int = 1000
    gamma: float = 0.9
    learning_rate: float = 1e-3
    sync_period: int = 100
    replay_capacity: int = 10_000
    batch_size: int = 32
    infer_every: int = 10
    traj_window: int = 500
    penalty: float = -10.0
    baseline_eps: float = 0.1
    # environment
    map_size: float = 20.0
    n_actions: int = 4
    step_size: float = 1.0
    noise_var: float = 0.1
    obs_noise_std: float = 0.1
    collision: float = 0.1
    terrain: Optional[str] = None
    terrain_seed: int = 0
    half_width: float = 3.0
    max_distance: float = 3.0
    destination: list = field(default_factory=lambda: [2.0, 2.0, 2.0])
    starts: list = field(default_factory=list)
    terminate_on_violation: bool = False

    def __post_init__(self):
        if self.env not in ("rover", "quadcopter"):
            raise ValueError(f"unknown environment {self.env!r}")
        if self.episodes < 1 or self.steps < 1:
            raise ValueError("episodes and steps must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if len(self.roster) < 1:
            raise ValueError("empty agent roster")
        if self.starts and len(self.starts) != len(self.roster) * self.dim:
            raise ValueError("starts must list one state per agent")

    @property
    def roster(self):
        return [tok.strip() for tok in self.agents.split(",") if tok.strip()]

    @property
    def dim(self):
        return 2 if self.env == "rover" else 3

    def safety(self):
        return SafetyConfig(h=self.h, tau=self.tau, c=self.c, M=self.mc_samples, rho=self.rho,
                            J=self.fixpoint_cap, refresh_every=self.refresh_every, seed_radius=self.seed_radius)

    def agent_config(self):
        return AgentConfig(
            kernel=KernelSpec(self.length_scale, self.signal_std, self.white_noise_std),
            beta=BetaSchedule("constant", self.beta), gamma=self.gamma, lr=self.learning_rate,
            sync_period=self.sync_period, replay_capacity=self.replay_capacity, batch_size=self.batch_size,
            gp_max_points=self.gp_max_points, infer_every=self.infer_every, traj_window=self.traj_window,
            penalty=self.penalty, explore_eps=self.baseline_eps)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values, base=None):
        """Build from strings or JSON values, coercing by field type."""
        known = {f.name: f for f in fields(cls)}
        out = (base or cls()).to_dict()
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            out[key] = _coerce(key, raw, out[key])
        return cls(**out)

    def to_text(self):
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            elif v is None:
                v = ""
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return list(raw) if isinstance(raw, (list, tuple)) else raw
    s = raw.strip()
    try:
        if key in ("seeds",):
            return [int(x) for x in _split(s)]
        if key in ("destination", "starts"):
            return [float(x) for x in _split(s)]
        if key in ("out", "terrain"):
            return s or None
        if isinstance(default, bool):
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
    except ValueError:
        raise ValueError(f"bad value {raw!r} for config key {key!r}") from None
    return s


def _split(s):
    return [x for x in s.replace("[", "").replace("]", "").replace(",", " ").split() if x]


def rover_config(**overrides):
    return ExperimentConfig(**overrides)


def quadcopter_config(**overrides):
    base = dict(env="quadcopter", agents="multisafe,epsgreedy:0.1", episodes=100, steps=100, h=-8.0,
                mc_samples=32, rho=1.0, length_scale=10.0, signal_std=10.0, white_noise_std=10.0,
                gp_max_points=150, n_actions=6, step_size=0.1, starts=[0.5, 0.0, 0.0, -0.5, 0.0, 0.0],
                terminate_on_violation=True)
    base.update(overrides)
    return ExperimentConfig(**base)


def build_env(cfg):
    if cfg.env == "rover":
        return rover_env(size=cfg.map_size, n_actions=cfg.n_actions, step=cfg.step_size, noise_var=cfg.noise_var,
                         collision=cfg.collision, terrain=cfg.terrain, terrain_seed=cfg.terrain_seed,
                         obs_noise_std=cfg.obs_noise_std)
    return quadcopter_env(half_width=cfg.half_width, step=cfg.step_size, noise_var=cfg.noise_var,
                          max_distance=cfg.max_distance, destination=cfg.destination,
                          obs_noise_std=cfg.obs_noise_std)


def build_agents(cfg, env, seed):
    roster = cfg.roster
    safety, acfg = cfg.safety(), cfg.agent_config()
    return [make_agent(tok, i, len(roster), env, safety, acfg, rngmod.stream(seed, rngmod.AGENT, i),
                       eps_rng=rngmod.stream(seed, rngmod.AGENT, i, 1))
            for i, tok in enumerate(roster)]


def initial_state(cfg, env, rng, safety=None):
    """Joint start state that is individually and jointly safe.

    Random starts are resampled until every agent's true reward is at least
    ``h``, no pair is jointly unsafe, and the first agent's seed cells are safe.
    """
    n = len(cfg.roster)
    if cfg.starts:
        joint = np.asarray(cfg.starts, dtype=float).reshape(n, env.dim)
        return env.apply_boundary(joint)
    safety = safety or cfg.safety()
    lattice = Lattice(env.bounds, safety.rho, env.boundary)
    for _ in range(MAX_INIT_ATTEMPTS):
        joint = rng.uniform(env.lo, env.hi, size=(n, env.dim))
        joint = env.apply_boundary(joint)
        if np.any(env.reward(joint) < safety.h) or env.is_jointly_unsafe(joint):
            continue
        seed_centers = lattice.centers[lattice.neighborhood(joint[0], safety.seed_radius)]
        if np.all(env.reward(seed_centers) >= safety.h):
            return joint
    raise RuntimeError(f"no safe initial state found in {MAX_INIT_ATTEMPTS} attempts")


@dataclass
class EpisodeLog:
    """One episode's trajectory; row 0 holds the initial joint state.

    ``certificates`` holds ``(lr, return, lc)`` of the instrumented agent's
    chosen action per step (NaN where not computed).
    """

    seed: int
    episode: int
    positions: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    certificates: np.ndarray
    indiv_unsafe: np.ndarray
    joint_unsafe: np.ndarray
    termination_step: int
    cause: str
    instrumented: int = 0

    def __post_init__(self):
        T = len(self.actions)
        n = self.positions.shape[1]
        if self.positions.shape[0] != T + 1 or self.rewards.shape != (T + 1, n):
            raise ValueError("inconsistent episode log lengths")
        if self.certificates.shape != (T, 3) or self.indiv_unsafe.shape != (T + 1, n):
            raise ValueError("inconsistent episode log lengths")
        if self.cause not in CAUSES:
            raise ValueError(f"unknown termination cause {self.cause!r}")

    @property
    def n_steps(self):
        return len(self.actions)

    @property
    def n_agents(self):
        return self.positions.shape[1]

    @property
    def dim(self):
        return self.positions.shape[2]

    def header(self):
        axes = ["x", "y", "z"][: self.dim]
        return ["t", "agent_id", *axes, "action", "reward_obs", "lr_sel", "return_sel", "lc_sel",
                "indiv_unsafe", "joint_unsafe"]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# seed={self.seed} episode={self.episode} termination_step={self.termination_step} "
                     f"cause={self.cause} instrumented={self.instrumented}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for t in range(self.n_steps + 1):
                for i in range(self.n_agents):
                    act = "" if t == 0 else str(int(self.actions[t - 1, i]))
                    if t and i == self.instrumented:
                        certs = [_fmt(v) for v in self.certificates[t - 1]]
                    else:
                        certs = ["", "", ""]
                    w.writerow([t, i, *(repr(float(v)) for v in self.positions[t, i]), act,
                                repr(float(self.rewards[t, i])), *certs,
                                int(self.indiv_unsafe[t, i]), int(self.joint_unsafe[t, i])])

    @classmethod
    def read_csv(cls, path):
        with open(path, encoding="utf-8") as fh:
            meta = dict(kv.split("=", 1) for kv in fh.readline().lstrip("#").split())
            rows = list(csv.DictReader(fh))
        n = max(int(r["agent_id"]) for r in rows) + 1
        T = max(int(r["t"]) for r in rows)
        axes = [a for a in ("x", "y", "z") if a in rows[0]]
        pos = np.zeros((T + 1, n, len(axes)))
        rew = np.zeros((T + 1, n))
        acts = np.zeros((T, n), dtype=int)
        certs = np.full((T, 3), np.nan)
        ind = np.zeros((T + 1, n), dtype=bool)
        jnt = np.zeros((T + 1, n), dtype=bool)
        inst = int(meta.get("instrumented", 0))
        for r in rows:
            t, i = int(r["t"]), int(r["agent_id"])
            pos[t, i] = [float(r[a]) for a in axes]
            rew[t, i] = float(r["reward_obs"])
            ind[t, i], jnt[t, i] = r["indiv_unsafe"] == "1", r["joint_unsafe"] == "1"
            if t:
                acts[t - 1, i] = int(r["action"])
                if i == inst:
                    certs[t - 1] = [float(r[k]) if r[k] else np.nan for k in ("lr_sel", "return_sel", "lc_sel")]
        return cls(int(meta["seed"]), int(meta["episode"]), pos, acts, rew, certs, ind, jnt,
                   int(meta["termination_step"]), meta["cause"], inst)

    def equals(self, other):
        arrays = ("positions", "actions", "rewards", "indiv_unsafe", "joint_unsafe")
        scalars = ("seed", "episode", "termination_step", "cause", "instrumented")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and np.array_equal(self.certificates, other.certificates, equal_nan=True)
                and all(getattr(self, s) == getattr(other, s) for s in scalars))


def _fmt(v):
    return "" if math.isnan(v) else repr(float(v))


def run_episode(cfg, agents, env, episode_index, rng, seed=0, t0=1, safety=None):
    """Play one episode; all agents act on the same joint state, then learn.

    ``t0`` is the seed-wide step counter at the first step.
    """
    safety = safety or cfg.safety()
    n = len(agents)
    joint = initial_state(cfg, env, rng, safety)
    obs0 = env.reward(joint) + env.obs_noise_std * rng.standard_normal(n)
    for ag in agents:
        ag.begin_episode(joint, obs0, episode_index)
    positions, rewards = [joint], [obs0]
    actions, certs = [], []
    ind_rows, jnt_rows = [np.zeros(n, dtype=bool)], [np.zeros(n, dtype=bool)]
    cause, term = "horizon", cfg.steps
    for k in range(cfg.steps):
        t = t0 + k
        acts = [ag.act(joint, t, rngmod.stream(seed, rngmod.STEP, i, episode_index, k))
                for i, ag in enumerate(agents)]
        nxt, obs = env.step(joint, acts, rng)
        indiv = env.reward(nxt) < safety.h
        jflags = np.array([env.agent_jointly_unsafe(nxt, i) for i in range(n)])
        violated = bool(indiv.any() or jflags.any())
        done = cfg.terminate_on_violation and violated
        for i, ag in enumerate(agents):
            ag.learn(joint, acts, nxt, obs, t, (bool(indiv[i]), bool(jflags[i])), done)
        positions.append(nxt)
        rewards.append(obs)
        actions.append(acts)
        certs.append(agents[0].last_certificates)
        ind_rows.append(indiv)
        jnt_rows.append(jflags)
        joint = nxt
        if done:
            cause = "joint_unsafe" if jflags.any() else "individual_unsafe"
            term = k
            break
    return EpisodeLog(seed, episode_index, np.array(positions), np.array(actions, dtype=int).reshape(-1, n),
                      np.array(rewards), np.array(certs, dtype=float).reshape(-1, 3), np.array(ind_rows),
                      np.array(jnt_rows), term, cause)


def new_states_visited(log, rho, visited=None, agent=0, lattice=None, bounds=None, boundary="clamp"):
    """Lattice cells first visited by ``agent`` during ``log``.

    ``visited`` is the seed-wide set of cells seen so far; it is updated in
    place.  Without ``lattice`` or ``bounds``, cells are unbounded integer
    boxes of side ``rho``.
    """
    visited = set() if visited is None else visited
    pts = log.positions[:, agent]
    if lattice is None and bounds is not None:
        lattice = Lattice(bounds, rho, boundary)
    if lattice is not None:
        cells = [int(c) for c in lattice.index(pts)]
    else:
        cells = [tuple(c) for c in np.floor(pts / rho).astype(int).tolist()]
    before = len(visited)
    visited.update(cells)
    return len(visited) - before


def safe_steps(log, agent):
    """Steps completed before the agent's first violation (the full length if none)."""
    hit = log.indiv_unsafe[1:, agent] | log.joint_unsafe[1:, agent]
    idx = np.flatnonzero(hit)
    return int(idx[0]) if len(idx) else log.n_steps


def episode_metrics(log, visited, lattice):
    """Per-agent ``(reward, unsafe_events, safe_steps, new_cells)``."""
    n = log.n_agents
    out = np.zeros((len(METRICS), n))
    for i in range(n):
        out[0, i] = float(np.sum(log.rewards[1:, i]))
        out[1, i] = float(np.sum(log.indiv_unsafe[1:, i] | log.joint_unsafe[1:, i]))
        out[2, i] = safe_steps(log, i)
        out[3, i] = new_states_visited(log, lattice.rho, visited[i], agent=i, lattice=lattice)
    return out


def run_seed(cfg, seed, out_dir=None):
    """All episodes of one seed; returns ``(logs, metrics[episode, metric, agent])``."""
    env = build_env(cfg)
    safety = cfg.safety()
    agents = build_agents(cfg, env, seed)
    env_rng = rngmod.stream(seed, rngmod.ENV)
    lattice = Lattice(env.bounds, safety.rho, env.boundary)
    visited = [set() for _ in agents]
    logs, metrics = [], []
    t = 1
    for e in range(cfg.episodes):
        ep = run_episode(cfg, agents, env, e, env_rng, seed=seed, t0=t, safety=safety)
        t += ep.n_steps
        if out_dir:
            ep.write_csv(os.path.join(out_dir, f"seed{seed}_ep{e:03d}.csv"))
        metrics.append(episode_metrics(ep, visited, lattice))
        logs.append(ep)
        log.info("seed %d episode %d: %d steps, %s", seed, e, ep.n_steps, ep.cause)
    return logs, np.array(metrics), [ag.label for ag in agents]


@dataclass
class MetricsSummary:
    """Per-seed metric arrays of shape ``(seeds, episodes, agents)``."""

    config: dict
    seeds: list
    labels: list
    per_seed: dict

    def mean(self, metric):
        return self.per_seed[metric].mean(axis=0)

    def se(self, metric):
        x = self.per_seed[metric]
        if x.shape[0] < 2:
            return np.zeros(x.shape[1:])
        return x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])

    def to_json(self):
        out = {"config": self.config, "seeds": list(self.seeds), "agents": list(self.labels), "metrics": {}}
        for m in METRICS:
            out["metrics"][m] = {
                "per_seed": self.per_seed[m].tolist(),
                "mean": self.mean(m).tolist(),
                "se": self.se(m).tolist(),
            }
        ss = self.per_seed["safe_steps"]
        out["safe_step_distribution"] = {
            "per_seed_mean": ss.mean(axis=1).tolist(),
            "quantiles": {str(q): np.quantile(ss, q, axis=(0, 1)).tolist() for q in (0.1, 0.25, 0.5, 0.75, 0.9)},
        }
        return out

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        per_seed = {m: np.array(v["per_seed"], dtype=float) for m, v in d["metrics"].items()}
        return cls(d["config"], d["seeds"], d["agents"], per_seed)


def run_experiment(cfg):
    """Every seed in ``cfg.seeds``; writes CSVs and ``summary.json`` when ``cfg.out`` is set."""
    out = cfg.out
    if out:
        try:
            os.makedirs(out, exist_ok=True)
            with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
                fh.write(cfg.to_text())
        except OSError as exc:
            raise OSError(f"output directory {out!r} is not writable: {exc}") from exc
    per_seed, labels = [], None
    for seed in cfg.seeds:
        _, m, labels = run_seed(cfg, seed, out)
        per_seed.append(m)
    arr = np.array(per_seed)
    summary = MetricsSummary(cfg.to_dict(), list(cfg.seeds), labels,
                             {name: arr[:, :, k, :] for k, name in enumerate(METRICS)})
    if out:
        summary.write(os.path.join(out, "summary.json"))
    return summary
