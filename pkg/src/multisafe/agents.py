"""Decentralized agents behind a common ``begin_episode`` / ``act`` / ``learn``
interface.

``MultiSafeQAgent`` filters actions by individual safety (``lr`` and return
probability) and joint safety (``lc`` under learned opponent models), then
picks by its objective.  The baselines reuse the same GP, Q and safety
machinery with parts removed or replaced.

Each agent owns all of its state.  ``act`` draws randomness only from the
per-step generator it is handed; ``learn`` draws minibatches from the agent's
own persistent stream.
"""

import math

import numpy as np

from .gp import BetaSchedule, GPosterior, KernelSpec, PinnedQuery
from .opponent import OpponentModel, TrajectoryLog, infer_params, mixture_weights
from .qnet import QLearner, QTriple
from .safety import (
    ActionAssessment,
    Lattice,
    SafetyConfig,
    assess_actions,
    compute_safe_return_set,
    lc_from_weights,
    lr_all,
)

__all__ = [
    "AgentConfig",
    "ReplayBuffer",
    "Agent",
    "MultiSafeQAgent",
    "SingleSafeMDPAgent",
    "NaiveQAgent",
    "BayesianQAgent",
    "SafeQAgent",
    "EpsGreedyQAgent",
    "select_action",
    "make_agent",
    "act",
    "learn",
    "baseline_act",
    "AGENT_KINDS",
]

LC_TIE = 1e-12


class AgentConfig:
    """Learning hyperparameters shared by every agent kind."""

    def __init__(self, kernel=None, beta=None, gamma=0.9, lr=1e-3, sync_period=100,
                 replay_capacity=10_000, batch_size=32, gp_max_points=1000,
                 infer_every=10, traj_window=500, penalty=-10.0, explore_eps=0.1):
        self.kernel = kernel if kernel is not None else KernelSpec()
        self.beta = beta if beta is not None else BetaSchedule()
        self.gamma = gamma
        self.lr = lr
        self.sync_period = sync_period
        self.replay_capacity = replay_capacity
        self.batch_size = batch_size
        self.gp_max_points = gp_max_points
        self.infer_every = infer_every
        self.traj_window = traj_window
        self.penalty = penalty
        self.explore_eps = explore_eps
        if infer_every < 1 or batch_size < 1 or replay_capacity < batch_size:
            raise ValueError("infer_every and batch_size must be >= 1 and capacity >= batch_size")
        if not 0 <= explore_eps <= 1:
            raise ValueError("explore_eps must lie in [0, 1]")


class ReplayBuffer:
    """Ring buffer of ``(s, a, r, s', done)`` transitions."""

    def __init__(self, capacity, state_dim):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity, dtype=int)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done=False):
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng, n):
        idx = rng.integers(0, self.size, size=min(n, self.size))
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


def select_action(assessment, objective):
    """Best objective over the safe actions, or a fallback when there are none.

    The fallback keeps the actions of maximal ``lc``, prefers among them those
    with ``lr >= h``, then ranks by the objective; remaining ties go to the
    lowest index.  Returns ``(action, fallback_used)``.
    """
    fallback = not assessment.safe.any()
    if fallback:
        cand = assessment.lc >= assessment.lc.max() - LC_TIE
        ok = cand & (assessment.lr >= assessment.h)
        if ok.any():
            cand = ok
    else:
        cand = assessment.safe
    scores = np.where(cand, np.asarray(objective, dtype=float), -np.inf)
    best = np.flatnonzero(scores >= scores.max())
    return int(best[0]), fallback


def _wrapped_distance(env, a, b):
    d = np.abs(np.asarray(a, dtype=float) - b)
    if env.boundary == "wrap":
        d = np.minimum(d, env.width - d)
    return np.sqrt(np.sum(d ** 2, axis=-1))


class Agent:
    """Common bookkeeping: identity, environment, per-step certificates."""

    kind = "agent"

    def __init__(self, agent_id, n_agents, env, safety, config, rng):
        if not 0 <= agent_id < n_agents:
            raise ValueError("agent_id out of range")
        self.id = agent_id
        self.n_agents = n_agents
        self.env = env
        self.safety = safety if safety is not None else SafetyConfig()
        self.config = config if config is not None else AgentConfig()
        self.rng = rng
        self.last_certificates = (math.nan, math.nan, math.nan)
        self.episode = 0

    @property
    def label(self):
        return self.kind

    def begin_episode(self, joint, reward_obs, episode):
        self.episode = episode

    def act(self, joint, t, rng):
        raise NotImplementedError

    def learn(self, joint_before, actions, joint_after, reward_obs, t, events=(False, False), done=False):
        pass

    def _others(self, joint):
        return np.delete(np.asarray(joint, dtype=float), self.id, axis=0)

    def _norm(self):
        return 0.5 * (self.env.lo + self.env.hi), 0.5 * self.env.width


class _GPMixin:
    def _init_gp(self):
        cfg = self.config
        self.gp = GPosterior(cfg.kernel, self.env.dim, cfg.beta, max_points=cfg.gp_max_points)
        self.lattice = Lattice(self.env.bounds, self.safety.rho, self.env.boundary)
        self.pinned = PinnedQuery(self.lattice.centers)
        self.seed_cells = None
        self.sset = None
        self._since_refresh = 0

    def _begin_gp(self, joint, reward_obs):
        s = np.asarray(joint, dtype=float)[self.id]
        self.gp.update(s, reward_obs[self.id])
        start = self.lattice.mask(self.lattice.neighborhood(s, self.safety.seed_radius))
        self.seed_cells = start if self.seed_cells is None else self.seed_cells | start
        self.sset = None

    def _refresh_safe_set(self, rng):
        # the seed accumulates every cell certified so far in this run
        if self.sset is None or self._since_refresh >= self.safety.refresh_every:
            lower = self.pinned.query(self.gp)[3]
            self.sset = compute_safe_return_set(self.gp, self.env, self.seed_cells, self.safety, None, rng,
                                                self.lattice, lower)
            self.seed_cells = self.sset.member.copy()
            self._since_refresh = 0
        self._since_refresh += 1
        return self.sset


class MultiSafeQAgent(Agent, _GPMixin):
    """GP reward model, Q triple, opponent models and both safety filters.

    ``objective`` is ``'exploit'`` (mean Q) or ``'explore'`` (mean GP std at
    the sampled next states).
    """

    kind = "multisafe"

    def __init__(self, agent_id, n_agents, env, safety=None, config=None, rng=None, objective="exploit"):
        super().__init__(agent_id, n_agents, env, safety, config, rng)
        if objective not in ("exploit", "explore"):
            raise ValueError(f"unknown objective {objective!r}")
        self.objective = objective
        cfg = self.config
        self._init_gp()
        shift, scale = self._norm()
        self.q = QTriple(env.dim, env.n_actions, rng, gamma=cfg.gamma, lr=cfg.lr,
                         sync_period=cfg.sync_period, shift=shift, scale=scale)
        self.replay = ReplayBuffer(cfg.replay_capacity, env.dim)
        self.opponents = {j: OpponentModel(self.q, schedule=cfg.beta)
                          for j in range(n_agents) if j != agent_id}
        self.trajectories = {j: TrajectoryLog(cfg.traj_window) for j in self.opponents}
        self.steps = 0
        self.last_assessment = None
        self.fallbacks = 0

    @property
    def label(self):
        return f"multisafe:{self.objective}"

    def begin_episode(self, joint, reward_obs, episode):
        super().begin_episode(joint, reward_obs, episode)
        self._begin_gp(joint, reward_obs)

    def opponent_weights(self, joint):
        others = self._others(joint)
        if len(others) == 0:
            return np.zeros((0, self.env.n_actions))
        mu, up, lo = self.q.evaluate(others)
        ids = [j for j in range(self.n_agents) if j != self.id]
        return np.array([mixture_weights(mu[k], up[k], lo[k], self.opponents[j].params, upper=True)
                         for k, j in enumerate(ids)])

    def assess(self, joint, rng):
        sset = self._refresh_safe_set(rng)
        return assess_actions(joint, self.id, self.gp, sset, self.opponent_weights(joint),
                              self.env, self.safety, None, rng)

    def act(self, joint, t, rng):
        a_s = self.assess(joint, rng)
        if self.objective == "exploit":
            obj = self.q.evaluate(np.asarray(joint, dtype=float)[self.id][None, :])[0][0]
        else:
            obj = a_s.sigma
        a, fell_back = select_action(a_s, obj)
        self.fallbacks += fell_back
        self.last_assessment = a_s
        self.last_certificates = (float(a_s.lr[a]), float(a_s.ret[a]), float(a_s.lc[a]))
        return a

    def learn(self, joint_before, actions, joint_after, reward_obs, t, events=(False, False), done=False):
        cfg = self.config
        s = np.asarray(joint_before, dtype=float)[self.id]
        s2 = np.asarray(joint_after, dtype=float)[self.id]
        self.gp.update(s2, reward_obs[self.id])
        self.replay.add(s, actions[self.id], 0.0, s2)
        bs, ba, _, bs2, _ = self.replay.sample(self.rng, cfg.batch_size)
        self.q.td_update(bs, ba, bs2, self.gp)
        for j, traj in self.trajectories.items():
            traj.append(joint_before[j], actions[j], joint_after[j], t)
        self.steps += 1
        if self.steps % cfg.infer_every == 0:
            for j, model in self.opponents.items():
                model.params = infer_params(self.trajectories[j], self.q)


class SingleSafeMDPAgent(Agent, _GPMixin):
    """Individual safety only: ``lr`` and return filters, no opponent term.

    Explores toward the most uncertain cell of the safe-and-returnable set.
    """

    kind = "singlesafe"

    def __init__(self, agent_id, n_agents, env, safety=None, config=None, rng=None):
        super().__init__(agent_id, n_agents, env, safety, config, rng)
        self._init_gp()

    def begin_episode(self, joint, reward_obs, episode):
        super().begin_episode(joint, reward_obs, episode)
        self._begin_gp(joint, reward_obs)

    def act(self, joint, t, rng):
        s = np.asarray(joint, dtype=float)[self.id]
        sset = self._refresh_safe_set(rng)
        cfg = self.safety
        noise = self.env.draw_noise(rng, (cfg.M,))
        lr_v, _, samples = lr_all(s, self.gp, self.env, noise)
        ret = sset.contains(samples).mean(axis=1)
        a_s = ActionAssessment(lr_v, ret, np.ones_like(lr_v), cfg.h, cfg.tau, cfg.c)
        ok = np.flatnonzero(a_s.hi_rew)
        if len(ok) == 0:
            a = int(np.argmax(lr_v))
        else:
            std = self.pinned.predict(self.gp)[1]
            members = np.flatnonzero(sset.member)
            target = self.lattice.centers[members[np.argmax(std[members])]]
            nxt = self.env.nominal_next(s, ok)
            a = int(ok[np.argmin(_wrapped_distance(self.env, nxt, target))])
        self.last_certificates = (float(lr_v[a]), float(ret[a]), math.nan)
        return a

    def learn(self, joint_before, actions, joint_after, reward_obs, t, events=(False, False), done=False):
        self.gp.update(np.asarray(joint_after, dtype=float)[self.id], reward_obs[self.id])


class _QBaseline(Agent):
    """Single-head deep Q learner, epsilon-greedy over a candidate set."""

    penalize_individual = False
    penalize_joint = False

    def __init__(self, agent_id, n_agents, env, safety=None, config=None, rng=None, eps=None):
        super().__init__(agent_id, n_agents, env, safety, config, rng)
        cfg = self.config
        self.eps = cfg.explore_eps if eps is None else float(eps)
        if not 0 <= self.eps <= 1:
            raise ValueError("eps must lie in [0, 1]")
        shift, scale = self._norm()
        n_in = self.input_dim
        reps = n_in // env.dim
        self.q = QLearner(n_in, env.n_actions, rng, gamma=cfg.gamma, lr=cfg.lr, sync_period=cfg.sync_period,
                          shift=np.tile(shift, reps), scale=np.tile(scale, reps))
        self.replay = ReplayBuffer(cfg.replay_capacity, n_in)

    @property
    def input_dim(self):
        return self.env.dim

    def features(self, joint):
        return np.asarray(joint, dtype=float)[self.id]

    def candidates(self, joint, rng):
        return np.arange(self.env.n_actions)

    def act(self, joint, t, rng):
        cand = self.candidates(joint, rng)
        u = rng.random()
        pick = rng.integers(len(cand))
        if u < self.eps:
            return int(cand[pick])
        q = self.q.values(self.features(joint)[None, :])[0]
        return int(cand[np.argmax(q[cand])])

    def learning_reward(self, reward, events):
        indiv, joint = events
        r = float(reward)
        if (self.penalize_individual and indiv) or (self.penalize_joint and joint):
            r += self.config.penalty
        return r

    def learn(self, joint_before, actions, joint_after, reward_obs, t, events=(False, False), done=False):
        r = self.learning_reward(reward_obs[self.id], events)
        self.replay.add(self.features(joint_before), actions[self.id], r, self.features(joint_after), done)
        s, a, rr, s2, d = self.replay.sample(self.rng, self.config.batch_size)
        self.q.learn(s, a, rr, s2, d)


class EpsGreedyQAgent(_QBaseline):
    kind = "epsgreedy"

    @property
    def label(self):
        return f"epsgreedy:{self.eps:g}"


class _JointFiltered(_QBaseline):
    """Restricts epsilon-greedy choice to actions with ``lc >= c``."""

    def opponent_weights(self, joint):
        raise NotImplementedError

    def candidates(self, joint, rng):
        others = self._others(joint)
        s = np.asarray(joint, dtype=float)[self.id]
        lc = lc_from_weights(s, others, self.opponent_weights(joint), self.env, self.safety.M, rng)
        ok = np.flatnonzero(lc >= self.safety.c)
        if len(ok) == 0:
            ok = np.flatnonzero(lc >= lc.max() - LC_TIE)
        self._lc = lc
        return ok

    def act(self, joint, t, rng):
        a = super().act(joint, t, rng)
        self.last_certificates = (math.nan, math.nan, float(self._lc[a]))
        return a


class NaiveQAgent(_JointFiltered):
    """Joint-safety filter assuming uniformly random opponents."""

    kind = "naive"

    def opponent_weights(self, joint):
        A = self.env.n_actions
        return np.full((self.n_agents - 1, A), 1.0 / A)


class BayesianQAgent(_JointFiltered):
    """Dirichlet belief over each opponent's action per lattice cell."""

    kind = "bayesian"
    penalize_individual = True
    penalize_joint = True

    def __init__(self, agent_id, n_agents, env, safety=None, config=None, rng=None, eps=None):
        super().__init__(agent_id, n_agents, env, safety, config, rng, eps)
        self.lattice = Lattice(env.bounds, self.safety.rho, env.boundary)
        self.counts = np.ones((n_agents - 1, self.lattice.n_cells, env.n_actions))

    def belief(self, joint):
        cells = self.lattice.index(self._others(joint))
        c = self.counts[np.arange(len(cells)), cells]
        return c / c.sum(axis=1, keepdims=True)

    def opponent_weights(self, joint):
        return self.belief(joint)

    def learn(self, joint_before, actions, joint_after, reward_obs, t, events=(False, False), done=False):
        cells = self.lattice.index(self._others(joint_before))
        acts = np.delete(np.asarray(actions), self.id)
        self.counts[np.arange(len(cells)), cells, acts] += 1
        super().learn(joint_before, actions, joint_after, reward_obs, t, events, done)


class SafeQAgent(_QBaseline):
    """Deep Q over the joint state with penalties for both unsafeties."""

    kind = "safeq"
    penalize_individual = True
    penalize_joint = True

    @property
    def input_dim(self):
        return self.env.dim * self.n_agents

    def features(self, joint):
        joint = np.asarray(joint, dtype=float)
        order = [self.id] + [j for j in range(len(joint)) if j != self.id]
        return joint[order].ravel()


AGENT_KINDS = {
    "multisafe": MultiSafeQAgent,
    "singlesafe": SingleSafeMDPAgent,
    "naive": NaiveQAgent,
    "bayesian": BayesianQAgent,
    "safeq": SafeQAgent,
    "epsgreedy": EpsGreedyQAgent,
}


def make_agent(token, agent_id, n_agents, env, safety, config, rng, eps_rng=None):
    """Build an agent from a roster token such as ``multisafe:explore`` or ``epsgreedy:0.1``.

    A bare ``epsgreedy`` draws its epsilon uniformly from [0.05, 0.5] with ``eps_rng``.
    """
    kind, _, arg = token.strip().partition(":")
    if kind not in AGENT_KINDS:
        raise ValueError(f"unknown agent kind {kind!r}")
    cls = AGENT_KINDS[kind]
    if kind == "multisafe":
        return cls(agent_id, n_agents, env, safety, config, rng, objective=arg or "exploit")
    if arg and kind != "epsgreedy":
        raise ValueError(f"agent kind {kind!r} takes no argument")
    if kind == "epsgreedy":
        if arg:
            try:
                eps = float(arg)
            except ValueError:
                raise ValueError(f"bad epsilon in {token!r}") from None
        else:
            eps = float((eps_rng or rng).uniform(0.05, 0.5))
        return cls(agent_id, n_agents, env, safety, config, rng, eps=eps)
    return cls(agent_id, n_agents, env, safety, config, rng)


def act(agent, joint, t, rng):
    return agent.act(joint, t, rng)


def baseline_act(agent, joint, t, rng):
    if isinstance(agent, MultiSafeQAgent):
        raise TypeError("baseline_act expects a baseline agent")
    return agent.act(joint, t, rng)


def learn(agent, joint_before, actions, joint_after, reward_obs, t, events=(False, False), done=False):
    agent.learn(joint_before, actions, joint_after, reward_obs, t, events, done)
    return agent
