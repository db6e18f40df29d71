"""Safety certificates for one agent's candidate actions.

* ``lr``: expected lower-confidence reward of the next state.
* ``return``: probability of landing in the safe-and-returnable set, the
  fixed point grown on a lattice from the initial safe seed.
* ``lc``: lower confidence bound on avoiding every jointly unsafe outcome,
  marginalizing the opponents through their (upper-bound) policy weights.

All integrals are Monte Carlo; one noise draw is shared across the actions
being compared (common random numbers).
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "SafetyConfig",
    "Lattice",
    "SafeReturnSet",
    "ActionAssessment",
    "lr",
    "lr_all",
    "compute_safe_return_set",
    "returnability",
    "returnability_all",
    "lc",
    "lc_from_weights",
    "assess_actions",
]

RETURN_SLACK = 1e-9


@dataclass
class SafetyConfig:
    """Thresholds and Monte-Carlo budget.

    ``h`` individual safety threshold, ``tau`` returnability threshold, ``c``
    joint-safety threshold, ``M`` samples per integral, ``rho`` lattice
    spacing, ``J`` fixed-point iteration cap, ``refresh_every`` steps between
    safe-set recomputations, ``seed_radius`` half-width (in cells) of the
    initial safe seed around an episode's start.
    """

    h: float = -0.5
    tau: float = 1.0
    c: float = 0.7
    M: int = 32
    rho: float = 1.0
    J: int = 50
    refresh_every: int = 1
    seed_radius: int = 1

    def __post_init__(self):
        if self.M < 1 or self.J < 1 or self.refresh_every < 1:
            raise ValueError("M, J and refresh_every must be >= 1")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 0 <= self.tau <= 1 or not 0 <= self.c <= 1:
            raise ValueError("tau and c must lie in [0, 1]")


class Lattice:
    """Uniform cells of spacing ``rho`` over an axis-aligned box."""

    def __init__(self, bounds, rho, boundary="clamp"):
        self.bounds = np.asarray(bounds, dtype=float)
        self.rho = float(rho)
        self.boundary = boundary
        width = self.bounds[:, 1] - self.bounds[:, 0]
        self.shape = tuple(max(1, int(math.ceil(w / rho - 1e-9))) for w in width)
        axes = [self.bounds[k, 0] + (np.arange(n) + 0.5) * rho for k, n in enumerate(self.shape)]
        grid = np.meshgrid(*axes, indexing="ij")
        self.centers = np.stack([g.ravel() for g in grid], axis=1)

    @property
    def n_cells(self):
        return len(self.centers)

    def coords(self, points):
        p = np.asarray(points, dtype=float)
        ij = np.floor((p - self.bounds[:, 0]) / self.rho).astype(int)
        shape = np.array(self.shape)
        if self.boundary == "wrap":
            return np.mod(ij, shape)
        return np.clip(ij, 0, shape - 1)

    def index(self, points):
        """Flat cell index of each point ``(..., dim)``."""
        return np.ravel_multi_index(np.moveaxis(self.coords(points), -1, 0), self.shape)

    def neighborhood(self, point, radius):
        """Flat indices of cells within Chebyshev ``radius`` of ``point``'s cell."""
        c = self.coords(point)
        shape = np.array(self.shape)
        out = []
        for off in itertools.product(range(-radius, radius + 1), repeat=len(self.shape)):
            ij = c + np.array(off)
            if self.boundary == "wrap":
                ij = np.mod(ij, shape)
            elif np.any(ij < 0) or np.any(ij >= shape):
                continue
            out.append(np.ravel_multi_index(tuple(ij), self.shape))
        return np.unique(out)

    @property
    def tiles_bounds(self):
        """Whether the cells exactly tile the box (no partial last cell)."""
        width = self.bounds[:, 1] - self.bounds[:, 0]
        return bool(np.allclose(np.array(self.shape) * self.rho, width, rtol=0, atol=1e-9))

    def shifted(self, shifts):
        """Flat index of every cell moved by integer offsets ``shifts`` ``(..., dim)``.

        Returns ``(n_cells, ...)``; offsets wrap or clip at the edges.
        """
        grid = np.unravel_index(np.arange(self.n_cells), self.shape)
        out = np.zeros((self.n_cells,) + shifts.shape[:-1], dtype=np.intp)
        stride = 1
        for k in reversed(range(len(self.shape))):
            n = self.shape[k]
            ij = grid[k].reshape((-1,) + (1,) * (shifts.ndim - 1)) + shifts[..., k]
            ij = np.mod(ij, n) if self.boundary == "wrap" else np.clip(ij, 0, n - 1)
            out += ij * stride
            stride *= n
        return out

    def mask(self, cells):
        m = np.zeros(self.n_cells, dtype=bool)
        m[np.asarray(cells, dtype=int)] = True
        return m


@dataclass
class SafeReturnSet:
    lattice: Lattice
    member: np.ndarray
    t: int = 0
    iterations: int = 0

    def contains(self, points):
        return self.member[self.lattice.index(points)]


def lr_all(state, gp, env, noise, t=None):
    """Lower-bound expected reward and mean latent std for every action.

    ``noise`` is one ``(M, dim)`` draw reused for all actions.
    """
    A = env.n_actions
    samples = env.propagate(np.asarray(state, dtype=float), np.arange(A)[:, None], noise[None])
    _, std, _, lower = gp.query(samples, t)
    return lower.mean(axis=1), std.mean(axis=1), samples


def lr(state, action_index, gp, env, cfg, t, rng):
    """Monte-Carlo ``E[r_lower(s')]`` for one action."""
    env._check_action(np.asarray(action_index))
    noise = env.draw_noise(rng, (cfg.M,))
    samples = env.propagate(np.asarray(state, dtype=float), int(action_index), noise)
    return float(gp.query(samples, t)[3].mean())


def compute_safe_return_set(gp, env, S0, cfg, t, rng, lattice=None, lower=None):
    """Grow the safe-and-returnable set from the seed ``S0`` to a fixed point.

    A cell joins once some action, taken from its center, lands in the current
    set with probability at least ``tau`` and has lower-bound expected reward
    at least ``h``; the landing cell's center stands in for each sample.

    Parameters
    ----------
    S0 : bool mask over lattice cells, or array of flat cell indices
    lower : optional
        Precomputed lower reward bound at the lattice centers.
    """
    lattice = lattice or Lattice(env.bounds, cfg.rho, env.boundary)
    S0 = np.asarray(S0)
    member = S0.copy() if S0.dtype == bool else lattice.mask(S0)
    if member.shape != (lattice.n_cells,):
        raise ValueError("seed mask does not match the lattice")
    if not member.any():
        raise ValueError("initial safe set is empty")
    if lower is None:
        lower = gp.query(lattice.centers, t)[3]
    noise = env.draw_noise(rng, (cfg.M,))
    A = env.n_actions
    if lattice.tiles_bounds and np.allclose(lattice.bounds, env.bounds):
        # from a cell center, a displacement moves the cell index by the same amount everywhere
        shifts = np.floor(0.5 + (env.actions[:, None, :] + noise[None]) / lattice.rho).astype(np.intp)
        idx = lattice.shifted(shifts)
    else:
        land = env.propagate(lattice.centers[:, None, None, :], np.arange(A)[None, :, None], noise[None, None])
        idx = lattice.index(land)
    ok_lr = lower[idx].mean(axis=2) >= cfg.h
    cand = np.flatnonzero(ok_lr.any(axis=1))
    idx, ok_lr = idx[cand], ok_lr[cand]
    need = cfg.tau - RETURN_SLACK
    iterations = 0
    for _ in range(cfg.J):
        open_ = ~member[cand]
        if not open_.any():
            break
        frac = member[idx[open_]].mean(axis=2)
        joins = np.any(ok_lr[open_] & (frac >= need), axis=1)
        if not joins.any():
            break
        member[cand[open_][joins]] = True
        iterations += 1
    return SafeReturnSet(lattice, member, t if t is not None else gp.t, iterations)


def returnability_all(state, sset, env, noise):
    A = env.n_actions
    samples = env.propagate(np.asarray(state, dtype=float), np.arange(A)[:, None], noise[None])
    return sset.contains(samples).mean(axis=1)


def returnability(state, action_index, sset, env, cfg, rng):
    """Fraction of transition samples landing inside the safe-return set."""
    env._check_action(np.asarray(action_index))
    noise = env.draw_noise(rng, (cfg.M,))
    samples = env.propagate(np.asarray(state, dtype=float), int(action_index), noise)
    return float(sset.contains(samples).mean())


def lc_from_weights(own_state, other_states, weights, env, M, rng, actions=None):
    """Joint-safety lower bound for each own action.

    Parameters
    ----------
    other_states : (K, dim)
        Current states of the K opponents.
    weights : (K, n_actions)
        Per-opponent action weights; upper-bound weights may sum above one,
        and the excess mass scales the unsafe probability accordingly.
    M : int
        Own samples (outer loop) and joint opponent samples (inner loop).
    actions : optional
        Subset of own actions to evaluate (all by default).

    The opponents' samples do not depend on the own outcome, so one inner draw
    serves every outer sample and every action.
    """
    acts = np.arange(env.n_actions) if actions is None else np.atleast_1d(actions)
    others = np.atleast_2d(np.asarray(other_states, dtype=float)).reshape(-1, env.dim)
    # outer draw first, so the own samples do not depend on the opponent count
    own_noise = env.draw_noise(rng, (M,))
    if len(others) == 0:
        return np.ones(len(acts))
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    mass = w.sum(axis=1)
    cdf = np.cumsum(w / mass[:, None], axis=1)
    # stratified uniforms: one draw per 1/M slice, shuffled per opponent
    strata = rng.permuted(np.tile(np.arange(M), (len(others), 1)), axis=1).T
    u = (strata + rng.random((M, len(others)))) / M
    opp_a = np.minimum((u[..., None] >= cdf[None]).sum(axis=-1), env.n_actions - 1)
    opp_next = env.propagate(others[None], opp_a, env.draw_noise(rng, (M, len(others))))
    own_next = env.propagate(np.asarray(own_state, dtype=float), acts[:, None], own_noise[None])
    spec = env.unsafe_joint
    hit = spec.pair_unsafe(own_next[:, :, None, None, :], opp_next[None, None]).any(axis=-1)
    if len(others) > 1:
        hit |= spec.pairs_unsafe(opp_next).any(axis=-1)[None, None, :]
    inner = np.prod(mass) * hit.mean(axis=2)
    return np.clip(1.0 - inner, 0.0, 1.0).mean(axis=1)


def lc(joint, own_index, own_action_index, opponents, env, cfg, rng):
    """Joint-safety lower bound of one own action given opponent models.

    ``opponents`` lists one :class:`~multisafe.opponent.OpponentModel` per
    other agent, in agent order.
    """
    joint = np.asarray(joint, dtype=float)
    others = np.delete(joint, own_index, axis=0)
    if len(opponents) != len(others):
        raise ValueError("need one opponent model per other agent")
    w = [m.action_weights(s)[0] for m, s in zip(opponents, others)]
    w = np.array(w).reshape(len(others), env.n_actions)
    return float(lc_from_weights(joint[own_index], others, w, env, cfg.M, rng,
                                 actions=[own_action_index])[0])


@dataclass
class ActionAssessment:
    """Per-action certificates and the action sets they induce."""

    lr: np.ndarray
    ret: np.ndarray
    lc: np.ndarray
    h: float
    tau: float
    c: float
    sigma: Optional[np.ndarray] = None
    hi_rew: np.ndarray = field(init=False)
    joint_safe: np.ndarray = field(init=False)
    safe: np.ndarray = field(init=False)

    def __post_init__(self):
        self.hi_rew, self.joint_safe, self.safe = self.memberships()

    def memberships(self):
        hi = (self.lr >= self.h) & (self.ret >= self.tau - RETURN_SLACK)
        js = self.lc >= self.c
        return hi, js, hi & js

    def consistent(self):
        return all(np.array_equal(a, b) for a, b in zip(self.memberships(), (self.hi_rew, self.joint_safe, self.safe)))

    @property
    def safe_actions(self):
        return np.flatnonzero(self.safe)


def assess_actions(joint, own_index, gp, sset, opponent_weights, env, cfg, t, rng):
    """Certificates for every action of agent ``own_index``.

    ``opponent_weights`` is a ``(K, n_actions)`` array (or a list of
    opponent models, evaluated at the opponents' current states).
    """
    joint = np.asarray(joint, dtype=float)
    s = joint[own_index]
    noise = env.draw_noise(rng, (cfg.M,))
    lr_v, sigma, samples = lr_all(s, gp, env, noise, t)
    ret = sset.contains(samples).mean(axis=1)
    others = np.delete(joint, own_index, axis=0)
    if len(others) and not isinstance(opponent_weights, np.ndarray):
        opponent_weights = np.array([m.action_weights(o)[0] for m, o in zip(opponent_weights, others)])
    lc_v = lc_from_weights(s, others, opponent_weights, env, cfg.M, rng)
    return ActionAssessment(lr_v, ret, lc_v, cfg.h, cfg.tau, cfg.c, sigma=sigma)
