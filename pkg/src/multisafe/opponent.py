"""Opponent policies as an epsilon-mixture of OFU and Boltzmann softmaxes.

Every other agent is assumed to act on the same action values as the
modelling agent (the reward is shared): with probability ``eps`` it samples a
softmax of the upper Q bound at temperature ``T_o``, otherwise a softmax of
the mean Q at temperature ``T_b``.  The parameters are fitted by maximum
likelihood over the observed actions.
"""

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "PolicyParams",
    "TrajectoryLog",
    "OpponentModel",
    "ofu_from_values",
    "boltzmann_from_values",
    "ofu_probs",
    "boltzmann_probs",
    "mixture_weights",
    "g",
    "log_likelihood",
    "infer_params",
    "EPS_GRID",
    "T_GRID",
]

EPS_GRID = np.round(np.linspace(0.0, 1.0, 11), 10)
T_GRID = np.array([0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0])
LOG_T_BOUNDS = (math.log(1e-3), math.log(1e4))


@dataclass(frozen=True)
class PolicyParams:
    eps: float = 0.5
    T_o: float = 1.0
    T_b: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if not (self.T_o > 0 and self.T_b > 0 and math.isfinite(self.T_o) and math.isfinite(self.T_b)):
            raise ValueError("temperatures must be positive and finite")


class TrajectoryLog:
    """Most recent ``maxlen`` observed transitions of one opponent."""

    def __init__(self, maxlen=500):
        self._items = deque(maxlen=maxlen)

    def append(self, state, action, next_state, time):
        if self._items and time <= self._items[-1][3]:
            raise ValueError("trajectory times must be strictly increasing")
        self._items.append((np.asarray(state, dtype=float), int(action),
                            np.asarray(next_state, dtype=float), time))

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    @property
    def states(self):
        return np.array([it[0] for it in self._items])

    @property
    def actions(self):
        return np.array([it[1] for it in self._items], dtype=int)

    @property
    def next_states(self):
        return np.array([it[2] for it in self._items])


def _softmax(values, T):
    z = np.asarray(values, dtype=float) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _upper_softmax(own, others, T):
    """``exp(own_a/T) / (exp(own_a/T) + sum_{a' != a} exp(others_a'/T))``.

    Written as ``1 / (1 + sum_{a' != a} exp((others_a' - own_a) / T))`` and
    evaluated in log space so extreme temperatures neither overflow nor
    produce 0/0.
    """
    own = np.asarray(own, dtype=float)
    others = np.asarray(others, dtype=float)
    A = own.shape[-1]
    if A == 1:
        return np.ones_like(own)
    D = (others[..., None, :] - own[..., :, None]) / T
    off = ~np.eye(A, dtype=bool)
    lse = logsumexp(np.where(off, D, -np.inf), axis=-1)
    return np.exp(-np.logaddexp(0.0, lse))


def ofu_from_values(q_upper, q_mean, T_o):
    """OFU policy and its upper bound from action values ``(..., A)``."""
    if not T_o > 0:
        raise ValueError("T_o must be positive")
    return _softmax(q_upper, T_o), _upper_softmax(q_upper, q_mean, T_o)


def boltzmann_from_values(q_mean, q_lower, T_b):
    """Boltzmann policy and its upper bound from action values ``(..., A)``."""
    if not T_b > 0:
        raise ValueError("T_b must be positive")
    return _softmax(q_mean, T_b), _upper_softmax(q_mean, q_lower, T_b)


def ofu_probs(q, state, T_o):
    mu, up, _ = q.evaluate(np.asarray(state, dtype=float)[None, :])
    pi, pu = ofu_from_values(up[0], mu[0], T_o)
    return pi, pu


def boltzmann_probs(q, state, T_b):
    mu, _, lo = q.evaluate(np.asarray(state, dtype=float)[None, :])
    pi, pu = boltzmann_from_values(mu[0], lo[0], T_b)
    return pi, pu


def mixture_weights(q_mean, q_upper, q_lower, params, upper=False):
    """Per-action weights ``eps * pi_o + (1 - eps) * pi_b``.

    With ``upper=True`` both components are replaced by their upper bounds,
    so the weights dominate the true probabilities but no longer sum to one.
    """
    pi_o, pu_o = ofu_from_values(q_upper, q_mean, params.T_o)
    pi_b, pu_b = boltzmann_from_values(q_mean, q_lower, params.T_b)
    if upper:
        return params.eps * pu_o + (1 - params.eps) * pu_b
    return params.eps * pi_o + (1 - params.eps) * pi_b


class OpponentModel:
    """Fitted policy parameters of one opponent over a shared Q triple.

    ``schedule`` is the beta schedule that shaped the upper and lower heads of
    the shared triple; it is kept so a model fully describes the transition
    function it induces.
    """

    def __init__(self, q, params=None, schedule=None, upper=True):
        self.q = q
        self.params = params if params is not None else PolicyParams()
        self.schedule = schedule
        self.upper = upper

    def action_weights(self, states, upper=None):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        mu, up, lo = self.q.evaluate(states)
        return mixture_weights(mu, up, lo, self.params, self.upper if upper is None else upper)

    def g(self, s, s_next, env, upper=None):
        return g(self, s, s_next, env, upper)


def g(model, s, s_next, env, upper=None):
    """Density of an opponent moving from ``s`` to ``s_next`` under the model.

    ``sum_a w(a) f(s_next | s, a)``; ``s_next`` may carry leading batch axes.
    """
    w = model.action_weights(np.asarray(s, dtype=float)[None, :], upper)[0]
    s_next = np.asarray(s_next, dtype=float)
    total = np.zeros(s_next.shape[:-1])
    for a in range(env.n_actions):
        total = total + w[a] * env.transition_density(s_next, s, a)
    return total


def _action_logp(values, actions, T):
    z = values / T
    m = z.max(axis=-1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=-1))
    return z[np.arange(len(actions)), actions] - lse


def _mixture_ll(lo, lb, eps):
    with np.errstate(divide="ignore"):
        le, l1 = np.log(eps), np.log1p(-eps)
    return float(np.sum(np.logaddexp(le + lo, l1 + lb)))


def log_likelihood(traj, params, q):
    """Log-probability of the opponent's observed actions under ``params``."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    a = traj.actions
    mu, up, _ = q.evaluate(traj.states)
    return _mixture_ll(_action_logp(up, a, params.T_o), _action_logp(mu, a, params.T_b), params.eps)


def _golden(f, lo, hi, tol=1e-4):
    """Maximize a scalar function on ``[lo, hi]``; returns ``(x, f(x))``."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def infer_params(traj, q, sweeps=20, eps_grid=EPS_GRID, t_grid=T_GRID):
    """Maximum-likelihood ``(eps, T_o, T_b)``.

    Exhaustive search over ``eps_grid x t_grid x t_grid``, then coordinate
    ascent with golden-section line searches in ``(eps, log T_o, log T_b)``,
    each within one grid step of the incumbent.  Stops early once a sweep
    gains less than 1e-9 nats.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    a = traj.actions
    mu, up, _ = q.evaluate(traj.states)
    LO = np.stack([_action_logp(up, a, T) for T in t_grid])
    LB = np.stack([_action_logp(mu, a, T) for T in t_grid])
    best = (-np.inf, None)
    for e in eps_grid:
        with np.errstate(divide="ignore"):
            le, l1 = np.log(e), np.log1p(-e)
        ll = np.logaddexp(le + LO[:, None, :], l1 + LB[None, :, :]).sum(axis=-1)
        i, j = np.unravel_index(np.argmax(ll), ll.shape)
        if ll[i, j] > best[0]:
            best = (float(ll[i, j]), (float(e), math.log(t_grid[i]), math.log(t_grid[j])))
    score, x = best
    x = list(x)
    cache_o = {x[1]: _action_logp(up, a, math.exp(x[1]))}
    cache_b = {x[2]: _action_logp(mu, a, math.exp(x[2]))}

    def lo_at(v):
        if v not in cache_o:
            cache_o[v] = _action_logp(up, a, math.exp(v))
        return cache_o[v]

    def lb_at(v):
        if v not in cache_b:
            cache_b[v] = _action_logp(mu, a, math.exp(v))
        return cache_b[v]

    coords = [
        (0, 0.1, (0.0, 1.0), lambda v: _mixture_ll(lo_at(x[1]), lb_at(x[2]), v)),
        (1, math.log(2.5), LOG_T_BOUNDS, lambda v: _mixture_ll(lo_at(v), lb_at(x[2]), x[0])),
        (2, math.log(2.5), LOG_T_BOUNDS, lambda v: _mixture_ll(lo_at(x[1]), lb_at(v), x[0])),
    ]
    for _ in range(sweeps):
        start = score
        for k, step, (blo, bhi), f in coords:
            lo, hi = max(blo, x[k] - step), min(bhi, x[k] + step)
            v, fv = _golden(f, lo, hi)
            # the interval endpoints are not probed by golden section
            for edge in (lo, hi):
                fe = f(edge)
                if fe > fv:
                    v, fv = edge, fe
            if fv > score:
                x[k], score = v, fv
        if score - start < 1e-9:
            break
    return PolicyParams(min(max(x[0], 0.0), 1.0), math.exp(x[1]), math.exp(x[2]))
