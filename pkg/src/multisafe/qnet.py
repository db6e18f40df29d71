"""Action-value estimation: a small numpy MLP trained by TD, and an exact
tabular solver used to check the confidence-bound properties.

The triple (mean, upper, lower) is trained against the GP reward mean and its
upper and lower confidence bounds respectively.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Approximator",
    "Adam",
    "QLearner",
    "QTriple",
    "TabularQ",
    "value_iteration",
    "solve_tabular",
    "td_loss_and_grads",
]

HEADS = ("mean", "upper", "lower")


class Approximator:
    """Feed-forward net ``in -> 50 -> 50 -> n_out`` with tanh hidden layers.

    Inputs are normalized by a fixed affine map ``(x - shift) / scale`` so raw
    metric states can be fed directly.
    """

    def __init__(self, in_dim, n_out, rng, hidden=(50, 50), shift=None, scale=None, zero_head=True):
        self.in_dim = in_dim
        self.n_out = n_out
        self.shift = np.zeros(in_dim) if shift is None else np.asarray(shift, dtype=float)
        self.scale = np.ones(in_dim) if scale is None else np.asarray(scale, dtype=float)
        sizes = [in_dim, *hidden, n_out]
        self.params = []
        for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = 1.0 / np.sqrt(fi)
            W = rng.uniform(-lim, lim, size=(fi, fo))
            b = np.zeros(fo)
            if zero_head and k == len(sizes) - 2:
                W[:] = 0.0
            self.params += [W, b]

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def copy(self):
        other = object.__new__(Approximator)
        other.in_dim, other.n_out = self.in_dim, self.n_out
        other.shift, other.scale = self.shift, self.scale
        other.params = [p.copy() for p in self.params]
        return other

    def load(self, other):
        for p, q in zip(self.params, other.params):
            p[...] = q

    def forward(self, x):
        h = (np.atleast_2d(x) - self.shift) / self.scale
        acts = [h]
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            z = h @ W + b
            h = np.tanh(z) if k < n_layers - 1 else z
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, dout):
        """Gradients of ``sum(dout * out)`` w.r.t. all parameters."""
        grads = [None] * len(self.params)
        n_layers = len(self.params) // 2
        delta = dout
        for k in reversed(range(n_layers)):
            grads[2 * k] = acts[k].T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            if k:
                delta = (delta @ self.params[2 * k].T) * (1.0 - acts[k] ** 2)
        return grads


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        c1 = 1 - self.b1 ** self.k
        c2 = 1 - self.b2 ** self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def td_loss_and_grads(net, states, actions, targets):
    """Squared TD loss ``0.5 * mean((Q(s, a) - y)^2)`` and its gradients."""
    out, acts = net.forward(states)
    idx = np.arange(len(actions))
    err = out[idx, actions] - targets
    loss = 0.5 * float(np.mean(err ** 2))
    dout = np.zeros_like(out)
    dout[idx, actions] = err / len(actions)
    return loss, net.backward(acts, dout)


class QLearner:
    """One action-value head with a delayed target copy.

    ``update`` takes one Adam step on the squared TD error against
    ``r + gamma * max_a' Q_target(s', a')`` and syncs the target every
    ``sync_period`` updates.
    """

    def __init__(self, in_dim, n_actions, rng, gamma=0.9, lr=1e-3, sync_period=100, clip=10.0,
                 shift=None, scale=None, zero_head=True):
        if not 0 < gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if sync_period < 1:
            raise ValueError("sync_period must be >= 1")
        self.net = Approximator(in_dim, n_actions, rng, shift=shift, scale=scale, zero_head=zero_head)
        self.target = self.net.copy()
        self.opt = Adam(self.net.params, lr=lr)
        self.gamma = gamma
        self.sync_period = sync_period
        self.clip = clip
        self.steps = 0

    @property
    def n_actions(self):
        return self.net.n_out

    def values(self, states):
        return self.net(states)

    def targets(self, rewards, next_states, done=None):
        nxt = self.target(next_states).max(axis=1)
        if done is not None:
            nxt = np.where(done, 0.0, nxt)
        return rewards + self.gamma * nxt

    def update(self, states, actions, targets):
        with np.errstate(invalid="ignore", over="ignore"):
            loss, grads = td_loss_and_grads(self.net, states, actions, targets)
        if not np.isfinite(loss):
            raise FloatingPointError("TD loss diverged; reduce the step size")
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > self.clip:
            grads = [g * (self.clip / norm) for g in grads]
        self.opt.step(self.net.params, grads)
        self.steps += 1
        if self.steps % self.sync_period == 0:
            self.target.load(self.net)
        return loss

    def learn(self, states, actions, rewards, next_states, done=None):
        return self.update(states, actions, self.targets(rewards, next_states, done))


class QTriple:
    """Mean, upper and lower action-value heads over continuous states."""

    def __init__(self, in_dim, n_actions, rng, **kwargs):
        self.heads = {name: QLearner(in_dim, n_actions, rng, **kwargs) for name in HEADS}

    @property
    def n_actions(self):
        return self.heads["mean"].n_actions

    @property
    def gamma(self):
        return self.heads["mean"].gamma

    def evaluate(self, states):
        """``(Q_mean, Q_upper, Q_lower)`` each of shape ``(B, n_actions)``."""
        return tuple(self.heads[h].values(states) for h in HEADS)

    def q_eval(self, state, action_index):
        mu, up, lo = self.evaluate(np.asarray(state, dtype=float)[None, :])
        a = int(action_index)
        if not 0 <= a < self.n_actions:
            raise IndexError(f"invalid action index {a}")
        return float(mu[0, a]), float(up[0, a]), float(lo[0, a])

    def td_update(self, states, actions, next_states, gp, t=None):
        """One TD step per head; rewards are the GP bounds at ``next_states``."""
        if len(actions) == 0:
            raise ValueError("empty transition batch")
        r_mu, _, r_up, r_lo = gp.query(next_states, t)
        return tuple(self.heads[h].learn(states, actions, r, next_states)
                     for h, r in zip(HEADS, (r_mu, r_up, r_lo)))


def value_iteration(P, rewards, gamma, tol=1e-13, max_sweeps=100_000):
    """Fixed point of ``Q(s,a) = sum_s' P[s,a,s'] (r(s') + gamma max_a' Q(s',a'))``."""
    P = np.asarray(P, dtype=float)
    r = np.asarray(rewards, dtype=float)
    base = P @ r
    Q = np.zeros(P.shape[:2])
    for _ in range(max_sweeps):
        new = base + gamma * (P @ Q.max(axis=1))
        if np.max(np.abs(new - Q)) <= tol:
            return new
        Q = new
    raise RuntimeError(f"value iteration did not converge in {max_sweeps} sweeps")


@dataclass
class TabularQ:
    """Exact Q triple over a finite MDP with transition tensor ``P[s, a, s']``."""

    P: np.ndarray
    gamma: float
    mean: np.ndarray
    upper: np.ndarray
    lower: np.ndarray

    @classmethod
    def zeros(cls, P, gamma):
        S, A = np.shape(P)[:2]
        return cls(np.asarray(P, dtype=float), gamma, np.zeros((S, A)), np.zeros((S, A)), np.zeros((S, A)))

    def q_eval(self, state, action_index):
        return (float(self.mean[state, action_index]), float(self.upper[state, action_index]),
                float(self.lower[state, action_index]))

    def td_update(self, transitions, rewards, weights=None, step_size=1.0):
        """Tabular TD step on a batch of ``(s, a, s')`` index triples.

        ``rewards`` is ``(r_mean, r_upper, r_lower)`` over states.  Targets use
        a frozen copy of the tables; with ``weights = P[s, a, s']`` over every
        triple and ``step_size = 1`` one call is an exact Bellman backup.
        """
        tr = np.asarray(transitions, dtype=int).reshape(-1, 3)
        if len(tr) == 0:
            raise ValueError("empty transition batch")
        w = np.ones(len(tr)) if weights is None else np.asarray(weights, dtype=float)
        s, a, s2 = tr.T
        for table, r in zip((self.mean, self.upper, self.lower), rewards):
            frozen = table.copy()
            y = np.asarray(r, dtype=float)[s2] + self.gamma * frozen[s2].max(axis=1)
            num = np.zeros_like(table)
            den = np.zeros_like(table)
            np.add.at(num, (s, a), w * y)
            np.add.at(den, (s, a), w)
            hit = den > 0
            table[hit] += step_size * (num[hit] / den[hit] - table[hit])
        return self


def solve_tabular(P, rewards, gamma):
    """Exact triple for reward vectors ``(r_lower, r_mean, r_upper)`` over states."""
    r_lo, r_mu, r_up = rewards
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    P = np.asarray(P, dtype=float)
    return TabularQ(P, gamma, value_iteration(P, r_mu, gamma), value_iteration(P, r_up, gamma),
                    value_iteration(P, r_lo, gamma))
