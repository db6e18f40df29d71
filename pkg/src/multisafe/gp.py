"""Exact GP regression of the shared reward with confidence bounds.

The posterior keeps a lower Cholesky factor of ``K(X, X) + diag(noise)`` that
grows by one row per observation.  Confidence bounds use the latent-function
standard deviation; observation noise only enters the Gram matrix.
"""

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.linalg import cholesky, solve_triangular

__all__ = ["KernelSpec", "BetaSchedule", "beta", "GPosterior", "PinnedQuery", "gp_update", "gp_query"]


@dataclass(frozen=True)
class KernelSpec:
    """RBF signal kernel plus white observation noise."""

    rbf_length_scale: float = 10.0
    signal_std: float = 10.0
    white_noise_std: float = 10.0

    def __post_init__(self):
        if min(self.rbf_length_scale, self.signal_std, self.white_noise_std) <= 0:
            raise ValueError("kernel parameters must be strictly positive")

    @property
    def signal_var(self):
        return self.signal_std ** 2

    @property
    def noise_var(self):
        return self.white_noise_std ** 2

    def __call__(self, a, b):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        d2 = np.zeros((len(a), len(b)))
        for k in range(a.shape[1]):
            d2 += (a[:, k, None] - b[None, :, k]) ** 2
        return self.signal_var * np.exp(-0.5 * d2 / self.rbf_length_scale ** 2)


@dataclass(frozen=True)
class BetaSchedule:
    """Confidence multiplier over time.

    ``constant`` returns ``value``.  ``theoretical`` returns
    ``2 B + 300 alpha_t log(t / delta)^3`` where ``alpha`` is a constant, a
    sequence indexed by ``t - 1``, or a callable of ``t``.
    """

    mode: str = "constant"
    value: float = 2.0
    B: float = 1.0
    delta: float = 0.05
    alpha: Any = 0.0

    def __post_init__(self):
        if self.mode not in ("constant", "theoretical"):
            raise ValueError(f"unknown beta mode {self.mode!r}")
        if self.mode == "constant" and self.value < 0:
            raise ValueError("constant beta must be non-negative")

    def alpha_at(self, t):
        if callable(self.alpha):
            return float(self.alpha(t))
        if np.ndim(self.alpha) == 0:
            return float(self.alpha)
        return float(self.alpha[t - 1])

    def __call__(self, t):
        if t < 1:
            raise ValueError("beta is defined for t >= 1")
        if self.mode == "constant":
            return float(self.value)
        ratio = t / self.delta
        if ratio <= 1:
            raise ValueError("theoretical beta needs t / delta > 1")
        return 2 * self.B + 300 * self.alpha_at(t) * math.log(ratio) ** 3


def beta(t, schedule):
    return schedule(t)


class GPosterior:
    """Zero-mean GP posterior over rewards, updated one observation at a time.

    Parameters
    ----------
    kernel : KernelSpec
    dim : int
        State dimensionality.
    schedule : BetaSchedule
        Source of beta for :meth:`query`.
    max_points : int
        Above this many stored points, an observation within
        ``merge_radius * length_scale`` of a stored point is folded into it by
        inverse-variance averaging instead of growing the factor.
    """

    def __init__(self, kernel, dim, schedule=None, max_points=1000, merge_radius=0.25, capacity=64):
        self.kernel = kernel
        self.dim = dim
        self.schedule = schedule if schedule is not None else BetaSchedule()
        self.max_points = max_points
        self.merge_radius = merge_radius
        self.jitter = 1e-8 * kernel.signal_var
        self.n = 0
        self.t = 0
        self.version = 0
        self._alloc(capacity)

    def _alloc(self, cap):
        X = np.zeros((cap, self.dim))
        y = np.zeros(cap)
        noise = np.zeros(cap)
        L = np.zeros((cap, cap))
        w = np.zeros(cap)
        if self.n and hasattr(self, "_X"):
            n = self.n
            X[:n], y[:n], noise[:n] = self._X[:n], self._y[:n], self._noise[:n]
            L[:n, :n], w[:n] = self._L[:n, :n], self._w[:n]
        self._X, self._y, self._noise, self._L, self._w = X, y, noise, L, w

    @property
    def X(self):
        return self._X[: self.n]

    @property
    def y(self):
        return self._y[: self.n]

    @property
    def noise(self):
        return self._noise[: self.n]

    @property
    def L(self):
        return self._L[: self.n, : self.n]

    @property
    def w(self):
        """``L^{-1} y``; the posterior mean at ``q`` is ``(L^{-1} k_q) . w``."""
        return self._w[: self.n]

    def copy(self):
        other = GPosterior(self.kernel, self.dim, self.schedule, self.max_points, self.merge_radius,
                           capacity=max(self.n, 1))
        n = self.n
        other.n, other.t, other.version = n, self.t, self.version
        other._X[:n], other._y[:n], other._noise[:n] = self.X, self.y, self.noise
        other._L[:n, :n], other._w[:n] = self.L, self.w
        return other

    def update(self, point, observation):
        """Condition on one noisy reward observation (in place)."""
        x = np.asarray(point, dtype=float).reshape(self.dim)
        yv = float(observation)
        self.t += 1
        if self.n >= self.max_points:
            d2 = np.sum((self.X - x) ** 2, axis=1)
            i = int(np.argmin(d2))
            if d2[i] <= (self.merge_radius * self.kernel.rbf_length_scale) ** 2:
                self._merge(i, yv)
                return self
        self._append(x, yv)
        return self

    def _append(self, x, yv):
        n = self.n
        if n + 1 > len(self._y):
            self._alloc(2 * len(self._y))
        nv = self.kernel.noise_var
        diag = self.kernel.signal_var + nv + self.jitter
        if n:
            k = self.kernel(self.X, x[None, :])[:, 0]
            l = solve_triangular(self.L, k, lower=True, check_finite=False)
            d2 = diag - l @ l
        else:
            l = np.zeros(0)
            d2 = diag
        if not d2 > self.jitter * 1e-3:
            raise np.linalg.LinAlgError("Gram matrix lost positive definiteness")
        d = math.sqrt(d2)
        self._X[n] = x
        self._y[n] = yv
        self._noise[n] = nv
        self._L[n, :n] = l
        self._L[n, n] = d
        self._w[n] = (yv - l @ self._w[:n]) / d
        self.n = n + 1

    def _merge(self, i, yv):
        nv = self.kernel.noise_var
        prec = 1.0 / self._noise[i] + 1.0 / nv
        self._y[i] = (self._y[i] / self._noise[i] + yv / nv) / prec
        self._noise[i] = 1.0 / prec
        self.refactor()

    def refactor(self):
        """Recompute the factor from scratch (after a merge)."""
        n = self.n
        K = self.kernel(self.X, self.X)
        K[np.diag_indices(n)] += self.noise + self.jitter
        self._L[:n, :n] = cholesky(K, lower=True, check_finite=False)
        self._w[:n] = solve_triangular(self.L, self.y, lower=True, check_finite=False)
        self.version += 1

    def predict(self, points):
        """Posterior mean and latent standard deviation at ``points`` (m, dim)."""
        q = np.atleast_2d(np.asarray(points, dtype=float))
        s2 = self.kernel.signal_var
        if self.n == 0:
            return np.zeros(len(q)), np.full(len(q), math.sqrt(s2))
        V = solve_triangular(self.L, self.kernel(self.X, q), lower=True, check_finite=False)
        mean = V.T @ self.w
        var = np.maximum(s2 - np.einsum("ij,ij->j", V, V), 0.0)
        return mean, np.sqrt(var)

    def beta(self, t=None):
        return self.schedule(max(1, self.t if t is None else t))

    def query(self, points, t=None):
        """``(r_mu, sigma, r_upper, r_lower)`` at ``points``."""
        pts = np.asarray(points, dtype=float)
        lead = pts.shape[:-1]
        mean, std = self.predict(pts.reshape(-1, self.dim))
        b = self.beta(t)
        mean, std = mean.reshape(lead), std.reshape(lead)
        return mean, std, mean + b * std, mean - b * std


def gp_update(posterior, point, observation):
    return posterior.update(point, observation)


def gp_query(posterior, point, t=None):
    return posterior.query(point, t)


class PinnedQuery:
    """Incrementally maintained posterior at a fixed set of query points.

    Appending ``k`` observations costs ``O(k n m)``; a merge (refactor)
    triggers a full ``O(n^2 m)`` recompute.
    """

    def __init__(self, points):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self._V = np.zeros((0, len(self.points)))
        self._synced = 0
        self._version = None
        self._mean = np.zeros(len(self.points))
        self._ss = np.zeros(len(self.points))

    def predict(self, gp):
        if self._version != gp.version or gp.n < self._synced:
            self._synced = 0
            self._V = np.zeros((0, len(self.points)))
            self._mean[:] = 0.0
            self._ss[:] = 0.0
            self._version = gp.version
        n0, n = self._synced, gp.n
        if n > n0:
            Kb = gp.kernel(gp.X[n0:n], self.points)
            if n0:
                Kb -= gp.L[n0:n, :n0] @ self._V[:n0]
            Vb = solve_triangular(gp.L[n0:n, n0:n], Kb, lower=True, check_finite=False)
            if len(self._V) < n:
                grown = np.zeros((max(n, 2 * len(self._V)), len(self.points)))
                grown[:n0] = self._V[:n0]
                self._V = grown
            self._V[n0:n] = Vb
            self._mean += Vb.T @ gp.w[n0:n]
            self._ss += np.einsum("ij,ij->j", Vb, Vb)
            self._synced = n
        var = np.maximum(gp.kernel.signal_var - self._ss, 0.0)
        return self._mean.copy(), np.sqrt(var)

    def query(self, gp, t=None):
        mean, std = self.predict(gp)
        b = gp.beta(t)
        return mean, std, mean + b * std, mean - b * std
