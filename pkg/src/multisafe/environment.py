"""Multi-agent MDP with factorized Gaussian transitions.

All agents share one state domain and one discrete action set and move
synchronously.  Each agent's next state is its nominal displacement plus
independent per-axis noise, followed by the boundary rule (periodic wrap for
the rover map, clamping for the quadcopter box).  Rewards are a fixed scalar
field over single-agent states; observations add Gaussian noise.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "DegenerateNoiseError",
    "TerrainParseError",
    "JointUnsafeSpec",
    "GridField",
    "DistanceField",
    "EnvModel",
    "load_terrain",
    "save_terrain",
    "synthetic_terrain",
    "rover_env",
    "quadcopter_env",
]


class DegenerateNoiseError(ValueError):
    """Density requested away from the point mass of a noise-free kernel."""


class TerrainParseError(ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class JointUnsafeSpec:
    """Pairwise-distance predicate defining the jointly unsafe set.

    ``min_pairwise_distance``: unsafe when any two agents are closer than
    ``threshold`` (collision).  ``max_pairwise_distance``: unsafe when any two
    agents are farther apart than ``threshold`` (lost payload).  With
    ``period`` set, distances are measured on the torus of that extent.
    """

    kind: str = "min_pairwise_distance"
    threshold: float = 0.1
    period: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("min_pairwise_distance", "max_pairwise_distance"):
            raise ValueError(f"unknown joint-unsafe kind {self.kind!r}")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")

    def pair_unsafe(self, a, b):
        """Elementwise predicate for two broadcastable point arrays."""
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.period is not None:
            L = np.asarray(self.period, dtype=float)
            diff = diff - L * np.round(diff / L)
        d = np.sqrt(np.sum(diff ** 2, axis=-1))
        if self.kind == "min_pairwise_distance":
            return d < self.threshold
        return d > self.threshold

    def pairs_unsafe(self, points):
        """Boolean ``(..., P)`` over all unordered pairs of ``points[..., N, dim]``."""
        points = np.asarray(points, dtype=float)
        n = points.shape[-2]
        if n < 2:
            return np.zeros(points.shape[:-2] + (0,), dtype=bool)
        i, j = np.triu_indices(n, k=1)
        return self.pair_unsafe(points[..., i, :], points[..., j, :])

    def __call__(self, points):
        return bool(np.any(self.pairs_unsafe(points)))


@dataclass
class GridField:
    """Altitudes on a regular node grid, bilinearly interpolated.

    ``altitudes[j, i]`` is the value at ``origin + (i * cell_size, j * cell_size)``.
    Queries outside the grid are clamped to its edge.
    """

    altitudes: np.ndarray
    cell_size: float
    origin: tuple = (0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        self.altitudes = np.asarray(self.altitudes, dtype=float)
        if self.altitudes.ndim != 2 or min(self.altitudes.shape) < 2:
            raise ValueError("altitude grid must be 2-D with at least 2x2 nodes")
        if not np.all(np.isfinite(self.altitudes)):
            raise ValueError("altitude grid must be finite")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")

    @property
    def nx(self):
        return self.altitudes.shape[1]

    @property
    def ny(self):
        return self.altitudes.shape[0]

    @property
    def extent(self):
        return ((self.nx - 1) * self.cell_size, (self.ny - 1) * self.cell_size)

    def __call__(self, points):
        p = np.asarray(points, dtype=float)
        fx = np.array((p[..., 0] - self.origin[0]) / self.cell_size)
        fy = np.array((p[..., 1] - self.origin[1]) / self.cell_size)
        # snap queries that sit on a node up to rounding, so nodes return stored values exactly
        for f in (fx, fy):
            r = np.round(f)
            np.copyto(f, r, where=np.abs(f - r) < 1e-9)
        i0 = np.clip(np.floor(fx), 0, self.nx - 2).astype(int)
        j0 = np.clip(np.floor(fy), 0, self.ny - 2).astype(int)
        tx = np.clip(fx - i0, 0.0, 1.0)
        ty = np.clip(fy - j0, 0.0, 1.0)
        a = self.altitudes
        v = ((1 - tx) * (1 - ty) * a[j0, i0] + tx * (1 - ty) * a[j0, i0 + 1]
             + (1 - tx) * ty * a[j0 + 1, i0] + tx * ty * a[j0 + 1, i0 + 1])
        return self.scale * v


@dataclass
class DistanceField:
    """Reward ``-scale * ||s - target||``."""

    target: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)

    def __call__(self, points):
        p = np.asarray(points, dtype=float)
        return -self.scale * np.sqrt(np.sum((p - self.target) ** 2, axis=-1))


def load_terrain(path, origin=(0.0, 0.0)):
    """Read a terrain file into a :class:`GridField`.

    Line 1 holds ``nx ny cell_size``; the next ``ny`` lines hold ``nx``
    altitudes each, row-major with y ascending.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TerrainParseError("empty file, expected header 'nx ny cell_size'", 1)
    head = lines[0].split()
    try:
        if len(head) != 3:
            raise ValueError
        nx, ny, cell = int(head[0]), int(head[1]), float(head[2])
    except ValueError:
        raise TerrainParseError(f"malformed header {lines[0]!r}, expected 'nx ny cell_size'", 1) from None
    if nx < 2 or ny < 2 or not cell > 0:
        raise TerrainParseError("header needs nx >= 2, ny >= 2 and cell_size > 0", 1)
    rows = []
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            row = [float(v) for v in text.split()]
        except ValueError:
            raise TerrainParseError(f"non-numeric altitude in {text!r}", lineno) from None
        if len(row) != nx:
            raise TerrainParseError(f"non-rectangular grid: expected {nx} values, got {len(row)}", lineno)
        rows.append(row)
    if len(rows) != ny:
        raise TerrainParseError(f"non-rectangular grid: expected {ny} rows, got {len(rows)}", len(lines))
    alt = np.array(rows)
    if not np.all(np.isfinite(alt)):
        raise TerrainParseError("altitudes must be finite", 2)
    return GridField(alt, cell, origin)


def save_terrain(field, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{field.nx} {field.ny} {field.cell_size!r}\n")
        for row in field.altitudes:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def synthetic_terrain(seed, size=20.0, cell_size=0.5, n_bumps=6,
                      amplitude=(-1.5, 1.5), width=(1.5, 3.0)):
    """Sum of seeded Gaussian bumps on a periodic square, rasterized to a grid.

    Distances are taken on the torus so the field is continuous across the
    wrap boundary of the rover map.
    """
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, size, size=(n_bumps, 2))
    amps = rng.uniform(amplitude[0], amplitude[1], size=n_bumps)
    widths = rng.uniform(width[0], width[1], size=n_bumps)
    n = int(round(size / cell_size)) + 1
    g = np.arange(n) * cell_size
    xx, yy = np.meshgrid(g, g)
    alt = np.zeros_like(xx)
    for c, a, w in zip(centers, amps, widths):
        dx = np.abs(xx - c[0])
        dy = np.abs(yy - c[1])
        dx = np.minimum(dx, size - dx)
        dy = np.minimum(dy, size - dy)
        alt += a * np.exp(-(dx ** 2 + dy ** 2) / (2 * w ** 2))
    return GridField(alt, cell_size)


@dataclass
class EnvModel:
    """Shared dynamics, safety predicate and reward field of an MDP-MA.

    Parameters
    ----------
    bounds : array (dim, 2)
        Axis-aligned box; wrap treats it as half-open ``[lo, hi)``.
    actions : array (n_actions, dim)
        Nominal displacement of each action.
    noise_var : float
        Per-axis variance of the Gaussian transition noise.
    boundary : {'wrap', 'clamp'}
    unsafe_joint : JointUnsafeSpec
    reward_field : callable
        Maps ``(..., dim)`` points to rewards.
    obs_noise_std : float
        Standard deviation of reward observation noise.
    noise_offsets, noise_probs : optional
        Discrete noise support replacing the Gaussian (finite test MDPs).
    """

    bounds: np.ndarray
    actions: np.ndarray
    noise_var: float
    boundary: str
    unsafe_joint: JointUnsafeSpec
    reward_field: Callable
    obs_noise_std: float = 0.1
    noise_offsets: Optional[np.ndarray] = None
    noise_probs: Optional[np.ndarray] = None
    action_names: list = field(default_factory=list)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float)
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2:
            raise ValueError("bounds must have shape (dim, 2)")
        if np.any(self.bounds[:, 1] <= self.bounds[:, 0]):
            raise ValueError("bounds are degenerate")
        if len(self.actions) == 0 or self.actions.shape[1] != self.dim:
            raise ValueError("actions must be a non-empty (n_actions, dim) array")
        if not self.noise_var >= 0:
            raise ValueError("noise_var must be non-negative")
        if self.boundary not in ("wrap", "clamp"):
            raise ValueError(f"unknown boundary rule {self.boundary!r}")
        if self.noise_offsets is not None:
            self.noise_offsets = np.asarray(self.noise_offsets, dtype=float).reshape(-1, self.dim)
            p = np.asarray(self.noise_probs, dtype=float)
            if p.shape != (len(self.noise_offsets),) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ValueError("noise_probs must be a distribution over noise_offsets")
            self.noise_probs = p / p.sum()
        if self.boundary == "wrap" and self.unsafe_joint.period is None:
            self.unsafe_joint = replace(self.unsafe_joint, period=tuple(self.width.tolist()))

    @property
    def dim(self):
        return self.bounds.shape[0]

    @property
    def n_actions(self):
        return len(self.actions)

    @property
    def lo(self):
        return self.bounds[:, 0]

    @property
    def hi(self):
        return self.bounds[:, 1]

    @property
    def width(self):
        return self.bounds[:, 1] - self.bounds[:, 0]

    def apply_boundary(self, points):
        p = np.asarray(points, dtype=float)
        if self.boundary == "clamp":
            return np.clip(p, self.lo, self.hi)
        w = self.width
        r = np.mod(p - self.lo, w)
        # mod of a tiny negative can round up to exactly w
        r = np.where(r >= w, 0.0, r)
        return self.lo + r

    def _check_action(self, a):
        a = np.asarray(a)
        if not np.issubdtype(a.dtype, np.integer) or np.any(a < 0) or np.any(a >= self.n_actions):
            raise IndexError(f"invalid action index {a!r} for {self.n_actions} actions")
        return a

    def nominal_next(self, state, action_index):
        """Deterministic successor before noise, boundary rule applied."""
        a = self._check_action(action_index)
        return self.apply_boundary(np.asarray(state, dtype=float) + self.actions[a])

    def draw_noise(self, rng, shape=()):
        """Transition noise of shape ``shape + (dim,)``."""
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        if self.noise_offsets is not None:
            u = rng.random(shape)
            idx = np.searchsorted(np.cumsum(self.noise_probs), u, side="right")
            idx = np.minimum(idx, len(self.noise_probs) - 1)
            return self.noise_offsets[idx]
        z = rng.standard_normal(shape + (self.dim,))
        return np.sqrt(self.noise_var) * z

    def propagate(self, points, action_index, noise):
        """Next states from given noise; broadcasts over leading axes."""
        a = np.asarray(action_index)
        return self.apply_boundary(np.asarray(points, dtype=float) + self.actions[a] + noise)

    def reward(self, points):
        return self.reward_field(points)

    def step(self, joint, actions, rng):
        """Synchronous joint transition.

        Returns the next joint state ``(N, dim)`` and one noisy reward
        observation per agent.
        """
        joint = np.asarray(joint, dtype=float)
        actions = self._check_action(np.asarray(actions, dtype=int))
        if actions.shape != (len(joint),):
            raise ValueError("need exactly one action per agent")
        noise = self.draw_noise(rng, (len(joint),))
        nxt = self.propagate(joint, actions, noise)
        obs = self.reward(nxt) + self.obs_noise_std * rng.standard_normal(len(joint))
        return nxt, obs

    def is_jointly_unsafe(self, joint):
        return self.unsafe_joint(joint)

    def agent_jointly_unsafe(self, joint, i):
        """Whether any unsafe pair involves agent ``i``."""
        joint = np.asarray(joint, dtype=float)
        others = np.delete(joint, i, axis=0)
        if len(others) == 0:
            return False
        return bool(np.any(self.unsafe_joint.pair_unsafe(joint[i], others)))

    def transition_density(self, nxt, cur, action_index):
        """Density of ``nxt`` given ``cur`` and the action, before clamping.

        For the wrap rule each axis uses the nearest periodic image of the
        offset.  With zero noise the kernel is a point mass: ``inf`` at the
        nominal successor, :class:`DegenerateNoiseError` elsewhere.
        """
        if self.noise_offsets is not None:
            raise DegenerateNoiseError("discrete noise has no density")
        mode = self.nominal_next(cur, action_index)
        d = np.asarray(nxt, dtype=float) - mode
        if self.boundary == "wrap":
            w = self.width
            d = d - w * np.round(d / w)
        if self.noise_var == 0:
            if np.all(d == 0):
                return np.inf
            raise DegenerateNoiseError("zero transition noise: density undefined off the nominal successor")
        v = self.noise_var
        return np.exp(-0.5 * np.sum(d ** 2, axis=-1) / v) / (2 * np.pi * v) ** (self.dim / 2)


ROVER_ACTIONS = {"up": (0.0, 1.0), "down": (0.0, -1.0), "left": (-1.0, 0.0), "right": (1.0, 0.0)}
QUAD_ACTIONS = {
    "up": (0.0, 0.0, 1.0), "down": (0.0, 0.0, -1.0),
    "forward": (1.0, 0.0, 0.0), "backward": (-1.0, 0.0, 0.0),
    "left": (0.0, 1.0, 0.0), "right": (0.0, -1.0, 0.0),
}


def rover_env(size=20.0, n_actions=4, step=1.0, noise_var=0.1, collision=0.1,
              terrain=None, terrain_seed=0, obs_noise_std=0.1):
    """Rover map on a periodic square with altitude rewards.

    ``n_actions=4`` gives up/down/left/right; other counts spread unit moves
    evenly over the circle.  ``terrain`` may be a :class:`GridField` or a
    terrain file path; otherwise a synthetic field is generated.
    """
    if terrain is None:
        field_ = synthetic_terrain(terrain_seed, size=size)
    elif isinstance(terrain, GridField):
        field_ = terrain
    else:
        field_ = load_terrain(terrain)
    ex, ey = field_.extent
    bounds = [[field_.origin[0], field_.origin[0] + ex], [field_.origin[1], field_.origin[1] + ey]]
    if n_actions == 4:
        names = list(ROVER_ACTIONS)
        acts = np.array([ROVER_ACTIONS[k] for k in names]) * step
    else:
        ang = np.pi / 2 + 2 * np.pi * np.arange(n_actions) / n_actions
        acts = step * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        acts[np.abs(acts) < 1e-12] = 0.0
        names = [f"dir{k}" for k in range(n_actions)]
    return EnvModel(bounds, acts, noise_var, "wrap",
                    JointUnsafeSpec("min_pairwise_distance", collision),
                    field_, obs_noise_std, action_names=names)


def quadcopter_env(half_width=3.0, step=0.1, noise_var=0.1, max_distance=3.0,
                   destination=(2.0, 2.0, 2.0), reward_scale=1.0, obs_noise_std=0.1):
    """Two-quadcopter payload task in a clamped cube."""
    names = list(QUAD_ACTIONS)
    acts = np.array([QUAD_ACTIONS[k] for k in names]) * step
    bounds = [[-half_width, half_width]] * 3
    return EnvModel(bounds, acts, noise_var, "clamp",
                    JointUnsafeSpec("max_pairwise_distance", max_distance),
                    DistanceField(destination, reward_scale), obs_noise_std, action_names=names)
