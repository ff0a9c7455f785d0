"""Swarm environments: Aggregation, Vicsek and Kuramoto.

All three are written as plain functions over an immutable :class:`SwarmState`
plus a thin stateful :class:`SwarmEnv` wrapper used by the trainer.  Global
reductions (reward, polar order) go through ``math.fsum`` so that they are
exactly rounded and therefore independent of agent ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import manifolds as mf
from .manifolds import Manifold

ENV_NAMES = ("aggregation", "vicsek", "kuramoto")
OBJECTIVES = ("align", "misalign", "aggregate")
INITS = (
    "gaussian",
    "uniform",
    "beta-1",
    "beta-2",
    "beta-3",
    "peak-normal",
    "squeezed-normal",
    "multiheaded-normal",
    "bernoulli-multiheaded-normal",
)
TWO_PI = 2.0 * np.pi

# below this norm the mean heading vector has no direction
_DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class EnvConfig:
    env: str = "vicsek"
    manifold: str = "torus"
    dim: int = 2
    n_agents: int = 50
    radius: float = 0.25
    v0: float = 0.075
    omega0: float = 0.2
    sigma_phi: float = 0.02
    sigma_x: float = 0.2
    sigma_y: float = 0.2
    c_align: float = 1.0
    c_disagg: float = 1.0
    c_action: float = 0.1
    objective: str = "align"
    horizon: int = 200
    gamma: float = 0.99
    init: str = "gaussian"
    init_var: float = 0.4
    velocity_control: bool = False
    neighbor_method: str = "auto"

    def __post_init__(self):
        if self.env not in ENV_NAMES:
            raise ValueError(f"env must be one of {ENV_NAMES}, got {self.env!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.neighbor_method not in ("auto", "grid", "brute"):
            raise ValueError("neighbor_method must be auto, grid or brute")
        Manifold(self.manifold, self.dim)
        if self.env != "aggregation" and self.dim != 2:
            raise ValueError("vicsek/kuramoto are two-dimensional")
        if self.env == "aggregation" and self.objective != "aggregate":
            raise ValueError("aggregation uses objective='aggregate'")
        if self.env != "aggregation" and self.objective == "aggregate":
            raise ValueError("objective 'aggregate' is only defined for the aggregation env")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if not self.radius > 0:
            raise ValueError("interaction radius must be > 0")
        if self.v0 < 0 or self.horizon < 1 or not 0 < self.gamma < 1:
            raise ValueError("need v0 >= 0, horizon >= 1 and gamma in (0, 1)")
        if min(self.c_align, self.c_disagg, self.c_action, self.sigma_phi, self.sigma_x, self.sigma_y) < 0:
            raise ValueError("cost weights and noise levels must be >= 0")
        if self.env == "kuramoto" and self.v0 != 0:
            raise ValueError("kuramoto requires v0 = 0")
        if self.init_var <= 0:
            raise ValueError("init_var must be > 0")

    @property
    def space(self) -> Manifold:
        return Manifold(self.manifold, self.dim)

    @property
    def has_headings(self) -> bool:
        return self.env != "aggregation"

    @property
    def obs_dim(self) -> int:
        return self.dim if self.env == "aggregation" else 2

    @property
    def action_dim(self) -> int:
        if self.env == "aggregation":
            return self.dim
        return 2 if self.velocity_control else 1


def vicsek_config(**kw) -> EnvConfig:
    return EnvConfig(**kw)


def kuramoto_config(**kw) -> EnvConfig:
    base = dict(env="kuramoto", v0=0.0, sigma_phi=0.0)
    base.update(kw)
    return EnvConfig(**base)


def aggregation_config(dim: int = 2, **kw) -> EnvConfig:
    base = dict(
        env="aggregation", manifold="box", dim=dim, v0=0.1, sigma_x=0.2, sigma_y=0.2,
        objective="aggregate", horizon=100, c_disagg=1.0, c_action=0.1,
    )
    base.update(kw)
    return EnvConfig(**base)


@dataclass(frozen=True)
class SwarmState:
    positions: np.ndarray
    headings: np.ndarray | None = None
    neighbors: np.ndarray | None = None
    t: int = 0

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class StepOutcome:
    state: SwarmState
    reward: float
    observations: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# initial distributions
# ---------------------------------------------------------------------------


def sample_initial_positions(init: str, n: int, dim: int, rng: np.random.Generator,
                             var: float = 0.4, clip: bool = True) -> np.ndarray:
    """Draw ``n`` positions in R^dim; clipped to [-1, 1]^dim unless ``clip`` is off."""
    std = math.sqrt(var)
    if init == "gaussian":
        x = rng.normal(0.0, std, size=(n, dim))
    elif init == "uniform":
        x = rng.uniform(-1.0, 1.0, size=(n, dim))
    elif init.startswith("beta-"):
        a = {"beta-1": 0.5, "beta-2": 0.25, "beta-3": 0.75}[init]
        x = 2.0 * rng.beta(a, a, size=(n, dim)) - 1.0
    elif init == "peak-normal":
        x = rng.normal(0.0, math.sqrt(0.1), size=(n, dim))
    elif init == "squeezed-normal":
        scale = np.full(dim, std)
        scale[min(1, dim - 1)] = math.sqrt(var / 10.0)
        x = rng.normal(0.0, 1.0, size=(n, dim)) * scale
    else:
        w_first = 0.5 if init == "multiheaded-normal" else 0.75
        first = rng.uniform(size=n) < w_first
        centers = np.where(first[:, None], 0.5, -0.5)
        x = centers + rng.normal(0.0, math.sqrt(var / 2.0), size=(n, dim))
    if clip:
        x = np.clip(x, -1.0, 1.0)
    return x


# ---------------------------------------------------------------------------
# neighbor search
# ---------------------------------------------------------------------------


def neighbors_brute(kind: Manifold, positions: np.ndarray, radius: float) -> np.ndarray:
    """Boolean (N, N) adjacency d(p_i, p_j) <= radius, self included."""
    return mf.pairwise_distance(kind, positions, positions) <= radius


def neighbors_grid(kind: Manifold, positions: np.ndarray, radius: float) -> np.ndarray:
    """Same adjacency as :func:`neighbors_brute` via a uniform hash grid.

    All images of every point are binned in cells of side ``radius``; only
    images in the 3^d block around a query cell are tested.
    """
    positions = np.asarray(positions, dtype=float)
    n, d = positions.shape
    imgs = mf.images(kind, positions)  # (n, k, d)
    k = imgs.shape[1]
    owner = np.repeat(np.arange(n), k)
    imgs = imgs.reshape(n * k, d)
    # images further than one radius from the square can never be neighbors
    keep = np.all(np.abs(imgs) <= 1.0 + radius, axis=1)
    imgs, owner = imgs[keep], owner[keep]

    lo = -1.0 - radius
    ncell = int(math.ceil((2.0 + 2.0 * radius) / radius)) + 1
    strides = ncell ** np.arange(d)
    cell_of = lambda pts: np.floor((pts - lo) / radius).astype(np.int64)  # noqa: E731
    img_cells = cell_of(imgs)
    keys = img_cells @ strides
    order = np.argsort(keys, kind="stable")
    keys_sorted = keys[order]

    q_cells = cell_of(positions)
    adj = np.zeros((n, n), dtype=bool)
    for off in np.ndindex(*(3,) * d):
        nb = q_cells + (np.array(off) - 1)
        valid = np.all((nb >= 0) & (nb < ncell), axis=1)
        qkeys = nb @ strides
        start = np.searchsorted(keys_sorted, qkeys, side="left")
        stop = np.searchsorted(keys_sorted, qkeys, side="right")
        counts = np.where(valid, stop - start, 0)
        total = int(counts.sum())
        if total == 0:
            continue
        qi = np.repeat(np.arange(n), counts)
        first = np.repeat(start - (np.cumsum(counts) - counts), counts)
        idx = order[np.arange(total) + first]
        dist = mf.euclid(positions[qi] - imgs[idx])
        hit = dist <= radius
        adj[qi[hit], owner[idx[hit]]] = True
    return adj


def neighbor_matrix(cfg: EnvConfig, positions: np.ndarray) -> np.ndarray:
    method = cfg.neighbor_method
    if method == "auto":
        # the vectorised brute force wins below a few hundred agents
        method = "brute" if positions.shape[0] <= 400 else "grid"
    fn = neighbors_brute if method == "brute" else neighbors_grid
    return fn(cfg.space, positions, cfg.radius)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def polar_order(state: SwarmState | np.ndarray) -> float:
    """R = |mean of exp(i phi)|."""
    phi = state.headings if isinstance(state, SwarmState) else np.asarray(state, dtype=float)
    if phi is None:
        raise ValueError("state has no headings")
    n = phi.shape[0]
    c = math.fsum(np.cos(phi)) / n
    s = math.fsum(np.sin(phi)) / n
    return min(1.0, math.hypot(c, s))


def polarization(headings: np.ndarray) -> float:
    """Mean angle between each heading and the mean heading direction."""
    n = headings.shape[0]
    cos, sin = np.cos(headings), np.sin(headings)
    mx = math.fsum(cos) / n
    my = math.fsum(sin) / n
    norm = math.hypot(mx, my)
    if norm <= _DEGENERATE_NORM:
        return 0.5 * math.pi
    # atan2 form stays accurate near alignment, where arccos of the dot product does not
    ang = np.arctan2(np.abs(sin * mx - cos * my), cos * mx + sin * my)
    return math.fsum(ang) / n


def action_cost(cfg: EnvConfig, actions: np.ndarray) -> float:
    """Empirical mean action cost over the sampled actions."""
    a = np.asarray(actions, dtype=float)
    if cfg.env == "aggregation":
        norm = np.sqrt(np.sum(a * a, axis=1))
        scaled = a / np.maximum(1.0, norm)[:, None]
        per = np.sum(np.abs(scaled), axis=1)
    else:
        per = np.abs(a[:, 0] if a.ndim == 2 else a)
    return math.fsum(per) / a.shape[0]


def reward(state: SwarmState, mean_action_cost: float, cfg: EnvConfig) -> float:
    """Global reward of the current mean field plus action cost."""
    if cfg.objective == "aggregate":
        x = state.positions
        n = x.shape[0]
        pair = np.sum(np.abs(x[:, None, :] - x[None, :, :]), axis=-1)
        spread = math.fsum(pair.ravel()) / (n * n)
        return -cfg.c_disagg * spread - cfg.c_action * mean_action_cost
    pol = polarization(state.headings)
    sign = -1.0 if cfg.objective == "align" else 1.0
    return sign * cfg.c_align * pol - cfg.c_action * mean_action_cost


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def reset(cfg: EnvConfig, rng: np.random.Generator) -> tuple[SwarmState, np.ndarray]:
    pos = sample_initial_positions(cfg.init, cfg.n_agents, cfg.dim, rng, var=cfg.init_var)
    headings = None
    nbrs = None
    if cfg.has_headings:
        headings = rng.uniform(0.0, TWO_PI, size=cfg.n_agents)
    if cfg.env == "kuramoto":
        nbrs = neighbor_matrix(cfg, pos)
        nbrs.setflags(write=False)
    state = SwarmState(pos, headings, nbrs, 0)
    return state, observe(state, cfg, rng)


def local_order(state: SwarmState, cfg: EnvConfig) -> np.ndarray:
    """(N, 2) array of (x_bar, y_bar): neighbourhood means of (sin, cos) of relative headings."""
    adj = state.neighbors if state.neighbors is not None else neighbor_matrix(cfg, state.positions)
    phi = state.headings
    s, c = np.sin(phi), np.cos(phi)
    a = adj.astype(float)
    sum_s = a @ s
    sum_c = a @ c
    n = phi.shape[0]
    # sin(pj - pi) = sj ci - cj si ;  cos(pj - pi) = cj ci + sj si
    xbar = (sum_s * c - sum_c * s) / n
    ybar = (sum_c * c + sum_s * s) / n
    return np.stack([xbar, ybar], axis=1)


def observe(state: SwarmState, cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-agent observations: (magnitude, mean relative angle) or a noisy own position."""
    if cfg.env == "aggregation":
        y = state.positions + cfg.sigma_y * rng.normal(size=state.positions.shape)
        return np.clip(y, -1.0, 1.0)
    xy = local_order(state, cfg)
    mag = np.minimum(np.hypot(xy[:, 0], xy[:, 1]), 1.0)
    ang = np.arctan2(xy[:, 0], xy[:, 1])
    ang = np.where(ang == -np.pi, np.pi, ang)
    return np.stack([mag, ang], axis=1)


def check_actions(cfg: EnvConfig, actions) -> np.ndarray:
    a = np.asarray(actions, dtype=float)
    n = cfg.n_agents
    if cfg.env == "aggregation":
        a = a.reshape(n, cfg.dim)
        lo = np.full(cfg.dim, -1.0)
    else:
        a = a.reshape(n, cfg.action_dim)
        lo = np.array([-1.0, 0.0][: cfg.action_dim])
    tol = 1e-12
    if not np.all(np.isfinite(a)) or np.any(a < lo - tol) or np.any(a > 1.0 + tol):
        raise ValueError("action outside the action space")
    return a


def step(state: SwarmState, actions, cfg: EnvConfig, rng: np.random.Generator) -> StepOutcome:
    """Advance one time step; the reward is that of the pre-step mean field."""
    a = check_actions(cfg, actions)
    cost = action_cost(cfg, a)
    r = reward(state, cost, cfg)
    n = state.n_agents

    if cfg.env == "aggregation":
        norm = np.sqrt(np.sum(a * a, axis=1))
        move = cfg.v0 * a / np.maximum(1.0, norm)[:, None]
        raw = state.positions + move + cfg.sigma_x * rng.normal(size=state.positions.shape)
        new = SwarmState(np.clip(raw, -1.0, 1.0), None, None, state.t + 1)
    else:
        phi = state.headings
        turn = a[:, 0]
        noise = cfg.sigma_phi * rng.normal(size=n) if cfg.sigma_phi > 0 else 0.0
        new_phi = phi + cfg.omega0 * turn + noise
        pos = state.positions
        if cfg.v0 > 0:
            speed = cfg.v0 * (a[:, 1] if cfg.velocity_control else 1.0)
            raw = pos + np.stack([speed * np.sin(phi), speed * np.cos(phi)], axis=1)
            w = mf.wrap(cfg.space, raw)
            pos = w.position
            new_phi = mf.reflect_heading(new_phi, w.negated)
        else:
            new_phi = np.mod(new_phi, TWO_PI)
        new = SwarmState(pos, new_phi, state.neighbors, state.t + 1)

    obs = observe(new, cfg, rng)
    return StepOutcome(new, r, obs, new.t >= cfg.horizon, {"action_cost": cost})


class SwarmEnv:
    """Stateful single-writer wrapper with its own random stream."""

    def __init__(self, cfg: EnvConfig, seed=None):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.state: SwarmState | None = None
        self.obs: np.ndarray | None = None

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state, self.obs = reset(self.cfg, self.rng)
        return self.obs

    def step(self, actions) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("call reset() first")
        out = step(self.state, actions, self.cfg, self.rng)
        self.state, self.obs = out.state, out.observations
        return out

    def with_agents(self, n: int) -> "SwarmEnv":
        return SwarmEnv(replace(self.cfg, n_agents=n))
