"""Exact mean-field limit of small finite-state systems, and its finite-N counterpart.

A :class:`FiniteSystem` has states X, observations Y and actions U.  Its
kernels are affine in the mean field,

    P(x' | x, u, mu)  = P0[x, u, x'] + sum_j mu_j * P1[j, x, u, x'],
    P^y(y | x, mu)    = O0[x, y]     + sum_j mu_j * O1[j, x, y],

so checking that they are stochastic at the simplex vertices proves it for
every mu (each kernel is then a convex combination of stochastic matrices).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import linprog

SIMPLEX_TOL = 1e-12
CHAOS_COLUMNS = ["N", "t", "replication_count", "mean_l1", "mean_w1", "stderr"]


def _check_stochastic(p: np.ndarray, what: str) -> None:
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError(f"{what} is not a probability kernel")


def check_mean_field(mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1 or np.any(mu < -SIMPLEX_TOL) or abs(mu.sum() - 1.0) > SIMPLEX_TOL * max(1, mu.size):
        raise ValueError("mean field must be a probability vector")
    return mu


@dataclass(frozen=True)
class FiniteSystem:
    p0: np.ndarray  # (X, U, X)
    p1: np.ndarray  # (X, X, U, X), leading axis is the mean-field coordinate
    o0: np.ndarray  # (X, Y)
    o1: np.ndarray  # (X, X, Y)
    mu0: np.ndarray  # (X,)
    points: np.ndarray  # (X,) state coordinates on a line, for W1

    def __post_init__(self):
        nx, nu = self.p0.shape[0], self.p0.shape[1]
        ny = self.o0.shape[1]
        if self.p0.shape != (nx, nu, nx) or self.p1.shape != (nx, nx, nu, nx):
            raise ValueError("transition tensors have inconsistent shapes")
        if self.o0.shape != (nx, ny) or self.o1.shape != (nx, nx, ny):
            raise ValueError("observation tensors have inconsistent shapes")
        if nx > 10:
            raise ValueError("finite systems are limited to 10 states")
        check_mean_field(self.mu0)
        for j in range(nx):
            _check_stochastic(self.p0 + self.p1[j], "transition kernel")
            _check_stochastic(self.o0 + self.o1[j], "observation kernel")

    @property
    def n_states(self) -> int:
        return self.p0.shape[0]

    @property
    def n_actions(self) -> int:
        return self.p0.shape[1]

    @property
    def n_obs(self) -> int:
        return self.o0.shape[1]

    def transition(self, mu: np.ndarray) -> np.ndarray:
        """(..., X, U, X') kernel at mean field(s) ``mu`` of shape (..., X)."""
        return self.p0 + np.tensordot(mu, self.p1, axes=([-1], [0]))

    def observation(self, mu: np.ndarray) -> np.ndarray:
        return self.o0 + np.tensordot(mu, self.o1, axes=([-1], [0]))

    def reward(self, mu: np.ndarray) -> float:
        # reward for concentrating mass on the last state
        return float(mu[-1])


def toy_system() -> FiniteSystem:
    """The bundled 3-state / 2-observation / 2-action system.

    Action 0 tends to stay, action 1 tends to move one state right (cyclic).
    Crowding disturbs the intended move: mass mu_j on state j shifts up to
    0.375 of the target probability onto the other two states.  The
    observation is a noisy "am I in a crowded state" bit.
    """
    nx, nu = 3, 2
    p0 = np.zeros((nx, nu, nx))
    for x in range(nx):
        p0[x, 0] = [0.1, 0.1, 0.1]
        p0[x, 0, x] = 0.8
        p0[x, 1] = [0.1, 0.1, 0.1]
        p0[x, 1, (x + 1) % nx] = 0.8
    p1 = np.zeros((nx, nx, nu, nx))
    for j in range(nx):
        for u in range(nu):
            target = (j + u) % nx
            p1[j, j, u] += 0.125
            p1[j, j, u, target] -= 0.375
    # |P(mu) - P(nu)|_1 <= 0.625 |mu - nu|_1 per row, so the kernel is 1-Lipschitz in L1
    o0 = np.array([[0.8, 0.2], [0.5, 0.5], [0.2, 0.8]])
    o1 = np.zeros((nx, nx, 2))
    for j in range(nx):
        o1[j, j] = [-0.15, 0.15]
    mu0 = np.array([0.5, 0.3, 0.2])
    return FiniteSystem(p0, p1, o0, o1, mu0, points=np.arange(nx, dtype=float))


def random_system(rng: np.random.Generator, nx: int = 3, ny: int = 2, nu: int = 2,
                  mix: float = 0.5) -> FiniteSystem:
    """Random system whose kernels interpolate between stochastic vertex kernels."""
    base = rng.dirichlet(np.ones(nx), size=(nx, nu))
    vert = rng.dirichlet(np.ones(nx), size=(nx, nx, nu))
    p1 = mix * (vert - base[None])
    p0 = base.copy()
    obase = rng.dirichlet(np.ones(ny), size=nx)
    overt = rng.dirichlet(np.ones(ny), size=(nx, nx))
    o1 = mix * (overt - obase[None])
    return FiniteSystem(p0, p1, obase, o1, rng.dirichlet(np.ones(nx)), np.arange(nx, dtype=float))


# ---------------------------------------------------------------------------
# limit dynamics
# ---------------------------------------------------------------------------


def check_lower_policy(sys: FiniteSystem, pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (sys.n_obs, sys.n_actions):
        raise ValueError(f"lower policy must have shape ({sys.n_obs}, {sys.n_actions})")
    _check_stochastic(pi, "lower policy")
    return pi


def limit_step(sys: FiniteSystem, mu, pi) -> np.ndarray:
    """mu'(x') = sum_{x,y,u} P(x'|x,u,mu) pi(u|y) P^y(y|x,mu) mu(x)."""
    mu = check_mean_field(mu)
    pi = check_lower_policy(sys, pi)
    out = np.einsum("xuz,yu,xy,x->z", sys.transition(mu), pi, sys.observation(mu), mu)
    out[(out < 0) & (out >= -1e-15)] = 0.0
    return out


def limit_step_bruteforce(sys: FiniteSystem, mu, pi) -> np.ndarray:
    """Reference implementation: enumerate every (x, y, u, x') tuple."""
    mu = np.asarray(mu, dtype=float)
    pi = np.asarray(pi, dtype=float)
    nx, ny, nu = sys.n_states, sys.n_obs, sys.n_actions
    out = np.zeros(nx)
    for z in range(nx):
        terms = []
        for x in range(nx):
            for y in range(ny):
                for u in range(nu):
                    p = sys.p0[x, u, z] + math.fsum(mu[j] * sys.p1[j, x, u, z] for j in range(nx))
                    o = sys.o0[x, y] + math.fsum(mu[j] * sys.o1[j, x, y] for j in range(nx))
                    terms.append(p * pi[y, u] * o * mu[x])
        out[z] = math.fsum(terms)
    return out


PolicySource = Sequence[np.ndarray] | Callable[[int, np.ndarray], np.ndarray]


def _policy_at(policies: PolicySource, t: int, mu: np.ndarray) -> np.ndarray:
    return policies(t, mu) if callable(policies) else policies[t]


def limit_trajectory(sys: FiniteSystem, policies: PolicySource, horizon: int,
                     mu0: np.ndarray | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Deterministic (horizon+1, X) trajectory and the lower policies actually applied.

    ``policies`` is either a sequence (open loop) or ``f(t, mu) -> pi`` (closed loop).
    """
    mu = check_mean_field(sys.mu0 if mu0 is None else mu0)
    traj, used = [mu], []
    for t in range(horizon):
        pi = _policy_at(policies, t, mu)
        used.append(np.array(pi, dtype=float))
        mu = limit_step(sys, mu, pi)
        traj.append(mu)
    return np.array(traj), used


# ---------------------------------------------------------------------------
# finite-N system
# ---------------------------------------------------------------------------


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` (inverse CDF)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.uniform(size=probs.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((u >= cdf).sum(axis=-1), probs.shape[-1] - 1)


def _empirical(states: np.ndarray, nx: int) -> np.ndarray:
    # states: (R, N) -> (R, X)
    r, n = states.shape
    flat = states + nx * np.arange(r)[:, None]
    return np.bincount(flat.ravel(), minlength=r * nx).reshape(r, nx) / n


def empirical_rollout(sys: FiniteSystem, n_agents: int, policies: PolicySource, horizon: int,
                      rng: np.random.Generator, replications: int = 1,
                      initial_states: np.ndarray | None = None) -> np.ndarray:
    """Simulate ``replications`` independent N-agent systems.

    Returns the empirical mean fields, shape (replications, horizon+1, X).
    Agents start i.i.d. from mu0 unless ``initial_states`` (N,) is given.
    Closed-loop policies see each replication's own empirical mean field.
    """
    if n_agents < 1:
        raise ValueError("need at least one agent")
    nx = sys.n_states
    if initial_states is None:
        states = _sample_rows(np.broadcast_to(sys.mu0, (replications, n_agents, nx)), rng)
    else:
        states = np.broadcast_to(np.asarray(initial_states, dtype=np.int64), (replications, n_agents)).copy()
    rows = np.arange(replications)[:, None]
    out = np.empty((replications, horizon + 1, nx))
    mu = _empirical(states, nx)
    out[:, 0] = mu
    for t in range(horizon):
        if callable(policies):
            pis = np.array([check_lower_policy(sys, policies(t, m)) for m in mu])
        else:
            pis = np.broadcast_to(check_lower_policy(sys, policies[t]), (replications, sys.n_obs, sys.n_actions))
        obs_k = sys.observation(mu)  # (R, X, Y)
        y = _sample_rows(obs_k[rows, states], rng)
        u = _sample_rows(pis[rows, y], rng)
        trans = sys.transition(mu)  # (R, X, U, X)
        states = _sample_rows(trans[rows, states, u], rng)
        mu = _empirical(states, nx)
        out[:, t + 1] = mu
    return out


# ---------------------------------------------------------------------------
# Wasserstein-1
# ---------------------------------------------------------------------------


def w1_finite(mu, nu, cost: np.ndarray) -> float:
    """Optimal transport cost between two distributions on the same finite support."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    n = mu.size
    if nu.size != n or cost.shape != (n, n):
        raise ValueError("supports and cost matrix must match")
    # coupling pi (n x n), row sums mu, column sums nu
    a_eq = np.zeros((2 * n, n * n))
    for i in range(n):
        a_eq[i, i * n:(i + 1) * n] = 1.0
        a_eq[n + i, i::n] = 1.0
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.r_[mu, nu], bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def w1_line(mu, nu, points) -> np.ndarray:
    """W1 for distributions on sorted points of the real line (CDF formula).

    Broadcasts over leading axes of ``mu`` and ``nu``.
    """
    gaps = np.diff(np.asarray(points, dtype=float))
    diff = np.cumsum(np.asarray(mu) - np.asarray(nu), axis=-1)[..., :-1]
    return np.sum(np.abs(diff) * gaps, axis=-1)


def line_cost(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return np.abs(p[:, None] - p[None, :])


# ---------------------------------------------------------------------------
# propagation of chaos
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChaosRow:
    n: int
    t: int
    replication_count: int
    mean_l1: float
    mean_w1: float
    stderr: float


def default_policies(sys: FiniteSystem, horizon: int) -> list[np.ndarray]:
    """A fixed time-varying open-loop sequence used by the sweep."""
    out = []
    for t in range(horizon):
        a = 0.5 + 0.4 * math.sin(0.7 * t)
        pi = np.empty((sys.n_obs, sys.n_actions))
        pi[:, 0] = np.linspace(a, 1.0 - a, sys.n_obs) if sys.n_obs > 1 else a
        pi[:, 1:] = (1.0 - pi[:, :1]) / (sys.n_actions - 1)
        out.append(pi)
    return out


def chaos_sweep(sys: FiniteSystem, policies: PolicySource, ns: Sequence[int], horizon: int,
                replications: int, rng: np.random.Generator,
                chunk_agents: int = 2_000_000) -> list[ChaosRow]:
    """Mean L1 / W1 distance between mu^N_t and mu_t for each N and t.

    Replications run in chunks of at most ``chunk_agents`` simulated agents.
    """
    if list(ns) != sorted(ns):
        raise ValueError("agent counts must be sorted ascending")
    limit, _ = limit_trajectory(sys, policies, horizon)
    rows = []
    for n in ns:
        per_chunk = max(1, chunk_agents // n)
        parts = []
        done = 0
        while done < replications:
            k = min(per_chunk, replications - done)
            parts.append(empirical_rollout(sys, n, policies, horizon, rng, replications=k))
            done += k
        emp = np.concatenate(parts)  # (R, T+1, X)
        l1 = np.abs(emp - limit[None]).sum(axis=-1)
        w1 = w1_line(emp, limit[None], sys.points)
        for t in range(horizon + 1):
            se = float(np.std(l1[:, t], ddof=1) / math.sqrt(replications)) if replications > 1 else math.nan
            rows.append(ChaosRow(n, t, replications, float(l1[:, t].mean()), float(w1[:, t].mean()), se))
    return rows


def chaos_slope(rows: Sequence[ChaosRow]) -> float:
    """Least-squares slope of log(mean L1, averaged over t) against log N."""
    ns = sorted({r.n for r in rows})
    dev = [np.mean([r.mean_l1 for r in rows if r.n == n]) for n in ns]
    return float(stats.linregress(np.log(ns), np.log(dev)).slope)


def write_chaos_csv(rows: Sequence[ChaosRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHAOS_COLUMNS)
        for r in rows:
            w.writerow([r.n, r.t, r.replication_count, repr(r.mean_l1), repr(r.mean_w1), repr(r.stderr)])
