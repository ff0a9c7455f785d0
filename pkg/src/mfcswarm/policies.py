"""Upper-level (mean field -> xi) and lower-level (observation -> action) policies.

The lower level is a kernel mixture over observation anchors y_b,

    pi(u | y) = sum_b k(y_b, y) p_b(u) / sum_b k(y_b, y),

where the per-anchor distributions p_b are affine images of the parameter
vector xi in [-1, 1]^k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import nn
from .envs import EnvConfig
from .features import grid_anchors, partition_centers

EPS = 1e-10 / 4
ACTIONS3 = np.array([-1.0, 0.0, 1.0])


@dataclass(frozen=True)
class XiSpec:
    """Parametrisation of lower-level policies.

    kind:
        ``discrete3`` -- probabilities over {-1, 0, 1};
        ``gaussian``  -- per-dimension action mean and std (action_dim dims).
    shared:
        one parameter block for all anchors instead of one per anchor.
    velocity_control:
        discrete3 only; one extra component per block gives a speed in [0, 1].
    obs_mode:
        ``rbf`` kernel mixture or ``histogram`` (indicator of the containing cell).
    """

    kind: str
    anchors: np.ndarray
    bandwidths: np.ndarray
    action_dim: int = 1
    shared: bool = False
    velocity_control: bool = False
    obs_mode: str = "rbf"
    points_per_axis: int = 5
    obs_low: np.ndarray | None = None
    obs_high: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("discrete3", "gaussian"):
            raise ValueError("xi kind must be discrete3 or gaussian")
        if self.obs_mode not in ("rbf", "histogram"):
            raise ValueError("obs_mode must be rbf or histogram")
        if np.any(np.asarray(self.bandwidths) <= 0):
            raise ValueError("observation bandwidths must be > 0")
        if self.velocity_control and self.kind != "discrete3":
            raise ValueError("velocity control is only defined for discrete3")

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    @property
    def block(self) -> int:
        if self.kind == "discrete3":
            return 3 + int(self.velocity_control)
        return 2 * self.action_dim

    @property
    def dim(self) -> int:
        return self.block * (1 if self.shared else self.n_anchors)


def make_xi_spec(env: EnvConfig, points_per_axis: int = 5, per_axis: bool = False,
                 shared: bool = False, obs_mode: str = "rbf", scale: float | None = None) -> XiSpec:
    """Default observation anchors/bandwidths for an environment."""
    if env.env == "aggregation":
        c = 0.75 if scale is None else scale
        anchors = grid_anchors(env.space, points_per_axis, c, per_axis=per_axis, dim=env.dim)
        bw = np.full(env.dim, 0.12 * c)
        return XiSpec("gaussian", anchors, bw, action_dim=env.dim, shared=shared, obs_mode=obs_mode,
                      points_per_axis=points_per_axis,
                      obs_low=np.full(env.dim, -1.0), obs_high=np.full(env.dim, 1.0))
    c = 0.1 if scale is None else scale
    low, high = np.array([0.0, -math.pi]), np.array([1.0, math.pi])
    # centres of the (magnitude, angle) partition, shrunk towards zero by c
    axes = [partition_centers(points_per_axis, lo, hi) for lo, hi in zip(low, high)]
    if per_axis:
        anchors = np.zeros((2 * points_per_axis, 2))
        anchors[:points_per_axis, 0] = axes[0]
        anchors[points_per_axis:, 1] = axes[1]
    else:
        anchors = np.array(list(product(*axes)))
    bw = np.array([0.06 * c, 0.12 * math.pi * c])
    return XiSpec("discrete3", c * anchors, bw, action_dim=1, shared=shared,
                  velocity_control=env.velocity_control, obs_mode=obs_mode,
                  points_per_axis=points_per_axis, obs_low=low, obs_high=high)


@dataclass(frozen=True)
class LowerPolicy:
    spec: XiSpec
    probs: np.ndarray | None = None  # (M, 3) for discrete3
    means: np.ndarray | None = None  # (M, d) for gaussian
    stds: np.ndarray | None = None
    speeds: np.ndarray | None = None  # (M,) for velocity control


def _affine(xi, lo, hi):
    return lo + (np.asarray(xi) + 1.0) * 0.5 * (hi - lo)


def lower_from_xi(xi, spec: XiSpec) -> LowerPolicy:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (spec.dim,):
        raise ValueError(f"xi must have shape ({spec.dim},), got {xi.shape}")
    if not np.all(np.isfinite(xi)) or np.any(np.abs(xi) > 1.0 + 1e-12):
        raise ValueError("xi outside [-1, 1]^k")
    blocks = xi.reshape(-1, spec.block)
    if spec.shared:
        blocks = np.broadcast_to(blocks, (spec.n_anchors, spec.block))
    if spec.kind == "discrete3":
        raw = _affine(blocks[:, :3], EPS, 0.5 + EPS)
        probs = raw / raw.sum(axis=1, keepdims=True)
        speeds = _affine(blocks[:, 3], 0.0, 1.0) if spec.velocity_control else None
        return LowerPolicy(spec, probs=probs, speeds=speeds)
    d = spec.action_dim
    means = _affine(blocks[:, :d], -1.0, 1.0)
    stds = _affine(blocks[:, d:], EPS, 0.5 + EPS)
    return LowerPolicy(spec, means=means, stds=stds)


def _histogram_cell(spec: XiSpec, y: np.ndarray) -> np.ndarray:
    k = spec.points_per_axis
    u = (y - spec.obs_low) / (spec.obs_high - spec.obs_low)
    cells = np.clip(np.floor(u * k), 0, k - 1).astype(np.int64)
    strides = k ** np.arange(cells.shape[1] - 1, -1, -1)
    return cells @ strides


def mixture_weights(spec: XiSpec, y: np.ndarray) -> np.ndarray:
    """(N, M) normalised anchor weights.

    The normalised RBF weights are a softmax of -|y - y_b|^2 / 2 sigma^2; it is
    evaluated with the max subtracted so that observations far from every
    anchor do not underflow to 0/0.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if spec.obs_mode == "histogram":
        w = np.zeros((y.shape[0], spec.n_anchors))
        w[np.arange(y.shape[0]), _histogram_cell(spec, y)] = 1.0
        return w
    diff = (y[:, None, :] - spec.anchors[None, :, :]) / spec.bandwidths
    logits = -0.5 * np.sum(diff * diff, axis=-1)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def action_distribution(policy: LowerPolicy, y: np.ndarray) -> np.ndarray:
    """(N, 3) probabilities over {-1, 0, 1} (discrete3 only)."""
    return mixture_weights(policy.spec, y) @ policy.probs


def act(policy: LowerPolicy, y: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Sample one action per observation row; also return mean |u| over agents."""
    spec = policy.spec
    w = mixture_weights(spec, y)
    n = w.shape[0]
    if spec.kind == "discrete3":
        p = w @ policy.probs
        cdf = np.cumsum(p, axis=1)
        u = rng.uniform(size=(n, 1)) * cdf[:, -1:]
        idx = np.minimum((u >= cdf).sum(axis=1), 2)
        turn = ACTIONS3[idx]
        if spec.velocity_control:
            actions = np.stack([turn, w @ policy.speeds], axis=1)
        else:
            actions = turn[:, None]
        return actions, float(np.mean(np.abs(turn)))
    # mixture of Gaussians: draw a component per agent, then the action
    cdf = np.cumsum(w, axis=1)
    u = rng.uniform(size=(n, 1)) * cdf[:, -1:]
    comp = np.minimum((u >= cdf).sum(axis=1), spec.n_anchors - 1)
    a = policy.means[comp] + policy.stds[comp] * rng.normal(size=(n, spec.action_dim))
    a = np.clip(a, -1.0, 1.0)
    norm = np.sqrt(np.sum(a * a, axis=1))
    cost = np.sum(np.abs(a / np.maximum(1.0, norm)[:, None]), axis=1)
    return a, float(np.mean(cost))


# ---------------------------------------------------------------------------
# upper level
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UpperSample:
    xi: np.ndarray  # clamped into [-1, 1]^k
    xi_raw: np.ndarray  # pre-clamp Gaussian draw
    logprob: float
    head: nn.GaussianHead


def upper_head(net: nn.Mlp, features: np.ndarray) -> nn.GaussianHead:
    out, _ = nn.forward(net, features)
    head, _ = nn.split_head(out)
    return head


def upper_act(net: nn.Mlp, features: np.ndarray, rng: np.random.Generator | None,
              greedy: bool = False) -> UpperSample:
    """One xi for the whole swarm.  ``greedy`` returns the Gaussian mean."""
    head = upper_head(net, features)
    raw = head.mean.copy() if greedy else nn.gaussian_sample(head, rng)
    logp = float(nn.gaussian_logprob(head, raw))
    return UpperSample(np.clip(raw, -1.0, 1.0), raw, logp, head)


# ---------------------------------------------------------------------------
# Lipschitz bandwidth condition for RBF mixtures
# ---------------------------------------------------------------------------


def bandwidth_lhs(sigma2: float, diam_y: float) -> float:
    return sigma2 * math.exp(-diam_y * diam_y / sigma2) if sigma2 > 0 else 0.0


def bandwidth_rhs(diam_y: float, diam_u: float, max_y_norm: float, lipschitz: float) -> float:
    return diam_y * diam_u * max_y_norm / lipschitz


def check_bandwidth(sigma2: float, diam_y: float, diam_u: float, max_y_norm: float,
                    lipschitz: float) -> bool:
    """sigma^2 exp^2(-diam_Y^2 / 2 sigma^2) >= diam_Y diam_U max|y| / L."""
    return bandwidth_lhs(sigma2, diam_y) >= bandwidth_rhs(diam_y, diam_u, max_y_norm, lipschitz)


def min_bandwidth(diam_y: float, diam_u: float, max_y_norm: float, lipschitz: float,
                  rel_tol: float = 1e-12) -> float:
    """Smallest sigma^2 passing :func:`check_bandwidth`, by bisection.

    The left side s * exp(-a / s) is strictly increasing in s and unbounded,
    so the bracket can be grown until it holds.  Returns the satisfying end
    of the final bracket.
    """
    args = (diam_y, diam_u, max_y_norm, lipschitz)
    if min(args) <= 0:
        raise ValueError("all arguments must be > 0")
    hi = 1.0
    while not check_bandwidth(hi, *args):
        hi *= 2.0
    lo = hi / 2.0
    while check_bandwidth(lo, *args) and lo > 1e-300:
        hi, lo = lo, lo / 2.0
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if check_bandwidth(mid, *args):
            hi = mid
        else:
            lo = mid
    return hi


def w1_three_point(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Exact W1 between distributions on {-1, 0, 1} (unit spacing)."""
    cp = np.cumsum(p, axis=-1)[..., :2]
    cq = np.cumsum(q, axis=-1)[..., :2]
    return np.sum(np.abs(cp - cq), axis=-1)


def isotropic_spec(anchors: np.ndarray, sigma2: float, shared: bool = False) -> XiSpec:
    """Discrete3 spec with one isotropic bandwidth on a Euclidean observation space."""
    bw = np.full(anchors.shape[1], math.sqrt(sigma2))
    return XiSpec("discrete3", anchors, bw, shared=shared)

