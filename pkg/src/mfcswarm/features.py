"""Fixed-length featurisation of the empirical mean field.

Two modes:

``rbf``
    I_b = (1/N) sum_i k(x_b, x_i) with a product RBF kernel: manifold distance
    on positions, circular distance on headings, one bandwidth per block.
``histogram``
    fraction of agents in each cell of an equisized partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

from . import manifolds as mf
from .envs import EnvConfig, SwarmState
from .manifolds import Manifold

TWO_PI = 2.0 * np.pi


def partition_centers(points_per_axis: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Centres of an equisized partition of [lo, hi] into ``points_per_axis`` cells."""
    if points_per_axis < 1:
        raise ValueError("points_per_axis must be >= 1")
    width = (hi - lo) / points_per_axis
    return lo + width * (np.arange(points_per_axis) + 0.5)


def grid_anchors(kind: Manifold | str, points_per_axis: int, scale: float = 1.0,
                 per_axis: bool = False, dim: int | None = None) -> np.ndarray:
    """Anchor points on [-1, 1]^d.

    Full grid gives k^d anchors.  ``per_axis`` instead places the k centres on
    each coordinate axis (other coordinates zero), giving k * d anchors.
    """
    m = mf.as_manifold(kind, dim or 2)
    d = m.dim if dim is None else dim
    c = partition_centers(points_per_axis)
    if per_axis:
        pts = np.zeros((points_per_axis * d, d))
        for axis in range(d):
            pts[axis * points_per_axis:(axis + 1) * points_per_axis, axis] = c
    else:
        pts = np.array(list(product(c, repeat=d)), dtype=float).reshape(-1, d)
    return scale * pts


@dataclass(frozen=True)
class FeatureSpec:
    """Anchors and bandwidths for the mean-field features.

    ``anchors`` has shape (M, d_pos + has_angle); the angle column (if any) is
    last.  ``time_feature`` appends t / T.
    """

    mode: str
    anchors: np.ndarray
    sigma_pos: float
    sigma_angle: float | None
    points_per_axis: int
    has_angle: bool
    per_axis: bool = False
    time_feature: bool = True

    def __post_init__(self):
        if self.mode not in ("rbf", "histogram"):
            raise ValueError("feature mode must be 'rbf' or 'histogram'")
        if self.anchors.shape[0] < 1:
            raise ValueError("need at least one anchor")
        if not self.sigma_pos > 0 or (self.has_angle and not self.sigma_angle > 0):
            raise ValueError("bandwidths must be > 0")
        if self.mode == "histogram" and self.per_axis:
            raise ValueError("histograms partition the full grid; per_axis is rbf-only")

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    @property
    def size(self) -> int:
        return self.n_anchors + int(self.time_feature)

    @cached_property
    def anchor_blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray | None]:
        """Distinct position rows / angles of the anchors and the inverse maps."""
        d_pos = self.anchors.shape[1] - int(self.has_angle)
        pos, inv_pos = np.unique(self.anchors[:, :d_pos], axis=0, return_inverse=True)
        if not self.has_angle:
            return pos, inv_pos.ravel(), None, None
        ang, inv_ang = np.unique(self.anchors[:, d_pos], return_inverse=True)
        return pos, inv_pos.ravel(), ang, inv_ang.ravel()


def make_feature_spec(env: EnvConfig, mode: str = "rbf", points_per_axis: int = 5,
                      per_axis: bool = False, scale: float = 1.0,
                      sigma_pos_mult: float = 1.0, sigma_angle_mult: float = 1.0,
                      time_feature: bool = True) -> FeatureSpec:
    """Default anchors and bandwidths for an environment."""
    d = env.dim
    pos = grid_anchors(env.space, points_per_axis, scale, per_axis=per_axis, dim=d)
    if env.has_headings:
        ang = partition_centers(points_per_axis, 0.0, TWO_PI)
        anchors = np.array([np.r_[p, a] for p in pos for a in ang])
        sigma_pos = 0.12 / math.sqrt(2.0)
        sigma_ang = 0.12 * math.pi
    else:
        anchors = pos
        sigma_pos = 0.12 / math.sqrt(pos.shape[0])
        sigma_ang = None
    return FeatureSpec(
        mode=mode,
        anchors=anchors,
        sigma_pos=sigma_pos * sigma_pos_mult,
        sigma_angle=None if sigma_ang is None else sigma_ang * sigma_angle_mult,
        points_per_axis=points_per_axis,
        has_angle=env.has_headings,
        per_axis=per_axis,
        time_feature=time_feature,
    )


def circular_distance(a, b) -> np.ndarray:
    d = np.abs(np.mod(np.asarray(a) - np.asarray(b), TWO_PI))
    return np.minimum(d, TWO_PI - d)


def _canonical_mean(values: np.ndarray, axis: int) -> np.ndarray:
    # summing a sorted copy makes the result independent of agent order
    return np.sort(values, axis=axis).sum(axis=axis) / values.shape[axis]


def kernel_matrix(spec: FeatureSpec, kind: Manifold, positions: np.ndarray,
                  headings: np.ndarray | None) -> np.ndarray:
    """(M, N) kernel values k(x_b, x_i)."""
    # distances are evaluated once per distinct anchor coordinate block
    anchor_pos, inv_pos, anchor_ang, inv_ang = spec.anchor_blocks
    dpos = mf.pairwise_distance(kind, anchor_pos, positions)
    log_k = (-(dpos * dpos) / (2.0 * spec.sigma_pos**2))[inv_pos]
    if spec.has_angle:
        dang = circular_distance(anchor_ang[:, None], headings[None, :])
        log_k = log_k - ((dang * dang) / (2.0 * spec.sigma_angle**2))[inv_ang]
    return np.exp(log_k)


def histogram_indices(spec: FeatureSpec, positions: np.ndarray, headings: np.ndarray | None) -> np.ndarray:
    k = spec.points_per_axis
    cells = np.clip(np.floor((positions + 1.0) / 2.0 * k), 0, k - 1).astype(np.int64)
    if spec.has_angle:
        a = np.clip(np.floor(np.mod(headings, TWO_PI) / TWO_PI * k), 0, k - 1).astype(np.int64)
        cells = np.concatenate([cells, a[:, None]], axis=1)
    # row-major over (pos_1, ..., pos_d, angle), matching grid_anchors ordering
    strides = k ** np.arange(cells.shape[1] - 1, -1, -1)
    return cells @ strides


def featurize(state: SwarmState, spec: FeatureSpec, kind: Manifold, horizon: int | None = None) -> np.ndarray:
    """Feature vector of the empirical mean field (plus t / T when enabled)."""
    pos = state.positions
    heads = state.headings if spec.has_angle else None
    if spec.has_angle and heads is None:
        raise ValueError("feature spec expects headings")
    n = pos.shape[0]
    if spec.mode == "rbf":
        vals = _canonical_mean(kernel_matrix(spec, kind, pos, heads), axis=1)
    else:
        idx = histogram_indices(spec, pos, heads)
        vals = np.bincount(idx, minlength=spec.n_anchors).astype(float) / n
    if spec.time_feature:
        if horizon is None:
            raise ValueError("time feature needs the episode horizon")
        vals = np.append(vals, state.t / horizon)
    return vals
