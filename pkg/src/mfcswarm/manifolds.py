"""Flat quotient manifolds on the square [-1, 1]^2 (plus the d-dimensional box).

Every non-box manifold is the square with some of its edges glued together.
An identification is encoded as a set of *images*: a point ``b`` has images
``s * b + 2 t`` for shifts ``t`` in {-1, 0, 1}^2 and a sign vector ``s`` that
depends on which edges were crossed.  Distances are the minimum Euclidean
distance over all images; this is the inherited flat metric.

Gluing conventions (x = first coordinate, y = second coordinate):

* torus:            x and y periodic, no flips
* moebius:          y periodic with x -> -x, x-edges are free boundaries
* projective plane: y crossing flips x, x crossing flips y
* klein bottle:     x periodic, y crossing flips x
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

KINDS = ("box", "torus", "moebius", "projective", "klein")

_EPS_DOMAIN = 1e-12


@dataclass(frozen=True)
class Manifold:
    """A manifold tag. ``dim`` is only free for the box; the rest are 2D."""

    kind: str = "torus"
    dim: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown manifold kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "box":
            if self.dim < 1:
                raise ValueError("box dimension must be >= 1")
        elif self.dim != 2:
            raise ValueError(f"{self.kind} is two-dimensional, got dim={self.dim}")


def as_manifold(kind: Manifold | str, dim: int = 2) -> Manifold:
    if isinstance(kind, Manifold):
        return kind
    return Manifold(kind, dim)


@dataclass(frozen=True)
class WrapResult:
    """Outcome of re-entering the fundamental domain.

    ``negated`` records per axis whether that coordinate was negated an odd
    number of times by the gluing.  A heading is reflected exactly when one
    (and only one) axis was negated.
    """

    position: np.ndarray
    negated: np.ndarray

    @property
    def heading_flip(self) -> np.ndarray | bool:
        if self.negated.shape[-1] < 2:
            flip = np.zeros(self.negated.shape[:-1], dtype=bool)
        else:
            flip = self.negated[..., 0] ^ self.negated[..., 1]
        return bool(flip) if flip.ndim == 0 else flip


def _image_table(m: Manifold) -> tuple[np.ndarray, np.ndarray]:
    """Sign vectors and offsets of all images considered by ``distance``."""
    if m.kind == "box":
        return np.ones((1, m.dim)), np.zeros((1, m.dim))
    signs, offsets = [], []
    for t1, t2 in product((-1, 0, 1), repeat=2):
        if m.kind == "torus":
            s = (1.0, 1.0)
        elif m.kind == "moebius":
            if t1 != 0:
                continue
            s = (-1.0 if t2 != 0 else 1.0, 1.0)
        elif m.kind == "projective":
            s = (-1.0 if t2 != 0 else 1.0, -1.0 if t1 != 0 else 1.0)
        else:  # klein
            s = (-1.0 if t2 != 0 else 1.0, 1.0)
        signs.append(s)
        offsets.append((2.0 * t1, 2.0 * t2))
    return np.array(signs), np.array(offsets)


_TABLES: dict[Manifold, tuple[np.ndarray, np.ndarray]] = {}


def image_table(kind: Manifold | str) -> tuple[np.ndarray, np.ndarray]:
    m = as_manifold(kind)
    if m not in _TABLES:
        _TABLES[m] = _image_table(m)
    return _TABLES[m]


def images(kind: Manifold | str, b: np.ndarray) -> np.ndarray:
    """All images of points ``b`` (..., d) -> (..., n_images, d)."""
    signs, offsets = image_table(kind)
    b = np.asarray(b, dtype=float)
    return b[..., None, :] * signs + offsets


def _check_domain(p: np.ndarray) -> None:
    if np.any(np.abs(p) > 1.0 + _EPS_DOMAIN) or not np.all(np.isfinite(p)):
        raise ValueError("point outside [-1, 1]^d; wrap positions before measuring distances")


def euclid(diff: np.ndarray) -> np.ndarray:
    """Euclidean norm over the last axis.  Shared by every distance path so
    neighbor searches compare bit-identical values."""
    return np.sqrt(squared_norm(diff))


def squared_norm(diff: np.ndarray) -> np.ndarray:
    # left-to-right accumulation, the same order numpy uses for short rows
    s = diff[..., 0] * diff[..., 0]
    for j in range(1, diff.shape[-1]):
        s = s + diff[..., j] * diff[..., j]
    return s


def distance(kind: Manifold | str, a, b) -> np.ndarray | float:
    """Quotient distance between ``a`` and ``b`` (broadcast over leading axes)."""
    m = as_manifold(kind, np.shape(a)[-1])
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_domain(a)
    _check_domain(b)
    d = euclid(a[..., None, :] - images(m, b)).min(axis=-1)
    return float(d) if d.ndim == 0 else d


def pairwise_distance(kind: Manifold | str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, d) x (m, d) -> (n, m) distance matrix."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = as_manifold(kind, a.shape[-1])
    _check_domain(a)
    _check_domain(b)
    imgs = images(m, b)  # (m, k, d)
    sq = None
    for j in range(a.shape[-1]):
        dj = a[:, None, None, j] - imgs[None, :, :, j]
        sq = dj * dj if sq is None else sq + dj * dj
    # sqrt is monotone, so minimising squared distances first is exact
    return np.sqrt(sq.min(axis=-1))


def _wrap_axis(x, other, flip_other, neg_other):
    """Periodic wrap of one coordinate; optionally negates the other axis."""
    hi = x > 1.0
    lo = x < -1.0
    crossed = hi | lo
    x = np.where(hi, x - 2.0, np.where(lo, x + 2.0, x))
    if flip_other:
        other = np.where(crossed, -other, other)
        neg_other = neg_other ^ crossed
    return x, other, neg_other


def wrap(kind: Manifold | str, raw_position) -> WrapResult:
    """Map a raw position (|coord| < 3) back into the fundamental domain.

    In-domain coordinates are returned bit-unchanged.
    """
    p = np.array(raw_position, dtype=float)
    m = as_manifold(kind, p.shape[-1])
    if np.any(np.abs(p) >= 3.0):
        raise ValueError("raw position more than one period outside the domain")
    negated = np.zeros(p.shape, dtype=bool)
    if m.kind == "box":
        return WrapResult(np.clip(p, -1.0, 1.0), negated)

    x, y = p[..., 0], p[..., 1]
    nx, ny = negated[..., 0], negated[..., 1]
    if m.kind == "torus":
        x, y, ny = _wrap_axis(x, y, False, ny)
        y, x, nx = _wrap_axis(y, x, False, nx)
    elif m.kind == "moebius":
        x = np.clip(x, -1.0, 1.0)
        y, x, nx = _wrap_axis(y, x, True, nx)
    elif m.kind == "projective":
        x, y, ny = _wrap_axis(x, y, True, ny)
        y, x, nx = _wrap_axis(y, x, True, nx)
    else:  # klein
        x, y, ny = _wrap_axis(x, y, False, ny)
        y, x, nx = _wrap_axis(y, x, True, nx)
    pos = np.stack([x, y], axis=-1)
    neg = np.stack([nx, ny], axis=-1)
    return WrapResult(pos, neg)


def reflect_heading(phi, negated: np.ndarray) -> np.ndarray:
    """Transform headings (velocity = (sin phi, cos phi)) under axis negations.

    Negating x maps phi -> -phi, negating y maps phi -> pi - phi; both give a
    rotation by pi.  Result reduced to [0, 2 pi).
    """
    phi = np.asarray(phi, dtype=float)
    nx = negated[..., 0]
    ny = negated[..., 1] if negated.shape[-1] > 1 else np.zeros_like(nx)
    out = np.where(nx & ~ny, -phi, phi)
    out = np.where(ny & ~nx, np.pi - phi, out)
    out = np.where(nx & ny, phi + np.pi, out)
    return np.mod(out, 2.0 * np.pi)


def embed3d(kind: Manifold | str, p) -> np.ndarray:
    """Visualisation embedding of [-1, 1]^2 into R^3 (not defined for the box)."""
    m = as_manifold(kind)
    if m.kind == "box":
        raise ValueError("the box has no 3D embedding")
    p = np.asarray(p, dtype=float)
    x, y = p[..., 0], p[..., 1]
    if m.kind in ("torus", "klein"):
        r = 2.0 + 0.75 * np.cos(np.pi * (x + 1.0))
        X = r * np.cos(np.pi * (y + 1.0))
        Y = r * np.sin(np.pi * (y + 1.0))
        Z = 0.75 * np.sin(np.pi * (x + 1.0))
        if m.kind == "klein":
            Z = Z * np.cos(0.5 * np.pi * (y + 1.0))
    elif m.kind == "moebius":
        r = 1.0 + 0.5 * x * np.cos(0.5 * np.pi * (y + 1.0))
        X = r * np.cos(np.pi * (y + 1.0))
        Y = r * np.sin(np.pi * (y + 1.0))
        Z = 0.5 * x * np.sin(0.5 * np.pi * (y + 1.0))
    else:
        # Boy's surface (Bryant-Kusner parametrisation of the unit disk)
        z = 0.5 * (x + 1.0) * np.exp(1j * np.pi * (y + 1.0))
        z3 = z**3
        z6 = z3 * z3
        den = z6 + np.sqrt(5.0) * z3 - 1.0
        g1 = -1.5 * np.imag(z * (1.0 - z**4) / den)
        g2 = -1.5 * np.real(z * (1.0 - z**4) / den)
        g3 = np.imag((1.0 + z6) / den) - 0.5
        g = g1 * g1 + g2 * g2 + g3 * g3
        X, Y, Z = g1 / g, g2 / g, g3 / g
    return np.stack([X, Y, Z], axis=-1)
