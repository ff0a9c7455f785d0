"""Small numpy MLP with hand-written backprop, diagonal Gaussian head and Adam.

Batch-first: inputs are (B, n_in), weights are (n_in, n_out).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"MFCP"
CHECKPOINT_VERSION = 1


@dataclass
class Mlp:
    """Affine layers with tanh between them (``activation=None`` gives a linear net)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str | None = "tanh"

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, flat: list[np.ndarray]) -> None:
        self.weights = [np.array(p, dtype=float) for p in flat[0::2]]
        self.biases = [np.array(p, dtype=float) for p in flat[1::2]]


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_mlp(sizes: list[int], rng: np.random.Generator, out_gain: float = 1.0,
             activation: str | None = "tanh") -> Mlp:
    """Orthogonal weights, zero biases; the last layer is scaled by ``out_gain``."""
    ws, bs = [], []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        gain = out_gain if last else math.sqrt(2.0)
        ws.append(orthogonal(rng, a, b, gain))
        bs.append(np.zeros(b))
    return Mlp(ws, bs, activation)


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return output and the per-layer inputs needed by :func:`backward`."""
    h = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite network input")
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None, :]
    if h.shape[1] != net.weights[0].shape[0]:
        raise ValueError(f"input has {h.shape[1]} features, network expects {net.weights[0].shape[0]}")
    cache = [h]
    n = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < n - 1 and net.activation == "tanh":
            h = np.tanh(h)
        cache.append(h)
    return (h[0] if squeeze else h), cache


def backward(net: Mlp, cache: list[np.ndarray], grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of sum(grad_out * output) w.r.t. [W0, b0, W1, b1, ...] and the input."""
    g = np.asarray(grad_out, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    n = len(net.weights)
    grads: list[np.ndarray] = [None] * (2 * n)  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if i < n - 1 and net.activation == "tanh":
            a = cache[i + 1]
            g = g * (1.0 - a * a)
        grads[2 * i] = cache[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return grads, g


# ---------------------------------------------------------------------------
# diagonal Gaussian head
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianHead:
    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def split_head(out: np.ndarray) -> tuple[GaussianHead, np.ndarray]:
    """Split raw network output into a head; also return d(log_std)/d(raw) mask."""
    k = out.shape[-1] // 2
    raw = out[..., k:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    mask = ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)).astype(float)
    return GaussianHead(out[..., :k], log_std), mask


def gaussian_logprob(head: GaussianHead, xi: np.ndarray) -> np.ndarray:
    z = (xi - head.mean) * np.exp(-head.log_std)
    return np.sum(-0.5 * z * z - head.log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_logprob_grad(head: GaussianHead, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d logprob / d mean and d logprob / d log_std."""
    inv = np.exp(-head.log_std)
    z = (xi - head.mean) * inv
    return z * inv, z * z - 1.0


def gaussian_sample(head: GaussianHead, rng: np.random.Generator) -> np.ndarray:
    return head.mean + head.std * rng.normal(size=np.shape(head.mean))


def gaussian_entropy(head: GaussianHead) -> np.ndarray:
    return np.sum(head.log_std + 0.5 * (LOG_2PI + 1.0), axis=-1)


def gaussian_kl(old: GaussianHead, new: GaussianHead) -> np.ndarray:
    """KL(old || new) for diagonal Gaussians, summed over dimensions."""
    var_ratio = np.exp(2.0 * (old.log_std - new.log_std))
    dm = (old.mean - new.mean) * np.exp(-new.log_std)
    return np.sum(new.log_std - old.log_std + 0.5 * (var_ratio + dm * dm) - 0.5, axis=-1)


def gaussian_kl_grad(old: GaussianHead, new: GaussianHead) -> tuple[np.ndarray, np.ndarray]:
    """d KL(old || new) / d new.mean and d / d new.log_std."""
    inv_var = np.exp(-2.0 * new.log_std)
    dm = new.mean - old.mean
    g_mean = dm * inv_var
    var_ratio = np.exp(2.0 * (old.log_std - new.log_std))
    g_log_std = 1.0 - var_ratio - dm * dm * inv_var
    return g_mean, g_log_std


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out

    def state_arrays(self) -> list[np.ndarray]:
        return [np.array([float(self.t)])] + self.m + self.v

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        self.t = int(arrays[0][0])
        k = len(self.m)
        self.m = [a.copy() for a in arrays[1:1 + k]]
        self.v = [a.copy() for a in arrays[1 + k:1 + 2 * k]]


class Sgd:
    """Plain gradient descent; used to inspect raw update directions."""

    def __init__(self, params: list[np.ndarray], lr: float):
        self.lr = lr
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        return [p - self.lr * g for p, g in zip(params, grads)]

    def state_arrays(self) -> list[np.ndarray]:
        return [np.array([float(self.t)])]

    def load_state_arrays(self, arrays):
        self.t = int(arrays[0][0])


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
#   magic "MFCP" | u32 version | u32 activation (0 linear, 1 tanh)
#   u32 n_sizes | n_sizes x u32 layer sizes
#   u32 n_extra | n_extra x (u32 ndim, ndim x u32 shape)      (extra arrays)
#   weights then biases per layer, then extra arrays, all float64 little-endian


def save_mlp(path: str | Path, net: Mlp, extra: list[np.ndarray] | None = None) -> None:
    extra = extra or []
    sizes = net.sizes
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<III", CHECKPOINT_VERSION, 1 if net.activation == "tanh" else 0, len(sizes))
    buf += struct.pack(f"<{len(sizes)}I", *sizes)
    buf += struct.pack("<I", len(extra))
    for a in extra:
        buf += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    for w, b in zip(net.weights, net.biases):
        buf += np.ascontiguousarray(w, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()
    for a in extra:
        buf += np.ascontiguousarray(a, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_mlp(path: str | Path) -> tuple[Mlp, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    off = 4
    version, act, n_sizes = struct.unpack_from("<III", data, off)
    off += 12
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sizes = list(struct.unpack_from(f"<{n_sizes}I", data, off))
    off += 4 * n_sizes
    (n_extra,) = struct.unpack_from("<I", data, off)
    off += 4
    shapes = []
    for _ in range(n_extra):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shapes.append(tuple(struct.unpack_from(f"<{ndim}I", data, off)))
        off += 4 * ndim

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(float)
        off += 8 * count
        return arr

    ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(take((a, b)))
        bs.append(take((b,)))
    extra = [take(s) for s in shapes]
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Mlp(ws, bs, "tanh" if act == 1 else None), extra
