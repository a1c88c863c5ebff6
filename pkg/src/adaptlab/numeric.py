"""Dense float64 kernels shared by the rest of the package.

Everything here operates on plain ``numpy`` arrays of dtype float64. Functions
accept array-likes and always return fresh arrays.
"""
from __future__ import annotations

import hashlib

import numpy as np

DEFAULT_RMS_EPS = 1e-6


def _vec(z, name: str = "input") -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return arr


def softmax(z, axis: int = -1) -> np.ndarray:
    z = _vec(z)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = _vec(z)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sigmoid(x):
    """Logistic function without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def log_sigmoid(x):
    """ln sigmoid(x) computed as -softplus(-x)."""
    out = -softplus(-np.asarray(x, dtype=np.float64))
    return out if np.ndim(out) else float(out)


def sparsemax(z, axis: int = -1) -> np.ndarray:
    """Euclidean projection of ``z`` onto the probability simplex.

    Sort-and-threshold: with ``u`` sorted descending, the support size is the
    largest ``k`` with ``u_k + (1 - sum(u_1..u_k)) / k >= 0``. Using ``>=`` keeps
    entries tied at the threshold in the support; they receive weight zero
    either way, so the projection itself is unaffected.
    """
    z = _vec(z)
    z = np.moveaxis(z, axis, -1)
    u = -np.sort(-z, axis=-1)
    cssv = np.cumsum(u, axis=-1) - 1.0
    k = np.arange(1, z.shape[-1] + 1, dtype=np.float64)
    cond = u - cssv / k >= 0
    rho = np.count_nonzero(cond, axis=-1)
    tau = np.take_along_axis(cssv, (rho - 1)[..., None], axis=-1) / rho[..., None]
    p = np.maximum(z - tau, 0.0)
    return np.moveaxis(p, -1, axis)


def rmsnorm(x, gain, eps: float = DEFAULT_RMS_EPS) -> np.ndarray:
    """x * gain / sqrt(mean(x**2) + eps), reduced over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1]:
        raise ValueError(f"rmsnorm: dim mismatch {x.shape[-1]} vs gain {gain.shape[-1]}")
    if eps < 0:
        raise ValueError("rmsnorm: eps must be non-negative")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    rms = np.sqrt(ms + eps)
    # all-zero rows with eps=0 map to zero instead of 0/0
    safe = np.where(rms > 0, rms, 1.0)
    return x / safe * gain


def swish(t):
    t = np.asarray(t, dtype=np.float64)
    return t * sigmoid(t)


def swiglu(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"swiglu: shape mismatch {a.shape} vs {b.shape}")
    return swish(a) * b


def rope_angle(position: int, theta_base: float, pair_index: int, dim: int) -> float:
    if dim % 2:
        raise ValueError(f"rope: dim must be even, got {dim}")
    if not 0 <= pair_index < dim // 2:
        raise ValueError(f"rope: pair_index {pair_index} outside [0, {dim // 2})")
    return position * theta_base ** (-2.0 * pair_index / dim)


def rotate_pair(pair, angle: float) -> np.ndarray:
    x, y = np.asarray(pair, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * x - s * y, s * x + c * y])


def rope_rotate(pair, position: int, theta_base: float, pair_index: int, dim: int) -> np.ndarray:
    """Rotate one (even, odd) coordinate pair the way rotary embeddings do."""
    return rotate_pair(pair, rope_angle(position, theta_base, pair_index, dim))


def rope_apply(x, positions, theta_base: float = 1_000_000.0) -> np.ndarray:
    """Apply rotary embeddings to rows of ``x`` (shape ``(T, dim)``)."""
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[-1]
    if dim % 2:
        raise ValueError(f"rope: dim must be even, got {dim}")
    inv_freq = theta_base ** (-2.0 * np.arange(dim // 2) / dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    c, s = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = c * even - s * odd
    out[..., 1::2] = s * even + c * odd
    return out


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox4x64 counter-based generator with the 128-bit key
    ``[seed, stream_id]``; draws are identical across runs and platforms.
    Named sub-streams are derived with BLAKE2b so that independent consumers
    never share a key.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed < 2**64 and 0 <= stream_id < 2**64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, name: str) -> "RngStream":
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little"))
        h.update(name.encode("utf-8"))
        return RngStream(self.seed, int.from_bytes(h.digest(), "little"))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.gen.standard_normal(size) * scale

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def choice_index(self, probs) -> int:
        """Inverse-CDF draw of one index from a probability vector."""
        cdf = np.cumsum(probs)
        u = self.gen.random() * cdf[-1]
        return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"
