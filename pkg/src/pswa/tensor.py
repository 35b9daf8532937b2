"""Deterministic float32 primitives.

Every reduction here runs in ascending index order starting from +0.0, so the
value computed for one output element never depends on how many other
elements were computed alongside it, nor on the worker count. Transcendental
functions are evaluated in float64 and rounded once to float32.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import math

import numpy as np

F32 = np.float32
SENTINEL = np.finfo(np.float32).min
RMS_EPS = 1e-5

_SMALL_PRODUCT = 1 << 18
_ROWS_PER_TASK = 512


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return x


def _matmul_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    p = b.shape[1]
    if m * k * p <= _SMALL_PRODUCT:
        prod = np.empty((m, k + 1, p), dtype=F32)
        prod[:, 0, :] = 0.0
        np.multiply(a[:, :, None], b[None, :, :], out=prod[:, 1:, :])
        return np.add.accumulate(prod, axis=1)[:, -1, :]
    out = np.zeros((m, p), dtype=F32)
    tmp = np.empty((m, p), dtype=F32)
    at = np.ascontiguousarray(a.T)
    for i in range(k):
        np.multiply(at[i][:, None], b[i][None, :], out=tmp)
        out += tmp
    return out


def matmul(a: np.ndarray, b: np.ndarray, workers: int = 1) -> np.ndarray:
    """``a @ b`` for 2-D float32 arrays, summing over k in ascending order."""
    a = np.asarray(a, dtype=F32)
    b = np.asarray(b, dtype=F32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    m = a.shape[0]
    if m == 0:
        return np.zeros((0, b.shape[1]), dtype=F32)
    if workers <= 1 or m < 2 * _ROWS_PER_TASK:
        return _matmul_rows(a, b)
    chunks = [a[i:i + _ROWS_PER_TASK] for i in range(0, m, _ROWS_PER_TASK)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: _matmul_rows(c, b), chunks))
    return np.concatenate(parts, axis=0)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, workers: int = 1) -> np.ndarray:
    """Apply ``x @ w (+ b)`` over the last axis of ``x``."""
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), w, workers=workers)
    if b is not None:
        y = y + b
    return y.reshape(*lead, w.shape[1])


def exp32(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.exp(np.ascontiguousarray(x, dtype=np.float64)).astype(F32)


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    return x / (F32(1.0) + exp32(-x))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, np.ascontiguousarray(x, dtype=np.float64)).astype(F32)


def tanh32(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.ascontiguousarray(x, dtype=np.float64)).astype(F32)


def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x >= 0, x, x * F32(slope)).astype(F32)


def seq_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` as ``((0 + x0) + x1) + ...``."""
    x = np.asarray(x, dtype=F32)
    x = np.moveaxis(x, axis, 0)
    padded = np.concatenate([np.zeros((1,) + x.shape[1:], dtype=F32), x], axis=0)
    return np.add.accumulate(padded, axis=0)[-1]


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """y = gain * x / sqrt(mean(x^2) + eps) over the last axis."""
    x = np.asarray(x, dtype=F32)
    d = x.shape[-1]
    if d < 1:
        raise ValueError("rmsnorm needs at least one feature")
    ms = np.add.accumulate(x * x, axis=-1)[..., -1:] / F32(d)
    rms = np.sqrt(ms + F32(eps))
    return (x / rms) * gain


def swiglu_ffn(x, w_gate, w_up, w_down, workers: int = 1) -> np.ndarray:
    """down(silu(gate(x)) * up(x)); gate and up share one packed matmul."""
    if w_gate.shape != w_up.shape or w_down.shape != (w_gate.shape[1], w_gate.shape[0]):
        raise ValueError("swiglu weight shapes are inconsistent")
    if x.shape[-1] != w_gate.shape[0]:
        raise ValueError(f"swiglu input width {x.shape[-1]} != {w_gate.shape[0]}")
    f = w_gate.shape[1]
    gu = linear(x, np.concatenate([w_gate, w_up], axis=1), workers=workers)
    return linear(silu(gu[..., :f]) * gu[..., f:], w_down, workers=workers)


def ffn_hidden(d: int, multiplier: float = 8.0 / 3.0, multiple_of: int = 8) -> int:
    """Hidden width of the SwiGLU feed-forward: multiplier * d rounded up to a multiple."""
    raw = int(math.ceil(multiplier * d))
    return max(multiple_of, multiple_of * ((raw + multiple_of - 1) // multiple_of))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row softmax treating entries at or below the sentinel as masked.

    Fully masked rows come back as exact zeros.
    """
    x = np.asarray(x, dtype=F32)
    allowed = x > SENTINEL
    safe = np.where(allowed, x, SENTINEL)
    m = safe.max(axis=-1, keepdims=True)
    e = np.where(allowed, exp32(np.where(allowed, safe - m, 0.0)), F32(0.0))
    denom = np.add.accumulate(e, axis=-1)[..., -1:]
    denom = np.where(denom > 0, denom, F32(1.0))
    return (e / denom).astype(F32)


def conv2d(x: np.ndarray, k: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int | None = None) -> np.ndarray:
    """Zero-padded cross-correlation of (C,H,W) with (O,C,kh,kw).

    Taps are accumulated in ascending (c, ky, kx) order; bias is added last.
    """
    x = np.asarray(x, dtype=F32)
    k = np.asarray(k, dtype=F32)
    if x.ndim != 3 or k.ndim != 4 or k.shape[1] != x.shape[0]:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, k {k.shape}")
    o, c, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernels must have odd extents")
    ph, pw = (kh // 2, kw // 2) if padding is None else (padding, padding)
    _, h, w = x.shape
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=F32)
    xp[:, ph:ph + h, pw:pw + w] = x
    out = np.zeros((o, ho, wo), dtype=F32)
    tmp = np.empty_like(out)
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                patch = xp[ci, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]
                np.multiply(k[:, ci, ky, kx][:, None, None], patch[None], out=tmp)
                out += tmp
    if bias is not None:
        out = out + np.asarray(bias, dtype=F32)[:, None, None]
    return out


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour x2 upsampling of a (C,H,W) array."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


# --- deterministic initialisation -------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class Rng:
    """SplitMix64 generator."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    @classmethod
    def for_parameter(cls, seed: int, name: str) -> "Rng":
        return cls(_mix64(seed & _MASK64) ^ fnv1a64(name))

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, vectorised; advances the state by ``n``."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK64
        return z

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller, one output per pair of draws."""
        raw = self.u64_array(2 * n).reshape(n, 2)
        scale = 2.0 ** -53
        u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * scale
        u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * scale
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def init_tensor(rng: Rng, shape, scheme: str, fan_in: int | None = None) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        return np.zeros(shape, dtype=F32)
    if scheme == "ones":
        return np.ones(shape, dtype=F32)
    if scheme == "scaled-normal":
        if fan_in is None:
            fan_in = shape[0] if shape else 1
        n = int(np.prod(shape)) if shape else 1
        std = 1.0 / math.sqrt(max(fan_in, 1))
        return (rng.normal(n) * std).astype(F32).reshape(shape)
    raise ValueError(f"unknown init scheme {scheme!r}")
