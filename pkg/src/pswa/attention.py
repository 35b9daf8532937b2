"""Sliding-window attention with repeating spatial masks.

Two kernels compute the same function:

* ``naive`` gathers every window key of every query into a dense
  (queries, offsets, heads, head_dim) block and reduces over the offset axis.
* ``tiled`` walks query bands, slices a zero-padded K/V halo once per window
  offset and streams the reductions offset by offset.

Both accumulate dot products in ascending head-dim order, take the exact max,
exponentiate through float64, and sum keys in raster order starting from
+0.0, so their outputs are bit-identical. Keys outside the frame, outside the
temporal range, or rejected by the mask are excluded from the softmax; a query
with no admissible key returns the zero vector.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import math

import numpy as np

from .tensor import F32, SENTINEL, exp32, linear
from .wavefront import MaskKind, allowed_steps

KERNELS = ("naive", "tiled")

_NAIVE_CHUNK_ELEMS = 1 << 22
_TILE_ROWS = 16


@dataclass(frozen=True)
class Box:
    """A rectangular sub-grid in absolute frame coordinates."""

    y0: int
    x0: int
    h: int
    w: int

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @classmethod
    def frame(cls, h: int, w: int) -> "Box":
        return cls(0, 0, h, w)

    def shrink(self, ry: int, rx: int, frame_hw: tuple[int, int]) -> "Box":
        """Positions whose (2ry+1)x(2rx+1) window, clipped to the frame, lies inside this box."""
        hf, wf = frame_hw
        y0 = self.y0 + ry if self.y0 > 0 else 0
        x0 = self.x0 + rx if self.x0 > 0 else 0
        y1 = self.y1 - ry if self.y1 < hf else hf
        x1 = self.x1 - rx if self.x1 < wf else wf
        return Box(y0, x0, max(0, y1 - y0), max(0, x1 - x0))

    def grow(self, ry: int, rx: int, frame_hw: tuple[int, int]) -> "Box":
        hf, wf = frame_hw
        y0, x0 = max(0, self.y0 - ry), max(0, self.x0 - rx)
        y1, x1 = min(hf, self.y1 + ry), min(wf, self.x1 + rx)
        return Box(y0, x0, y1 - y0, x1 - x0)

    def contains(self, inner: "Box") -> bool:
        return (self.y0 <= inner.y0 and self.x0 <= inner.x0
                and inner.y1 <= self.y1 and inner.x1 <= self.x1)

    def crop(self, arr: np.ndarray, inner: "Box", axis: int = 0) -> np.ndarray:
        """Slice ``arr`` (laid out over this box from ``axis``) down to ``inner``."""
        if not self.contains(inner):
            raise ValueError(f"{inner} is not inside {self}")
        index = [slice(None)] * arr.ndim
        index[axis] = slice(inner.y0 - self.y0, inner.y1 - self.y0)
        index[axis + 1] = slice(inner.x0 - self.x0, inner.x1 - self.x0)
        return arr[tuple(index)]


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    window: tuple[int, ...]
    mask: MaskKind | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if any(e % 2 == 0 or e < 1 for e in self.window):
            raise ValueError(f"window extents must be odd, got {self.window}")
        if len(self.window) not in (2, 3):
            raise ValueError("window must be (wh, ww) or (wt, wh, ww)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def window3(self) -> tuple[int, int, int]:
        return self.window if len(self.window) == 3 else (1,) + tuple(self.window)

    @property
    def n_offsets(self) -> int:
        return int(np.prod(self.window))


@dataclass
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bias: np.ndarray | None = None  # (heads, offsets), one learned score bias per window offset


def window_offsets(window3) -> np.ndarray:
    """(offsets, 3) array of (dt, dy, dx) in raster order."""
    wt, wh, ww = window3
    return np.array([(dt, dy, dx)
                     for dt in range(-(wt - 1), 1)
                     for dy in range(-(wh // 2), wh // 2 + 1)
                     for dx in range(-(ww // 2), ww // 2 + 1)], dtype=np.int64).reshape(-1, 3)


def _steps(ys, xs, s):
    return (ys + xs) % s


def _naive(q, k, v, q_box, kv_box, frame_hw, window3, mask, s, bias, scale):
    tq, hq, wq, nh, hd = q.shape
    tk = k.shape[0]
    hf, wf = frame_hw
    offs = window_offsets(window3)
    n_off = len(offs)

    tj, yy, xx = np.meshgrid(np.arange(tq), np.arange(hq), np.arange(wq), indexing="ij")
    qt = (tj + (tk - tq)).reshape(-1)
    qy = (yy + q_box.y0).reshape(-1)
    qx = (xx + q_box.x0).reshape(-1)
    kt = qt[:, None] + offs[None, :, 0]
    ky = qy[:, None] + offs[None, :, 1]
    kx = qx[:, None] + offs[None, :, 2]
    valid = (kt >= 0) & (ky >= 0) & (ky < hf) & (kx >= 0) & (kx < wf)
    in_kv = (ky >= kv_box.y0) & (ky < kv_box.y1) & (kx >= kv_box.x0) & (kx < kv_box.x1)
    if np.any(valid & ~in_kv):
        raise ValueError("query window reaches in-frame keys outside the key/value box")
    if mask is not None:
        valid &= allowed_steps(mask, _steps(ky, kx, s), _steps(qy, qx, s)[:, None])

    dummy = tk * kv_box.h * kv_box.w
    idx = np.where(valid, kt * (kv_box.h * kv_box.w) + (ky - kv_box.y0) * kv_box.w + (kx - kv_box.x0), dummy)
    kflat = np.concatenate([k.reshape(-1, nh, hd), np.zeros((1, nh, hd), F32)])
    vflat = np.concatenate([v.reshape(-1, nh, hd), np.zeros((1, nh, hd), F32)])
    qflat = q.reshape(-1, nh, hd)
    bias_t = None if bias is None else np.ascontiguousarray(bias.T)

    n_q = qflat.shape[0]
    out = np.zeros((n_q, nh, hd), F32)
    chunk = max(1, _NAIVE_CHUNK_ELEMS // max(1, (n_off + 1) * nh * hd))
    for c0 in range(0, n_q, chunk):
        c1 = min(n_q, c0 + chunk)
        ok = valid[c0:c1]
        if not ok.any():
            continue
        kg = kflat[idx[c0:c1]]
        vg = vflat[idx[c0:c1]]
        qc = qflat[c0:c1]
        sc = np.zeros(kg.shape[:3], F32)
        for i in range(hd):
            sc += qc[:, None, :, i] * kg[..., i]
        sc = sc * scale
        if bias_t is not None:
            sc = sc + bias_t[None]
        ok3 = ok[:, :, None]
        m = np.where(ok3, sc, SENTINEL).max(axis=1, keepdims=True)
        e = np.where(ok3, exp32(np.where(ok3, sc - m, F32(0.0))), F32(0.0))
        denom = np.add.accumulate(e, axis=1)[:, -1:, :]
        wts = e / np.where(denom > 0, denom, F32(1.0))
        terms = np.empty((c1 - c0, n_off + 1, nh, hd), F32)
        terms[:, 0] = 0.0
        np.multiply(wts[..., None], vg, out=terms[:, 1:])
        out[c0:c1] = np.add.accumulate(terms, axis=1)[:, -1]
    return out.reshape(tq, hq, wq, nh, hd)


def _tiled_band(q, kp, vp, band, q_box, halo_box, frame_hw, window3, mask, s, bias, scale, tk, kv_box):
    r0, r1 = band
    tq, _, wq, nh, hd = q.shape
    wt, wh, ww = window3
    ry, rx = wh // 2, ww // 2
    hf, wf = frame_hw
    qb = q[:, r0:r1]
    rows = r1 - r0
    offs = window_offsets(window3)

    qy = (np.arange(r0, r1) + q_box.y0)[:, None]
    qx = (np.arange(wq) + q_box.x0)[None, :]
    qsteps = _steps(qy, qx, s)
    qt = np.arange(tq) + (tk - tq)

    scores, valids, vslices = [], [], []
    for dt, dy, dx in offs:
        t_ok = (qt + dt) >= 0
        ky, kx = qy + dy, qx + dx
        ok2 = (ky >= 0) & (ky < hf) & (kx >= 0) & (kx < wf)
        if mask is not None:
            ok2 = ok2 & allowed_steps(mask, _steps(ky, kx, s), qsteps)
        ok = t_ok[:, None, None] & ok2[None]
        if not ok.any():
            scores.append(None)
            valids.append(None)
            vslices.append(None)
            continue
        in_kv = (ky >= kv_box.y0) & (ky < kv_box.y1) & (kx >= kv_box.x0) & (kx < kv_box.x1)
        if np.any(ok2 & ~in_kv):
            raise ValueError("query window reaches in-frame keys outside the key/value box")
        ts = slice(tk - tq + dt + wt - 1, tk + dt + wt - 1)
        ys = slice(r0 + q_box.y0 + dy - halo_box.y0, r1 + q_box.y0 + dy - halo_box.y0)
        xs = slice(q_box.x0 + dx - halo_box.x0, q_box.x0 + wq + dx - halo_box.x0)
        ks = kp[ts, ys, xs]
        sc = np.zeros((tq, rows, wq, nh), F32)
        for i in range(hd):
            sc += qb[..., i] * ks[..., i]
        sc = sc * scale
        if bias is not None:
            sc = sc + bias[:, len(scores)]
        scores.append(sc)
        valids.append(ok[..., None])
        vslices.append(vp[ts, ys, xs])

    m = np.full((tq, rows, wq, nh), SENTINEL, F32)
    for sc, ok in zip(scores, valids):
        if sc is not None:
            m = np.maximum(m, np.where(ok, sc, SENTINEL))
    exps = []
    denom = np.zeros((tq, rows, wq, nh), F32)
    for sc, ok in zip(scores, valids):
        if sc is None:
            exps.append(None)
            continue
        e = np.where(ok, exp32(np.where(ok, sc - m, F32(0.0))), F32(0.0))
        denom += e
        exps.append(e)
    denom = np.where(denom > 0, denom, F32(1.0))
    acc = np.zeros((tq, rows, wq, nh, hd), F32)
    for e, vs in zip(exps, vslices):
        if e is not None:
            acc += (e / denom)[..., None] * vs
    return acc


def _tiled(q, k, v, q_box, kv_box, frame_hw, window3, mask, s, bias, scale, workers):
    tq, hq, wq, nh, hd = q.shape
    tk = k.shape[0]
    wt, wh, ww = window3
    ry, rx = wh // 2, ww // 2
    halo = Box(q_box.y0 - ry, q_box.x0 - rx, hq + 2 * ry, wq + 2 * rx)
    kp = np.zeros((tk + wt - 1, halo.h, halo.w, nh, hd), F32)
    vp = np.zeros_like(kp)
    # overlap of the key/value box with the halo
    oy0, oy1 = max(halo.y0, kv_box.y0), min(halo.y1, kv_box.y1)
    ox0, ox1 = max(halo.x0, kv_box.x0), min(halo.x1, kv_box.x1)
    if oy1 > oy0 and ox1 > ox0:
        dst = (slice(wt - 1, None), slice(oy0 - halo.y0, oy1 - halo.y0), slice(ox0 - halo.x0, ox1 - halo.x0))
        src = (slice(None), slice(oy0 - kv_box.y0, oy1 - kv_box.y0), slice(ox0 - kv_box.x0, ox1 - kv_box.x0))
        kp[dst] = k[src]
        vp[dst] = v[src]
    bands = [(r, min(hq, r + _TILE_ROWS)) for r in range(0, hq, _TILE_ROWS)]

    def run(band):
        return _tiled_band(q, kp, vp, band, q_box, halo, frame_hw, window3, mask, s, bias, scale, tk, kv_box)

    if workers > 1 and len(bands) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bands))
    else:
        parts = [run(b) for b in bands]
    if not parts:
        return np.zeros((tq, 0, wq, nh, hd), F32)
    return np.concatenate(parts, axis=1)


def window_attention(q, k, v, *, q_box: Box, kv_box: Box, frame_hw, window,
                     mask: MaskKind | None = None, s: int = 1, bias=None,
                     kernel: str = "tiled", workers: int = 1) -> np.ndarray:
    """Core windowed attention over already-projected heads.

    ``q`` is (Tq, hq, wq, heads, head_dim) laid over ``q_box``; ``k``/``v`` are
    (Tk, hk, wk, heads, head_dim) over ``kv_box``. Query slot ``j`` sits at
    time ``Tk - Tq + j`` and sees key times ``[t - wt + 1, t]``.
    """
    window3 = tuple(window) if len(window) == 3 else (1,) + tuple(window)
    if q.ndim != 5 or k.shape != v.shape or q.shape[3:] != k.shape[3:]:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[1:3] != (q_box.h, q_box.w) or k.shape[1:3] != (kv_box.h, kv_box.w):
        raise ValueError("token arrays do not match their boxes")
    if q.shape[0] > k.shape[0]:
        raise ValueError("more query frames than key frames")
    scale = F32(1.0 / math.sqrt(q.shape[-1]))
    if bias is not None and bias.shape != (q.shape[3], int(np.prod(window3))):
        raise ValueError(f"bias shape {bias.shape} does not match heads x offsets")
    mask = None if mask is None else MaskKind(mask)
    if q_box.h == 0 or q_box.w == 0:
        return np.zeros(q.shape, F32)
    if kernel == "naive":
        return _naive(q, k, v, q_box, kv_box, frame_hw, window3, mask, s, bias, scale)
    if kernel == "tiled":
        return _tiled(q, k, v, q_box, kv_box, frame_hw, window3, mask, s, bias, scale, workers)
    raise ValueError(f"unknown kernel {kernel!r}")


def _split_heads(x, nh):
    return x.reshape(*x.shape[:-1], nh, x.shape[-1] // nh)


def _merge_heads(x):
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def swa2d(x, weights: AttentionWeights, cfg: AttentionConfig, *, box: Box | None = None,
          frame_hw=None, s: int = 1, kernel: str = "tiled", workers: int = 1,
          query_box: Box | None = None):
    """2-D masked self-attention over tokens ``x`` of shape (h, w, d) laid over ``box``.

    Returns ``(out, query_box)``; by default ``query_box`` is the largest region
    whose windows are fully covered by ``box``.
    """
    h, w, d = x.shape
    if d != cfg.d_model:
        raise ValueError(f"token width {d} != d_model {cfg.d_model}")
    box = box or Box.frame(h, w)
    frame_hw = frame_hw or (h, w)
    wh, ww = cfg.window[-2:]
    query_box = query_box or box.shrink(wh // 2, ww // 2, frame_hw)
    qkv = linear(x, np.concatenate([weights.wq, weights.wk, weights.wv], axis=1), workers=workers)
    q = box.crop(qkv[..., :d], query_box)
    nh = cfg.n_heads
    att = window_attention(_split_heads(q, nh)[None], _split_heads(qkv[..., d:2 * d], nh)[None],
                           _split_heads(qkv[..., 2 * d:], nh)[None], q_box=query_box, kv_box=box,
                           frame_hw=frame_hw, window=(wh, ww), mask=cfg.mask, s=s,
                           bias=weights.bias, kernel=kernel, workers=workers)
    return linear(_merge_heads(att[0]), weights.wo, workers=workers), query_box


def swa2d_naive(x, weights, cfg, s: int = 1):
    return swa2d(x, weights, cfg, s=s, kernel="naive")[0]


def swa2d_tiled(x, weights, cfg, s: int = 1, workers: int = 1):
    return swa2d(x, weights, cfg, s=s, kernel="tiled", workers=workers)[0]


def cross_windowed(q_x, kv_x, weights: AttentionWeights, cfg: AttentionConfig, *,
                   q_box: Box | None = None, kv_box: Box | None = None, frame_hw=None,
                   mask: MaskKind | None = None, s: int = 1, kernel: str = "tiled",
                   workers: int = 1, kv_projected=None):
    """Windowed cross-attention of queries ``q_x`` (h, w, d) onto ``kv_x``.

    ``kv_x`` is (h', w', d) for a same-frame source or (T, h', w', d) for past
    frames. ``kv_projected`` may carry a precomputed ``(k, v)`` head pair.
    Residual connections are left to the caller.
    """
    d = cfg.d_model
    nh = cfg.n_heads
    q_box = q_box or Box.frame(*q_x.shape[:2])
    frame_hw = frame_hw or (q_box.h, q_box.w)
    if kv_projected is None:
        kv_arr = kv_x if kv_x.ndim == 4 else kv_x[None]
        kv_box = kv_box or Box.frame(*kv_arr.shape[1:3])
        if kv_arr.shape[-1] != d or q_x.shape[-1] != d:
            raise ValueError("cross-attention width mismatch")
        kv = linear(kv_arr, np.concatenate([weights.wk, weights.wv], axis=1), workers=workers)
        k, v = _split_heads(kv[..., :d], nh), _split_heads(kv[..., d:], nh)
    else:
        k, v = kv_projected
        kv_box = kv_box or Box.frame(*k.shape[1:3])
    q = _split_heads(linear(q_x, weights.wq, workers=workers), nh)[None]
    att = window_attention(q, k, v, q_box=q_box, kv_box=kv_box, frame_hw=frame_hw,
                           window=cfg.window, mask=mask, s=s, bias=weights.bias,
                           kernel=kernel, workers=workers)
    return linear(_merge_heads(att[0]), weights.wo, workers=workers)


def project_kv(kv_x, weights: AttentionWeights, cfg: AttentionConfig, workers: int = 1):
    kv_arr = kv_x if kv_x.ndim == 4 else kv_x[None]
    d = cfg.d_model
    kv = linear(kv_arr, np.concatenate([weights.wk, weights.wv], axis=1), workers=workers)
    return _split_heads(kv[..., :d], cfg.n_heads), _split_heads(kv[..., d:], cfg.n_heads)


def swa3d_timecausal(x, weights: AttentionWeights, cfg: AttentionConfig, *, box: Box | None = None,
                     frame_hw=None, kernel: str = "tiled", workers: int = 1, last_only: bool = False):
    """Time-causal 3-D sliding-window self-attention over (T, h, w, d) tokens.

    Frame ``t`` attends frames ``[t - wt + 1, t]`` inside the spatial window,
    with no intra-frame mask. ``last_only`` evaluates queries of the final
    frame only.
    """
    t, h, w, d = x.shape
    if len(cfg.window) != 3:
        raise ValueError("swa3d needs a (wt, wh, ww) window")
    box = box or Box.frame(h, w)
    frame_hw = frame_hw or (h, w)
    nh = cfg.n_heads
    qkv = linear(x, np.concatenate([weights.wq, weights.wk, weights.wv], axis=1), workers=workers)
    q = qkv[-1:, ..., :d] if last_only else qkv[..., :d]
    att = window_attention(_split_heads(q, nh), _split_heads(qkv[..., d:2 * d], nh),
                           _split_heads(qkv[..., 2 * d:], nh), q_box=box, kv_box=box,
                           frame_hw=frame_hw, window=cfg.window, mask=None, s=1,
                           bias=weights.bias, kernel=kernel, workers=workers)
    return linear(_merge_heads(att), weights.wo, workers=workers)
