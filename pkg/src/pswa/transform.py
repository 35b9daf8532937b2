"""Fixed 8x8 block-DCT analysis/synthesis transform.

An RGB frame becomes a 192-channel latent at 1/8 resolution: channel
``3 * k + plane`` holds zigzag coefficient ``k`` of colour plane ``plane``, so
consecutive channel groups run from low to high frequency. Pixels are centred
at 128 before the transform, so an all-zero latent synthesises to mid-gray.
"""

from __future__ import annotations

import numpy as np

BLOCK = 8
LATENT_CHANNELS = 3 * BLOCK * BLOCK
QUANT_STEPS = (8.0, 5.0, 3.0, 2.0)
RATE_LAMBDAS = (128, 280, 680, 1600)
CENTER = 128.0


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix D with coefficients = D @ x."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return d


def zigzag_order(n: int = BLOCK) -> list[tuple[int, int]]:
    """(row, col) of each coefficient in zigzag scan order."""
    order = []
    for s in range(2 * n - 1):
        diag = [(i, s - i) for i in range(n) if 0 <= s - i < n]
        order.extend(diag if s % 2 else diag[::-1])
    return order


_D = dct_matrix()
_ZZ = zigzag_order()
_ZZ_ROWS = np.array([r for r, _ in _ZZ])
_ZZ_COLS = np.array([c for _, c in _ZZ])


def quant_step(rate_idx: int) -> float:
    if not 0 <= rate_idx < len(QUANT_STEPS):
        raise ValueError(f"rate index {rate_idx} outside [0, {len(QUANT_STEPS)})")
    return QUANT_STEPS[rate_idx]


def pad_frame(frame: np.ndarray) -> np.ndarray:
    """Replicate the last row/column up to multiples of 8."""
    h, w, _ = frame.shape
    ph, pw = (-h) % BLOCK, (-w) % BLOCK
    return np.pad(frame, ((0, ph), (0, pw), (0, 0)), mode="edge")


def analysis(frame: np.ndarray, rate_idx: int) -> np.ndarray:
    """(H, W, 3) uint8 frame -> (192, ceil(H/8), ceil(W/8)) float32 latent."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) frame, got {frame.shape}")
    q = quant_step(rate_idx)
    x = pad_frame(frame).astype(np.float64) - CENTER
    hb, wb = x.shape[0] // BLOCK, x.shape[1] // BLOCK
    blocks = x.reshape(hb, BLOCK, wb, BLOCK, 3).transpose(0, 2, 4, 1, 3)  # (hb, wb, 3, 8, 8)
    coef = _D @ blocks @ _D.T
    zz = coef[..., _ZZ_ROWS, _ZZ_COLS]  # (hb, wb, 3, 64)
    latent = zz.transpose(3, 2, 0, 1).reshape(LATENT_CHANNELS, hb, wb)
    return (latent / q).astype(np.float32)


def synthesis(latent: np.ndarray, rate_idx: int, size: tuple[int, int] | None = None,
              clamp_round: bool = True) -> np.ndarray:
    """Inverse of :func:`analysis`; ``size`` = (H, W) crops the block padding."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3 or latent.shape[0] != LATENT_CHANNELS:
        raise ValueError(f"expected a ({LATENT_CHANNELS}, h, w) latent, got {latent.shape}")
    q = quant_step(rate_idx)
    _, hb, wb = latent.shape
    zz = (latent * q).reshape(BLOCK * BLOCK, 3, hb, wb).transpose(2, 3, 1, 0)
    coef = np.zeros((hb, wb, 3, BLOCK, BLOCK))
    coef[..., _ZZ_ROWS, _ZZ_COLS] = zz
    blocks = _D.T @ coef @ _D
    x = blocks.transpose(0, 3, 1, 4, 2).reshape(hb * BLOCK, wb * BLOCK, 3) + CENTER
    if size is not None:
        x = x[:size[0], :size[1]]
    if not clamp_round:
        return x
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(255.0 ** 2 / mse))
