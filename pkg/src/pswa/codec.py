"""Frame and sequence coding: encoder, serial reference decoder, wavefront decoder.

Latents enter as (C, H, W) arrays. The quantised latent is the integer grid
``y_hat = rint(y)``; each element is coded as ``v = y_hat - rint(mu)`` under the
scale-table entry for its sigma, in the canonical order: wavefront step, then
channel group, then raster position within the step, then channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import struct
import time

import numpy as np

from .attention import Box
from .model.network import EntropyModel, FrameInputs, FrameState
from .rangecoder import CoderError, RangeDecoder, RangeEncoder, ScaleTable, value_bits
from .tensor import F32
from .transform import BLOCK, analysis, synthesis
from .wavefront import WavefrontSchedule

MAGIC = b"PSWA"
VERSION = 1
DEFAULT_GOP = 32
_HEADER = struct.Struct("<4sHIIIIBBB8s8s")


@dataclass
class BitStats:
    """Estimated bits per (y, x, group) plus actual payload sizes."""

    position_bits: np.ndarray          # (H, W, N)
    hyper_bits: int = 0                # payload bytes * 8
    main_bits: int = 0
    hyper_estimate: float = 0.0

    @property
    def main_estimate(self) -> float:
        return float(self.position_bits.sum())

    @property
    def total_bits(self) -> int:
        return self.hyper_bits + self.main_bits


@dataclass
class FrameResult:
    hyper: bytes
    main: bytes
    y_hat: np.ndarray      # (C, H, W) integer-valued float32
    eps: np.ndarray        # (C, H, W)
    stats: BitStats
    state: FrameState      # state for the next frame
    phases: int = 0
    seconds: float = 0.0

    @property
    def y_rec(self) -> np.ndarray:
        return self.y_hat + self.eps


def _to_hwc(y):
    return np.ascontiguousarray(np.moveaxis(np.asarray(y, F32), 0, -1))


def _to_chw(y):
    return np.ascontiguousarray(np.moveaxis(y, -1, 0))


def _group_slice(model, g):
    cg = model.cfg.group_channels
    return slice(g * cg, (g + 1) * cg)


# --- hyperprior payload --------------------------------------------------------------

def _hyper_tables(model: EntropyModel, rate_idx: int, frame_in_gop: int):
    loc, scale = model.prior_params(rate_idx, frame_in_gop)
    return np.rint(loc).astype(np.int64), ScaleTable.index_of(scale)


def _encode_hyper(model, z_hat, rate_idx, frame_in_gop):
    offs, idx = _hyper_tables(model, rate_idx, frame_in_gop)
    enc = RangeEncoder()
    bits = 0.0
    for c in range(z_hat.shape[0]):
        table = ScaleTable.table(idx[c])
        for v in (z_hat[c].astype(np.int64) - offs[c]).ravel():
            enc.encode_value(table, int(v))
            bits += value_bits(table, int(v))
    return enc.finish(), bits


def _decode_hyper(model, data, rate_idx, frame_in_gop, grid):
    shape = model.hyper_shape(grid)
    offs, idx = _hyper_tables(model, rate_idx, frame_in_gop)
    dec = RangeDecoder(data)
    z = np.zeros(shape, F32)
    n = shape[1] * shape[2]
    for c in range(shape[0]):
        table = ScaleTable.table(idx[c])
        vals = [dec.decode_value(table) for _ in range(n)]
        z[c] = (np.asarray(vals, np.int64) + offs[c]).reshape(shape[1:])
    dec.finish()
    return z


def _frame_context(model, state, grid, rate_idx, hyper, frame_in_gop):
    ctx = model.context_forward(state, grid)
    if model.use_hyperprior:
        z_hat = _decode_hyper(model, hyper, rate_idx, frame_in_gop, grid)
        hq = model.hyper_decode(z_hat, rate_idx, grid)
    else:
        if hyper:
            raise CoderError("hyper payload present but the hyperprior is disabled")
        hq = model.hyper_decode(None, rate_idx, grid)
    return model.frame_inputs(ctx, hq)


# --- encoder -------------------------------------------------------------------------

def encode_frame(y: np.ndarray, state: FrameState, model: EntropyModel, rate_idx: int) -> FrameResult:
    """Teacher-forced encode of one latent frame (C, H, W)."""
    t0 = time.perf_counter()
    cfg = model.cfg
    yh = np.rint(_to_hwc(y)).astype(F32)
    h, w, _ = yh.shape
    grid = (h, w)
    frame_in_gop = state.frame_index
    ctx = model.context_forward(state, grid)
    emb = model.embed(yh, rate_idx)
    fin = model.frame_inputs(ctx, None)
    s1 = model.s1_full(emb, fin)
    if model.use_hyperprior:
        z_hat = model.hyper_encode(s1)
        hyper, hyper_est = _encode_hyper(model, z_hat, rate_idx, frame_in_gop)
    else:
        z_hat, hyper, hyper_est = None, b"", 0.0
    fin.hq = model.hyper_decode(z_hat, rate_idx, grid)
    s2 = model.s2_from_s1(s1, fin)

    rows_s2 = s2.reshape(h * w, -1)
    rows_y = yh.reshape(h * w, -1)
    feats = model.channel_forward(rows_s2, rows_y) if cfg.channel_mode == "transformer" else None
    params = [model.group_params(g, rows_s2, rows_y, rate_idx, feats) for g in range(cfg.groups)]

    sched = WavefrontSchedule(cfg.s, grid)
    enc = RangeEncoder()
    pos_bits = np.zeros((h, w, cfg.groups))
    for t in range(cfg.s):
        ys, xs = sched.position_arrays(t)
        flat = ys * w + xs
        for g in range(cfg.groups):
            gs = _group_slice(model, g)
            mu = np.rint(params[g].mu[flat]).astype(np.int64)
            idx = ScaleTable.index_of(params[g].sigma[flat])
            vals = rows_y[flat, gs].astype(np.int64) - mu
            for k in range(len(flat)):
                bits = 0.0
                for c in range(vals.shape[1]):
                    table = ScaleTable.table(idx[k, c])
                    enc.encode_value(table, int(vals[k, c]))
                    bits += value_bits(table, int(vals[k, c]))
                pos_bits[ys[k], xs[k], g] = bits
    main = enc.finish()

    eps, tok = model.lrp_forward(model.final_representation(s2, yh), yh, state)
    stats = BitStats(pos_bits, 8 * len(hyper), 8 * len(main), hyper_est)
    return FrameResult(hyper, main, _to_chw(yh), _to_chw(eps), stats, state.advance(emb, tok),
                       seconds=time.perf_counter() - t0)


# --- decoders ------------------------------------------------------------------------

def _decode_group_at(dec, model, params, k, pos_bits, ys, xs, g, yh):
    idx = ScaleTable.index_of(params.sigma[k])
    mu = np.rint(params.mu[k]).astype(np.int64)
    gs = _group_slice(model, g)
    vals = np.empty(len(idx), np.int64)
    bits = 0.0
    for c in range(len(idx)):
        table = ScaleTable.table(idx[c])
        vals[c] = dec.decode_value(table)
        bits += value_bits(table, int(vals[c]))
    yh[ys, xs, gs] = (vals + mu).astype(F32)
    pos_bits[ys, xs, g] = bits


def _finish_frame(model, state, dec, yh, s2, emb_rate, hyper, main, pos_bits, hyper_bits_est=0.0):
    dec.finish()
    eps, tok = model.lrp_forward(model.final_representation(s2, yh), yh, state)
    emb = model.embed(yh, emb_rate)
    stats = BitStats(pos_bits, 8 * len(hyper), 8 * len(main), hyper_bits_est)
    return _to_chw(yh), _to_chw(eps), stats, state.advance(emb, tok)


def decode_frame_serial(hyper: bytes, main: bytes, state: FrameState, model: EntropyModel,
                        rate_idx: int, grid: tuple[int, int]) -> FrameResult:
    """Reference decoder: one (position, group) at a time, naive kernels, per-position cones."""
    t0 = time.perf_counter()
    model = model.with_kernel("naive", workers=1)
    cfg = model.cfg
    h, w = grid
    fin = _frame_context(model, state, grid, rate_idx, hyper, state.frame_index)
    frame = Box.frame(h, w)
    ry, rx = model.cone_radius()
    yh = np.zeros((h, w, cfg.latent_channels), F32)
    s2 = np.zeros((h, w, cfg.d_spatial), F32)
    pos_bits = np.zeros((h, w, cfg.groups))
    dec = RangeDecoder(main)
    steps = 0
    sched = WavefrontSchedule(cfg.s, grid)
    for t in range(cfg.s):
        positions = sched.positions(t)
        for g in range(cfg.groups):
            for (py, px) in positions:
                if g == 0:
                    s2[py, px] = _s2_cone(model, yh, (py, px), (ry, rx), frame, fin, rate_idx)
                p_s2 = s2[py, px][None]
                params = model.group_params(g, p_s2, yh[py, px][None], rate_idx)
                _decode_group_at(dec, model, params, 0, pos_bits, py, px, g, yh)
                steps += 1
    y_hat, eps, stats, nxt = _finish_frame(model, state, dec, yh, s2, rate_idx, hyper, main, pos_bits)
    return FrameResult(hyper, main, y_hat, eps, stats, nxt, phases=steps, seconds=time.perf_counter() - t0)


def _s2_cone(model, yh, pos, radius, frame: Box, fin: FrameInputs, rate_idx):
    py, px = pos
    box = Box(py, px, 1, 1).grow(radius[0], radius[1], (frame.h, frame.w))
    emb = model.embed(frame.crop(yh, box), rate_idx)
    out, out_box = model.s2_forward(emb, box, (frame.h, frame.w), fin)
    return out_box.crop(out, Box(py, px, 1, 1))[0, 0]


def decode_frame_wavefront(hyper: bytes, main: bytes, state: FrameState, model: EntropyModel,
                           rate_idx: int, grid: tuple[int, int], workers: int | None = None) -> FrameResult:
    """Step-parallel decoder: s * N batched model evaluations, tiled kernels."""
    t0 = time.perf_counter()
    model = model.with_kernel("tiled", workers=workers)
    cfg = model.cfg
    h, w = grid
    fin = _frame_context(model, state, grid, rate_idx, hyper, state.frame_index)
    frame = Box.frame(h, w)
    yh = np.zeros((h, w, cfg.latent_channels), F32)
    s2_final = np.zeros((h, w, cfg.d_spatial), F32)
    pos_bits = np.zeros((h, w, cfg.groups))
    dec = RangeDecoder(main)
    sched = WavefrontSchedule(cfg.s, grid)
    phases = 0
    for t in range(cfg.s):
        ys, xs = sched.position_arrays(t)
        if len(ys):
            emb = model.embed(yh, rate_idx)
            s2, _ = model.s2_forward(emb, frame, grid, fin)
            s2_final[ys, xs] = s2[ys, xs]
        rows_s2 = s2_final[ys, xs]
        for g in range(cfg.groups):
            phases += 1
            if not len(ys):
                continue
            params = model.group_params(g, rows_s2, yh[ys, xs], rate_idx)
            for k in range(len(ys)):
                _decode_group_at(dec, model, params, k, pos_bits, ys[k], xs[k], g, yh)
    if phases != cfg.s * cfg.groups:
        raise AssertionError("wavefront decoder must run exactly s * N phases")
    y_hat, eps, stats, nxt = _finish_frame(model, state, dec, yh, s2_final, rate_idx, hyper, main, pos_bits)
    return FrameResult(hyper, main, y_hat, eps, stats, nxt, phases=phases, seconds=time.perf_counter() - t0)


def decode_frame(hyper, main, state, model, rate_idx, grid, mode="wavefront", workers=None) -> FrameResult:
    if mode == "serial":
        return decode_frame_serial(hyper, main, state, model, rate_idx, grid)
    if mode == "wavefront":
        return decode_frame_wavefront(hyper, main, state, model, rate_idx, grid, workers)
    raise ValueError(f"unknown decode mode {mode!r}")


def raster_steps(grid: tuple[int, int], n_groups: int) -> int:
    return grid[0] * grid[1] * n_groups


# --- container -----------------------------------------------------------------------

@dataclass
class ContainerHeader:
    width: int
    height: int
    frame_count: int
    gop_size: int
    rate_idx: int
    s: int
    groups: int
    config_hash: bytes
    weights_hash: bytes
    version: int = VERSION

    @property
    def grid(self) -> tuple[int, int]:
        return -(-self.height // BLOCK), -(-self.width // BLOCK)

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.width, self.height, self.frame_count, self.gop_size,
                            self.rate_idx, self.s, self.groups, self.config_hash, self.weights_hash)

    def check(self, model: EntropyModel, weights_hash: bytes):
        if self.config_hash != model.cfg.digest():
            raise ValueError("container config hash does not match the loaded config")
        if self.weights_hash != weights_hash:
            raise ValueError("container weights hash does not match the loaded weights")
        if (self.s, self.groups) != (model.cfg.s, model.cfg.groups):
            raise ValueError("container s/N do not match the config")


@dataclass
class BitstreamContainer:
    header: ContainerHeader
    frames: list = field(default_factory=list)   # [(hyper bytes, main bytes)]
    truncated: bool = False

    def to_bytes(self) -> bytes:
        parts = [self.header.pack()]
        for hyper, main in self.frames:
            parts += [struct.pack("<I", len(hyper)), hyper, struct.pack("<I", len(main)), main]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BitstreamContainer":
        if len(data) < _HEADER.size:
            raise ValueError("container shorter than its header")
        magic, version, *rest = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError("not a PSWA container (bad magic)")
        if version != VERSION:
            raise ValueError(f"unsupported container version {version}")
        header = ContainerHeader(*rest, version=version)
        if header.gop_size < 1:
            raise ValueError("gop_size must be at least 1")
        pos = _HEADER.size
        frames, truncated = [], False
        for _ in range(header.frame_count):
            payloads = []
            for _part in range(2):
                if pos + 4 > len(data):
                    truncated = True
                    break
                (n,) = struct.unpack_from("<I", data, pos)
                if pos + 4 + n > len(data):
                    truncated = True
                    break
                payloads.append(bytes(data[pos + 4:pos + 4 + n]))
                pos += 4 + n
            if truncated:
                break
            frames.append(tuple(payloads))
        if not truncated and pos != len(data):
            raise ValueError("trailing bytes after the last frame")
        return cls(header, frames, truncated)


# --- sequences -----------------------------------------------------------------------

@dataclass
class SequenceResult:
    frames: list            # reconstructed (H, W, 3) uint8 frames, None where undecodable
    results: list           # FrameResult or None
    container: BitstreamContainer | None = None
    errors: dict = field(default_factory=dict)


def encode_sequence(frames, model: EntropyModel, rate_idx: int, gop_size: int = DEFAULT_GOP,
                    weights_hash: bytes | None = None) -> SequenceResult:
    if not frames:
        raise ValueError("no frames to encode")
    if gop_size < 1:
        raise ValueError("gop_size must be at least 1")
    h_px, w_px = frames[0].shape[:2]
    header = ContainerHeader(w_px, h_px, len(frames), gop_size, rate_idx, model.cfg.s, model.cfg.groups,
                             model.cfg.digest(), weights_hash or model.w.digest())
    container = BitstreamContainer(header)
    state = FrameState()
    recon, results = [], []
    for i, f in enumerate(frames):
        if f.shape != frames[0].shape:
            raise ValueError(f"frame {i} has shape {f.shape}, expected {frames[0].shape}")
        if i % gop_size == 0:
            state = FrameState()
        y = analysis(f, rate_idx)
        res = encode_frame(y, state, model, rate_idx)
        state = res.state
        container.frames.append((res.hyper, res.main))
        recon.append(synthesis(res.y_rec, rate_idx, (h_px, w_px)))
        results.append(res)
    return SequenceResult(recon, results, container)


def decode_sequence(container: BitstreamContainer | bytes, model: EntropyModel, mode: str = "wavefront",
                    workers: int | None = None, weights_hash: bytes | None = None,
                    skip_corrupt: bool = True) -> SequenceResult:
    """Decode every whole frame; a corrupt frame drops the rest of its GOP."""
    if isinstance(container, (bytes, bytearray)):
        container = BitstreamContainer.from_bytes(container)
    hdr = container.header
    hdr.check(model, weights_hash or model.w.digest())
    frames, results, errors = [], [], {}
    state, broken = FrameState(), False
    for i, (hyper, main) in enumerate(container.frames):
        if i % hdr.gop_size == 0:
            state, broken = FrameState(), False
        if broken:
            frames.append(None)
            results.append(None)
            continue
        try:
            res = decode_frame(hyper, main, state, model, hdr.rate_idx, hdr.grid, mode, workers)
        except (CoderError, ValueError) as exc:
            if not skip_corrupt:
                raise
            errors[i] = str(exc)
            broken = True
            frames.append(None)
            results.append(None)
            continue
        state = res.state
        frames.append(synthesis(res.y_rec, hdr.rate_idx, (hdr.height, hdr.width)))
        results.append(res)
    return SequenceResult(frames, results, container, errors)


# --- bit allocation maps -------------------------------------------------------------

def colormap() -> np.ndarray:
    """256 RGB entries, piecewise linear blue -> cyan -> yellow -> red."""
    anchors = np.array([[0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]], float)
    x = np.linspace(0.0, 3.0, 256)
    i = np.minimum(x.astype(int), 2)
    frac = (x - i)[:, None]
    return np.rint(anchors[i] * (1 - frac) + anchors[i + 1] * frac).astype(np.uint8)


def bit_allocation_map(stats: BitStats, scale: int = 1) -> np.ndarray:
    """Per-position bits as an (H*scale, W*scale, 3) heat image, normalised by the 99th percentile."""
    total = stats.position_bits.sum(axis=-1)
    ref = float(np.percentile(total, 99)) if total.size else 0.0
    norm = np.clip(total / ref, 0.0, 1.0) if ref > 0 else np.zeros_like(total)
    img = colormap()[np.rint(norm * 255).astype(int)]
    if scale > 1:
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    return img


def bits_csv(stats: BitStats) -> str:
    h, w, n = stats.position_bits.shape
    lines = ["y,x," + ",".join(f"bits_g{g}" for g in range(n)) + ",bits_total"]
    for y in range(h):
        for x in range(w):
            b = stats.position_bits[y, x]
            lines.append(f"{y},{x}," + ",".join(f"{v:.6f}" for v in b) + f",{b.sum():.6f}")
    return "\n".join(lines) + "\n"
