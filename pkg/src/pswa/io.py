"""Weight files, config files, PPM frames and coder golden vectors."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
import re
import struct

import numpy as np

from .model.config import ModelConfig
from .model.weights import ModelWeights

WEIGHT_MAGIC = b"PSWW"
WEIGHT_VERSION = 1
FRAME_PATTERN = "frame_{:04d}.ppm"
DEFAULT_SEED = 0


class FormatError(ValueError):
    pass


# --- weights -----------------------------------------------------------------------

def weights_to_bytes(weights: ModelWeights, cfg: ModelConfig) -> bytes:
    parts = [WEIGHT_MAGIC, struct.pack("<H", WEIGHT_VERSION), cfg.digest(), struct.pack("<I", len(weights))]
    for name in weights:
        arr = weights[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def weights_from_bytes(data: bytes, cfg: ModelConfig) -> ModelWeights:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("weight file truncated")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4) != WEIGHT_MAGIC:
        raise FormatError("not a weight file (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    if take(8) != cfg.digest():
        raise FormatError("weight file was generated for a different config")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name}")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
    if pos != len(view):
        raise FormatError("trailing bytes after the last tensor")
    w = ModelWeights(tensors)
    try:
        w.validate(cfg)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return w


def save_weights(path, weights: ModelWeights, cfg: ModelConfig) -> None:
    Path(path).write_bytes(weights_to_bytes(weights, cfg))


def load_weights(path, cfg: ModelConfig) -> ModelWeights:
    return weights_from_bytes(Path(path).read_bytes(), cfg)


# --- config ------------------------------------------------------------------------

def config_to_text(cfg: ModelConfig, seed: int = DEFAULT_SEED) -> str:
    return cfg.canonical_text() + f"seed = {seed}\n"


def _parse_value(kind, text: str, key: str):
    text = text.strip()
    if kind is bool or kind == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise FormatError(f"{key}: expected true/false, got {text!r}")
    if kind is int or kind == "int":
        try:
            return int(text)
        except ValueError:
            raise FormatError(f"{key}: expected an integer, got {text!r}") from None
    if kind is str or kind == "str":
        return text
    # tuple of ints written as AxBxC
    if not re.fullmatch(r"\d+(x\d+)*", text):
        raise FormatError(f"{key}: expected extents like 7x7, got {text!r}")
    return tuple(int(v) for v in text.split("x"))


def parse_config(text: str) -> tuple[ModelConfig, int]:
    """Parse ``key = value`` lines; returns (config, seed)."""
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    values, seed = {}, DEFAULT_SEED
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "seed":
            seed = _parse_value(int, value, key)
            continue
        if key not in kinds:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        kind = kinds[key]
        if isinstance(kind, str):
            kind = kind.split("[")[0]
        values[key] = _parse_value(kind, value, key)
    try:
        return ModelConfig(**values), seed
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def load_config(path) -> tuple[ModelConfig, int]:
    return parse_config(Path(path).read_text())


def save_config(path, cfg: ModelConfig, seed: int = DEFAULT_SEED) -> None:
    Path(path).write_text(config_to_text(cfg, seed))


# --- PPM ---------------------------------------------------------------------------

def _header_tokens(data: bytes):
    """Yield (token, end offset) for the four header fields, skipping comments."""
    pos, n = 0, len(data)
    for _ in range(4):
        while pos < n:
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("malformed PPM header")
        yield data[start:pos], pos


def decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] == b"P3":
        raise FormatError("ASCII PPM (P3) is not supported; use binary P6")
    if data[:2] != b"P6":
        raise FormatError("not a binary PPM (P6) file")
    toks = list(_header_tokens(data))
    try:
        w, h, maxval = (int(t) for t, _ in toks[1:])
    except ValueError:
        raise FormatError("malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"PPM maxval {maxval} unsupported (need 255)")
    if w < 1 or h < 1:
        raise FormatError("PPM has empty extents")
    start = toks[-1][1] + 1
    pixels = data[start:start + w * h * 3]
    if len(pixels) != w * h * 3:
        raise FormatError("PPM pixel data truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(frame: np.ndarray) -> bytes:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.dtype != np.uint8:
        raise ValueError("write_ppm expects an (H, W, 3) uint8 array")
    h, w, _ = frame.shape
    return f"P6\n{w} {h}\n255\n".encode() + frame.tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, frame: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(frame))


def frame_paths(directory, limit: int | None = None) -> list[Path]:
    directory = Path(directory)
    paths = []
    while limit is None or len(paths) < limit:
        p = directory / FRAME_PATTERN.format(len(paths))
        if not p.exists():
            break
        paths.append(p)
    return paths


def load_frames(directory, limit: int | None = None) -> list[np.ndarray]:
    paths = frame_paths(directory, limit)
    if not paths:
        raise FileNotFoundError(f"no {FRAME_PATTERN.format(0)} in {directory}")
    if limit is not None and len(paths) < limit:
        raise FileNotFoundError(f"only {len(paths)} of {limit} frames present in {directory}")
    frames = [read_ppm(p) for p in paths]
    for p, f in zip(paths, frames):
        if f.shape != frames[0].shape:
            raise FormatError(f"{p.name} is {f.shape[1]}x{f.shape[0]}, "
                              f"expected {frames[0].shape[1]}x{frames[0].shape[0]}")
    return frames


def save_frames(directory, frames) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for i, f in enumerate(frames):
        p = directory / FRAME_PATTERN.format(i)
        write_ppm(p, f)
        out.append(p)
    return out


# --- golden vectors ----------------------------------------------------------------

GOLDEN_DIR = Path(__file__).parent / "golden"
CODER_GOLDEN = GOLDEN_DIR / "coder_vectors.txt"


def read_golden_vectors(path=CODER_GOLDEN) -> list[dict]:
    """Each line: ``name | scale indices | values | hex bytes``."""
    cases = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 4:
            raise FormatError(f"golden vector line has {len(parts)} fields: {line[:40]}")
        name, idx, vals, hexbytes = parts
        cases.append({"name": name,
                      "scales": [int(v) for v in idx.split()],
                      "values": [int(v) for v in vals.split()],
                      "bytes": bytes.fromhex(hexbytes)})
    return cases


def write_golden_vectors(cases, path=CODER_GOLDEN) -> None:
    lines = ["# name | scale-table indices | symbol values | expected stream (hex)"]
    for c in cases:
        lines.append(" | ".join([c["name"], " ".join(map(str, c["scales"])),
                                 " ".join(map(str, c["values"])), c["bytes"].hex()]))
    Path(path).write_text("\n".join(lines) + "\n")

