"""Command-line interface: encode, decode, verify, bench, heatmap, gen-weights."""

from __future__ import annotations

import argparse
import os
from pathlib import Path
import sys
import time

import numpy as np

from . import codec
from .attention import AttentionConfig, AttentionWeights, swa2d
from .io import (CODER_GOLDEN, FormatError, load_config, load_frames, load_weights, read_golden_vectors,
                 save_frames, save_weights, write_ppm)
from .model.config import ModelConfig, parameter_count
from .model.network import EntropyModel, FrameState
from .model.weights import generate_weights
from .rangecoder import ScaleTable, decode_symbols, encode_symbols
from .tensor import Rng
from .wavefront import MaskKind, validate_schedule

BENCH_COLUMNS = ("size", "mode", "threads", "encode_s", "decode_s", "phases", "positions_per_step",
                 "raster_steps", "wavefront_steps")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _shared(p):
    p.add_argument("--config", help="model config file (key = value lines); defaults built in")
    p.add_argument("--weights", help="weight file; generated from --seed when omitted")
    p.add_argument("--rate", type=int, default=0, choices=range(4), help="rate point 0..3")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default $PSWA_THREADS or 1)")
    p.add_argument("--seed", type=int, default=None, help="weight seed (overrides the config file)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pswa", description="Wavefront-parallel autoregressive latent codec.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="encode a frame_%%04d.ppm sequence into a container")
    _shared(p)
    p.add_argument("--input", required=True, help="directory holding frame_0000.ppm, ...")
    p.add_argument("--output", required=True, help="container file to write")
    p.add_argument("--gop", type=int, default=codec.DEFAULT_GOP, help="GOP size (default 32)")
    p.add_argument("--frames", type=int, default=None, help="number of frames to encode")
    p.add_argument("--stats", default=None, help="per-frame stats CSV (default <output>.csv)")

    p = sub.add_parser("decode", help="decode a container into PPM frames")
    _shared(p)
    p.add_argument("--input", required=True, help="container file")
    p.add_argument("--output", required=True, help="directory for decoded frames")
    p.add_argument("--mode", choices=("serial", "wavefront"), default="wavefront")

    p = sub.add_parser("verify", help="schedule, kernel and coder self-checks")
    _shared(p)
    p.add_argument("--golden", default=str(CODER_GOLDEN), help="coder golden vector file")

    p = sub.add_parser("bench", help="wall-clock comparison of decode modes, CSV on stdout")
    _shared(p)
    p.add_argument("--sizes", default="8,16", help="comma-separated latent grid sizes")
    p.add_argument("--modes", default="serial,wavefront", help="comma-separated decode modes")
    p.add_argument("--output", default=None, help="write the CSV here as well")

    p = sub.add_parser("heatmap", help="bit-allocation map of one frame")
    _shared(p)
    p.add_argument("--input", required=True, help="container file")
    p.add_argument("--frame", type=int, default=0, help="frame index (3 = fourth frame)")
    p.add_argument("--out", required=True, help="PPM path; <out>_x8.ppm and <out>.csv are written alongside")

    p = sub.add_parser("gen-weights", help="write deterministic weights for a config")
    _shared(p)
    p.add_argument("--out", required=True, help="weight file to write")
    return parser


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("PSWA_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise CliError("bad_threads", f"PSWA_THREADS={env!r} is not an integer") from None
    if n < 1:
        raise CliError("bad_threads", "thread count must be >= 1")
    return n


def _load_model(args):
    cfg, seed = (load_config(args.config) if args.config else (ModelConfig(), 0))
    if args.seed is not None:
        seed = args.seed
    weights = load_weights(args.weights, cfg) if args.weights else generate_weights(cfg, seed)
    return EntropyModel(cfg, weights, workers=_threads(args)), seed


def cmd_gen_weights(args, out):
    model, seed = _load_model(args)
    save_weights(args.out, model.w, model.cfg)
    print(f"wrote {args.out} params={parameter_count(model.cfg)} seed={seed} "
          f"digest={model.w.digest().hex()}", file=out)


def cmd_encode(args, out):
    model, _ = _load_model(args)
    try:
        frames = load_frames(args.input, args.frames)
    except FileNotFoundError as exc:
        raise CliError("missing_frames", str(exc)) from None
    if args.gop < 1:
        raise CliError("bad_gop", "--gop must be >= 1")
    seq = codec.encode_sequence(frames, model, args.rate, args.gop)
    Path(args.output).write_bytes(seq.container.to_bytes())
    h, w = frames[0].shape[:2]
    rows = ["frame,type,hyper_bits,main_bits,bpp"]
    for i, res in enumerate(seq.results):
        kind = "I" if i % args.gop == 0 else "P"
        bpp = res.stats.total_bits / (h * w)
        rows.append(f"{i},{kind},{res.stats.hyper_bits},{res.stats.main_bits},{bpp:.6f}")
        print(f"frame {i} {kind} hyper_bits={res.stats.hyper_bits} main_bits={res.stats.main_bits} "
              f"bpp={bpp:.4f}", file=out)
    Path(args.stats or f"{args.output}.csv").write_text("\n".join(rows) + "\n")


def cmd_decode(args, out):
    model, _ = _load_model(args)
    data = _read_container(args.input)
    seq = codec.decode_sequence(data, model, args.mode, workers=model.workers, skip_corrupt=False)
    save_frames(args.output, seq.frames)
    for i, res in enumerate(seq.results):
        print(f"frame {i} mode={args.mode} seconds={res.seconds:.4f} phases={res.phases}", file=out)
    if seq.container.truncated:
        raise CliError("truncated", f"container truncated after {len(seq.frames)} whole frames")


def _read_container(path):
    try:
        return codec.BitstreamContainer.from_bytes(Path(path).read_bytes())
    except ValueError as exc:
        raise CliError("bad_container", str(exc)) from None


def _check_schedule(cfg):
    for grid in ((1, 1), (4, 4), (6, 6), (7, 5), (16, 16), (5, 33)):
        for s in sorted({1, 2, cfg.s}):
            rep = validate_schedule(grid, s, cfg.spatial_window, cfg.groups,
                                    depth=(max(1, cfg.spatial1_blocks), max(1, cfg.spatial2_blocks)))
            if not rep.ok:
                return rep.text()
    return None


def _check_kernels(cfg):
    rng = Rng(1234)
    d, nh = cfg.d_spatial, cfg.heads
    for mask in (MaskKind.SPATIAL_SELF, MaskKind.ACCUMULATOR, None):
        acfg = AttentionConfig(d, nh, cfg.spatial_window, mask)
        n_off = acfg.n_offsets
        w = AttentionWeights(*((rng.normal(d * d).reshape(d, d) / np.sqrt(d)).astype(np.float32) for _ in range(4)),
                             rng.normal(nh * n_off).reshape(nh, n_off).astype(np.float32))
        x = rng.normal(9 * 11 * d).reshape(9, 11, d).astype(np.float32)
        a, _ = swa2d(x, w, acfg, s=cfg.s, kernel="naive")
        b, _ = swa2d(x, w, acfg, s=cfg.s, kernel="tiled")
        if not np.array_equal(a, b):
            return f"tiled != naive for mask {mask}"
    return None


def _check_golden(path):
    try:
        cases = read_golden_vectors(path)
    except (OSError, FormatError, ValueError) as exc:
        return f"cannot read golden vectors: {exc}"
    if not cases:
        return "golden vector file is empty"
    for c in cases:
        tables = [ScaleTable.table(i) for i in c["scales"]]
        if len(tables) != len(c["values"]):
            return f"{c['name']}: scale/value count mismatch"
        if encode_symbols(c["values"], tables) != c["bytes"]:
            return f"{c['name']}: encoded bytes differ"
        try:
            if decode_symbols(c["bytes"], len(c["values"]), tables) != c["values"]:
                return f"{c['name']}: decoded values differ"
        except ValueError as exc:
            return f"{c['name']}: {exc}"
    return None


def cmd_verify(args, out):
    model, _ = _load_model(args)
    checks = (("schedule", lambda: _check_schedule(model.cfg)),
              ("kernel_equivalence", lambda: _check_kernels(model.cfg)),
              ("coder_golden", lambda: _check_golden(args.golden)))
    for name, fn in checks:
        problem = fn()
        if problem:
            raise CliError(name, problem)
        print(f"{name} ok", file=out)
    print("verify passed", file=out)


def cmd_bench(args, out):
    model, _ = _load_model(args)
    try:
        sizes = [int(v) for v in args.sizes.split(",") if v]
    except ValueError:
        raise CliError("bad_sizes", f"--sizes {args.sizes!r} is not a list of integers") from None
    modes = [m for m in args.modes.split(",") if m]
    for m in modes:
        if m not in ("serial", "wavefront"):
            raise CliError("bad_modes", f"unknown mode {m!r}")
    cfg = model.cfg
    lines = [",".join(BENCH_COLUMNS)]
    for n in sizes:
        rng = Rng(n)
        y = (rng.normal(cfg.latent_channels * n * n) * 3).astype(np.float32).reshape(cfg.latent_channels, n, n)
        t0 = time.perf_counter()
        enc = codec.encode_frame(y, FrameState(), model, args.rate)
        t_enc = time.perf_counter() - t0
        for m in modes:
            res = codec.decode_frame(enc.hyper, enc.main, FrameState(), model, args.rate, (n, n), m, model.workers)
            if not np.array_equal(res.y_hat, enc.y_hat):
                raise CliError("mismatch", f"{m} decode differs from the encoder at size {n}")
            lines.append(",".join(str(v) for v in (
                n, m, model.workers, f"{t_enc:.4f}", f"{res.seconds:.4f}", res.phases,
                f"{n * n / cfg.s:.2f}", codec.raster_steps((n, n), cfg.groups), cfg.s * cfg.groups)))
    text = "\n".join(lines) + "\n"
    out.write(text)
    if args.output:
        Path(args.output).write_text(text)


def cmd_heatmap(args, out):
    model, _ = _load_model(args)
    container = _read_container(args.input)
    if not 0 <= args.frame < len(container.frames):
        raise CliError("frame_out_of_range", f"frame {args.frame} not in [0, {len(container.frames)})")
    trimmed = codec.BitstreamContainer(container.header, container.frames[:args.frame + 1])
    seq = codec.decode_sequence(trimmed, model, "wavefront", workers=model.workers, skip_corrupt=False)
    stats = seq.results[args.frame].stats
    outp = Path(args.out)
    write_ppm(outp, codec.bit_allocation_map(stats))
    write_ppm(outp.with_name(outp.stem + "_x8.ppm"), codec.bit_allocation_map(stats, scale=8))
    outp.with_suffix(".csv").write_text(codec.bits_csv(stats))
    print(f"frame {args.frame} main_bits={stats.main_bits} estimated_bits={stats.main_estimate:.2f} "
          f"wrote {outp}", file=out)


COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "verify": cmd_verify, "bench": cmd_bench,
            "heatmap": cmd_heatmap, "gen-weights": cmd_gen_weights}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args, out)
    except CliError as exc:
        print(f"error code={exc.code} message={_one_line(exc)}", file=err)
        return 2 if exc.code == "usage" else 1
    except (FormatError, ValueError, OSError) as exc:
        print(f"error code={type(exc).__name__} message={_one_line(exc)}", file=err)
        return 1
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
