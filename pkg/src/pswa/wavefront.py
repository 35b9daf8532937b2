"""Diagonal wavefront schedule, causality masks and decodability checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class MaskKind(str, Enum):
    SPATIAL_SELF = "spatial_self"        # key step <= query step
    ACCUMULATOR = "accumulator"          # key step <  query step
    TEMPORAL_CAUSAL = "temporal_causal"  # key frame <= query frame
    CHANNEL_BLOCK_LT = "channel_block_lt"  # key group <= query group


def step_of(pos: tuple[int, int], s: int) -> int:
    if s < 1:
        raise ValueError("s must be >= 1")
    y, x = pos
    return (y + x) % s


def step_map(h: int, w: int, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + xx) % s).astype(np.int64)


def mask_allows(kind: MaskKind | str, query_pos, key_pos, s: int) -> bool:
    """Whether ``query_pos`` may attend ``key_pos``.

    Spatial kinds take (y, x) positions, the temporal kind takes frame indices
    and the channel kind takes group indices.
    """
    kind = MaskKind(kind)
    if kind is MaskKind.TEMPORAL_CAUSAL:
        return key_pos <= query_pos
    if kind is MaskKind.CHANNEL_BLOCK_LT:
        return key_pos <= query_pos
    sq = step_of(query_pos, s)
    sk = step_of(key_pos, s)
    if kind is MaskKind.ACCUMULATOR:
        return sk < sq
    return sk <= sq


def allowed_steps(kind: MaskKind | str | None, key_step, query_step):
    """Vectorised mask predicate over step arrays; ``None`` allows everything."""
    if kind is None:
        return np.ones(np.broadcast(key_step, query_step).shape, dtype=bool)
    kind = MaskKind(kind)
    if kind is MaskKind.ACCUMULATOR:
        return key_step < query_step
    if kind is MaskKind.SPATIAL_SELF:
        return key_step <= query_step
    raise ValueError(f"{kind.value} is not a spatial mask")


def positions_of_step(grid: tuple[int, int], s: int, t: int) -> list[tuple[int, int]]:
    """Positions decoded at step ``t``, in raster order."""
    if not 0 <= t < s:
        raise ValueError(f"step {t} outside [0, {s})")
    h, w = grid
    return [(y, x) for y in range(h) for x in range(w) if (y + x) % s == t]


def channel_mask(n_groups: int, d_g: int) -> np.ndarray:
    """Block-lower-triangular mask indexed [output, input].

    Output group ``i`` reads input groups ``0..i`` only; transpose it to mask a
    weight applied as ``x @ W``.
    """
    if n_groups < 1 or d_g < 1:
        raise ValueError("channel_mask needs N >= 1 and d_g >= 1")
    blocks = np.arange(n_groups * d_g) // d_g
    return blocks[:, None] >= blocks[None, :]


@dataclass(frozen=True)
class WavefrontSchedule:
    s: int
    grid: tuple[int, int]
    steps: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("s must be >= 1")
        object.__setattr__(self, "steps", step_map(*self.grid, self.s))

    def positions(self, t: int) -> list[tuple[int, int]]:
        return positions_of_step(self.grid, self.s, t)

    def position_arrays(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        ys, xs = np.nonzero(self.steps == t)
        return ys, xs

    def occupancy(self) -> list[int]:
        return [int(np.count_nonzero(self.steps == t)) for t in range(self.s)]


@dataclass
class ScheduleReport:
    grid: tuple[int, int]
    s: int
    n_groups: int
    window: tuple[int, int]
    sequential_steps: int
    occupancy: list[int]
    violation: str | None = None

    @property
    def ok(self) -> bool:
        return self.violation is None

    def text(self) -> str:
        status = "ok" if self.ok else f"VIOLATION {self.violation}"
        return (f"grid={self.grid[0]}x{self.grid[1]} s={self.s} N={self.n_groups} "
                f"window={self.window[0]}x{self.window[1]} steps={self.sequential_steps} "
                f"occupancy={self.occupancy} {status}")


def decode_order(grid: tuple[int, int], s: int, n_groups: int) -> list[tuple[int, int, int]]:
    """Canonical symbol order as (y, x, group): step-major, group-minor, raster."""
    order = []
    for t in range(s):
        pos = positions_of_step(grid, s, t)
        for g in range(n_groups):
            order.extend((y, x, g) for y, x in pos)
    return order


def _window_offsets(window):
    wh, ww = window
    return [(dy, dx) for dy in range(-(wh // 2), wh // 2 + 1) for dx in range(-(ww // 2), ww // 2 + 1)]


def _propagate(latest: np.ndarray, steps: np.ndarray, window, kind: MaskKind, keep_self: bool) -> np.ndarray:
    """Max step of current-frame symbols reaching each position after one windowed layer.

    ``-1`` means "no current-frame symbol reaches this position".
    """
    h, w = steps.shape
    out = latest.copy() if keep_self else np.full_like(latest, -1)
    for dy, dx in _window_offsets(window):
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        ky = slice(max(0, dy), min(h, h + dy))
        kx = slice(max(0, dx), min(w, w + dx))
        ok = allowed_steps(kind, steps[ky, kx], steps[ys, xs])
        cand = np.where(ok, latest[ky, kx], -1)
        out[ys, xs] = np.maximum(out[ys, xs], cand)
    return out


def validate_schedule(grid: tuple[int, int], s: int, window: tuple[int, int], n_groups: int,
                      depth: tuple[int, int] = (1, 1)) -> ScheduleReport:
    """Check that the wavefront schedule yields a decodable dependency graph.

    (a) accumulator edges point strictly backwards in step, (b) spatial
    self-attention edges never point forwards, (c) the canonical decode order
    is topological for the symbol graph of a spatial1 -> accumulator ->
    spatial2 stack with ``depth`` self-attention layers on either side, and
    (d) the number of sequential phases is s * N.
    """
    wh, ww = window
    if wh % 2 == 0 or ww % 2 == 0:
        raise ValueError("window extents must be odd")
    h, w = grid
    steps = step_map(h, w, s)
    report = ScheduleReport(grid=(h, w), s=s, n_groups=n_groups, window=(wh, ww),
                            sequential_steps=s * n_groups,
                            occupancy=[int(np.count_nonzero(steps == t)) for t in range(s)])

    for kind, strict in ((MaskKind.ACCUMULATOR, True), (MaskKind.SPATIAL_SELF, False)):
        for dy, dx in _window_offsets(window):
            ys = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, -dx), min(w, w - dx))
            sq = steps[ys, xs]
            sk = steps[max(0, dy):min(h, h + dy), max(0, dx):min(w, w + dx)]
            ok = allowed_steps(kind, sk, sq)
            backward = sk < sq if strict else sk <= sq
            bad = np.argwhere(ok & ~backward)
            if bad.size:
                y, x = int(bad[0][0]) + ys.start, int(bad[0][1]) + xs.start
                report.violation = (f"{kind.value} edge ({y + dy},{x + dx})->({y},{x}) "
                                    f"steps {steps[y + dy, x + dx]}->{steps[y, x]}")
                return report

    order = decode_order(grid, s, n_groups)
    phase_of = {(y, x, g): (int(steps[y, x]), g) for y, x, g in order}
    if len(phase_of) != h * w * n_groups:
        report.violation = "decode order does not cover every symbol exactly once"
        return report

    latest = steps.copy()
    for _ in range(depth[0]):
        latest = _propagate(latest, steps, window, MaskKind.SPATIAL_SELF, keep_self=True)
    latest = _propagate(latest, steps, window, MaskKind.ACCUMULATOR, keep_self=False)
    for _ in range(depth[1]):
        latest = _propagate(latest, steps, window, MaskKind.SPATIAL_SELF, keep_self=True)
    bad = np.argwhere(latest >= steps)
    if bad.size:
        y, x = (int(v) for v in bad[0])
        report.violation = (f"symbol ({y},{x}) at step {steps[y, x]} depends on a symbol "
                            f"decoded at step {latest[y, x]}")
        return report

    # Channel edges (p, g') -> (p, g) with g' < g: earlier phase at the same step.
    for (y, x, g), (t, _) in phase_of.items():
        if g > 0 and phase_of[(y, x, g - 1)] >= (t, g):
            report.violation = f"group edge at ({y},{x}) group {g - 1}->{g} is not ordered"
            return report
    return report
