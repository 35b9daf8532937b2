"""Integer range coder with discretised-Gaussian tables.

The coder keeps a 56-bit window of the low end of the interval and emits a
byte whenever the range drops below 2^48, propagating carries through a cached
byte and a count of pending 0xFF bytes. Symbol probabilities are 16-bit
frequencies. A stream ends with a flush that leaves the final interval
identified by its first four bytes; the decoder pads the stream with exactly
three zero bytes and checks at the end that all of them were consumed.

Values outside [-127, 127] are coded as an escape symbol followed by the
Exp-Golomb (order 0) code of ``|v| - 128`` in equiprobable bits.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from functools import lru_cache
import math
from typing import Callable, Iterable, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
SUPPORT = 127
N_SCALES = 64
SIGMA_LO = 0.11
SIGMA_HI = 64.0

_WINDOW_BITS = 56
_WINDOW = (1 << _WINDOW_BITS) - 1
_TOP = 1 << 48
_SHIFT = _WINDOW_BITS - 8
_FLUSH_ALIGN = 1 << 24
_MAX_EG_PREFIX = 40


class CoderError(ValueError):
    pass


class TruncatedStream(CoderError):
    pass


@dataclass(frozen=True)
class CdfTable:
    """Cumulative frequencies ``c[0..K]`` with c[0] = 0 and c[K] = 2^16.

    With ``escapes`` the first and last index stand for "below" and "above"
    the inner support, and ``offset`` is the value of index 1; otherwise index
    ``i`` is the value ``offset + i``.
    """

    cdf: tuple
    offset: int
    escapes: bool = False

    def __post_init__(self):
        c = self.cdf
        if len(c) < 2 or c[0] != 0 or c[-1] != TOTAL:
            raise ValueError("cdf must start at 0 and end at 65536")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("cdf must be strictly increasing")

    @property
    def n_symbols(self) -> int:
        return len(self.cdf) - 1

    def freq(self, index: int) -> int:
        return self.cdf[index + 1] - self.cdf[index]

    @property
    def inner_range(self) -> tuple[int, int]:
        if self.escapes:
            return self.offset, self.offset + self.n_symbols - 3
        return self.offset, self.offset + self.n_symbols - 1

    def index_of(self, value: int) -> tuple[int, int | None]:
        """(symbol index, escape magnitude or None)."""
        lo, hi = self.inner_range
        if lo <= value <= hi:
            return value - self.offset + (1 if self.escapes else 0), None
        if not self.escapes:
            raise CoderError(f"value {value} outside table support [{lo}, {hi}]")
        if value < lo:
            return 0, -value - (SUPPORT + 1)
        return self.n_symbols - 1, value - (SUPPORT + 1)

    @classmethod
    def from_frequencies(cls, freqs: Sequence[int], offset: int = 0, escapes: bool = False) -> "CdfTable":
        c = [0]
        for f in freqs:
            c.append(c[-1] + int(f))
        return cls(tuple(c), offset, escapes)

    @classmethod
    def uniform(cls, n: int, offset: int = 0) -> "CdfTable":
        if TOTAL % n:
            base = TOTAL // n
            freqs = [base] * n
            freqs[0] += TOTAL - base * n
        else:
            freqs = [TOTAL // n] * n
        return cls.from_frequencies(freqs, offset)


_BYPASS = CdfTable((0, TOTAL // 2, TOTAL), 0)


def erfc(x: float) -> float:
    """Complementary error function, Chebyshev-fitted form (relative error below 1.2e-7)."""
    z = abs(x)
    t = 1.0 / (1.0 + 0.5 * z)
    poly = (-z * z - 1.26551223 + t * (1.00002368 + t * (0.37409196 + t * (0.09678418 + t * (
        -0.18628806 + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (
            -0.82215223 + t * 0.17087277)))))))))
    ans = t * math.exp(poly)
    return ans if x >= 0 else 2.0 - ans


def upper_tail(x: float) -> float:
    """Q(x) = 1 - Phi(x)."""
    return 0.5 * erfc(x / math.sqrt(2.0))


def scale_values() -> np.ndarray:
    return np.exp(np.linspace(math.log(SIGMA_LO), math.log(SIGMA_HI), N_SCALES))


_SCALES = scale_values()


def gaussian_frequencies(sigma: float) -> list[int]:
    """257 frequencies: low escape, values -127..127, high escape."""
    inner = 2 * SUPPORT + 1
    k = inner + 2
    # masses for v >= 0 from upper tails (no cancellation), mirrored for v < 0
    half = [0.0] * (SUPPORT + 1)
    half[0] = 1.0 - 2.0 * upper_tail(0.5 / sigma)
    for v in range(1, SUPPORT + 1):
        half[v] = upper_tail((v - 0.5) / sigma) - upper_tail((v + 0.5) / sigma)
    tail = upper_tail((SUPPORT + 0.5) / sigma)
    budget = TOTAL - k
    f_half = [1 + int(math.floor(max(p, 0.0) * budget)) for p in half]
    f_tail = 1 + int(math.floor(max(tail, 0.0) * budget))
    freqs = [f_tail] + [f_half[abs(v)] for v in range(-SUPPORT, SUPPORT + 1)] + [f_tail]
    freqs[1 + SUPPORT] += TOTAL - sum(freqs)
    return freqs


@lru_cache(maxsize=None)
def build_gaussian_cdf(sigma_index: int) -> CdfTable:
    if not 0 <= sigma_index < N_SCALES:
        raise ValueError(f"scale index {sigma_index} outside [0, {N_SCALES})")
    return CdfTable.from_frequencies(gaussian_frequencies(float(_SCALES[sigma_index])), -SUPPORT, escapes=True)


class ScaleTable:
    """The shared quantisation of sigma onto 64 log-spaced table entries."""

    values = _SCALES

    @staticmethod
    def index_of(sigma) -> np.ndarray | int:
        """Smallest i with table[i] >= sigma, clamped to the last entry."""
        idx = np.searchsorted(_SCALES, np.asarray(sigma, dtype=np.float64), side="left")
        idx = np.minimum(idx, N_SCALES - 1)
        return int(idx) if np.ndim(idx) == 0 else idx.astype(np.int64)

    @staticmethod
    def table(index: int) -> CdfTable:
        return build_gaussian_cdf(int(index))


def _eg0_bits(m: int) -> list[int]:
    n = (m + 1).bit_length()
    return [0] * (n - 1) + [(m + 1) >> (n - 1 - i) & 1 for i in range(n)]


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _WINDOW
        self._cache: int | None = None
        self._pending = 0
        self._out = bytearray()
        self._done = False

    def _shift_low(self):
        if self.low < (0xFF << _SHIFT) or self.low > _WINDOW:
            carry = self.low >> _WINDOW_BITS
            if self._cache is not None:
                self._out.append((self._cache + carry) & 0xFF)
            self._out.extend(bytes([(0xFF + carry) & 0xFF]) * self._pending)
            self._pending = 0
            self._cache = (self.low >> _SHIFT) & 0xFF
        else:
            self._pending += 1
        self.low = (self.low << 8) & _WINDOW

    def encode(self, cum_lo: int, freq: int):
        if self._done:
            raise CoderError("encoder already finished")
        r = self.range >> PRECISION
        self.low += r * cum_lo
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_index(self, table: CdfTable, index: int):
        self.encode(table.cdf[index], table.cdf[index + 1] - table.cdf[index])

    def encode_bits(self, bits: Iterable[int]):
        for b in bits:
            self.encode_index(_BYPASS, int(b))

    def encode_value(self, table: CdfTable, value: int):
        index, extra = table.index_of(int(value))
        self.encode_index(table, index)
        if extra is not None:
            self.encode_bits(_eg0_bits(extra))

    def finish(self) -> bytes:
        if not self._done:
            # any value in [low, low + range) identifies the interval; pick one whose
            # last three window bytes are zero so they need not be written
            self.low = -(-self.low // _FLUSH_ALIGN) * _FLUSH_ALIGN
            for _ in range(5):
                self._shift_low()
            self._done = True
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = bytes(data)
        self._pos = 0
        self.range = _WINDOW
        self.code = 0
        for _ in range(_WINDOW_BITS // 8):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        p = self._pos
        self._pos += 1
        return self._data[p] if p < len(self._data) else 0

    @property
    def padding_read(self) -> int:
        return max(0, self._pos - len(self._data))

    def decode(self, table: CdfTable) -> int:
        r = self.range >> PRECISION
        target = self.code // r
        if target >= TOTAL:
            raise CoderError("corrupt stream: code outside coding interval")
        c = table.cdf
        index = bisect_right(c, target) - 1
        self.code -= r * c[index]
        self.range = r * (c[index + 1] - c[index])
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next())
            if self.padding_read > 3:
                raise TruncatedStream("stream ended before all symbols were decoded")
        if self.code >= self.range:
            raise CoderError("corrupt stream: code outside coding interval")
        return index

    def decode_bits(self, n: int) -> list[int]:
        return [self.decode(_BYPASS) for _ in range(n)]

    def _decode_eg0(self) -> int:
        zeros = 0
        while self.decode(_BYPASS) == 0:
            zeros += 1
            if zeros > _MAX_EG_PREFIX:
                raise CoderError("corrupt stream: escape code too long")
        value = 1
        for _ in range(zeros):
            value = (value << 1) | self.decode(_BYPASS)
        return value - 1

    def decode_value(self, table: CdfTable) -> int:
        index = self.decode(table)
        if table.escapes:
            if index == 0:
                return -(SUPPORT + 1) - self._decode_eg0()
            if index == table.n_symbols - 1:
                return SUPPORT + 1 + self._decode_eg0()
            return table.offset + index - 1
        return table.offset + index

    def finish(self):
        """Raise unless the stream was consumed exactly and ends on a flush boundary."""
        if self.padding_read != 3:
            if self._pos < len(self._data) + 3:
                raise CoderError(f"{len(self._data) + 3 - self._pos} trailing bytes after the last symbol")
            raise TruncatedStream("stream shorter than its symbols require")
        if self.code >= _FLUSH_ALIGN:
            raise CoderError("corrupt stream: flush tail does not match")


TableSource = CdfTable | Sequence[CdfTable] | Callable[[int], CdfTable]


def _table_getter(cdf_for: TableSource) -> Callable[[int], CdfTable]:
    if isinstance(cdf_for, CdfTable):
        return lambda i: cdf_for
    if callable(cdf_for):
        return cdf_for
    return lambda i: cdf_for[i]


def encode_symbols(symbols: Sequence[int], cdf_for: TableSource) -> bytes:
    get = _table_getter(cdf_for)
    enc = RangeEncoder()
    for i, v in enumerate(symbols):
        enc.encode_value(get(i), int(v))
    return enc.finish()


def decode_symbols(data: bytes, count: int, cdf_for: TableSource) -> list[int]:
    get = _table_getter(cdf_for)
    dec = RangeDecoder(data)
    out = [dec.decode_value(get(i)) for i in range(count)]
    dec.finish()
    return out


def value_bits(table: CdfTable, value: int) -> float:
    index, extra = table.index_of(int(value))
    bits = -math.log2(table.freq(index) / TOTAL)
    if extra is not None:
        bits += len(_eg0_bits(extra))
    return bits


def estimate_bits(symbols: Sequence[int], cdf_for: TableSource) -> float:
    get = _table_getter(cdf_for)
    return float(sum(value_bits(get(i), v) for i, v in enumerate(symbols)))
