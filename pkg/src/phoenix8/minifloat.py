"""8-bit MaEb minifloat formats.

A code byte is laid out sign | mantissa | exponent, MSB first. There are no
Inf/NaN encodings: every byte decodes to a finite value and out-of-range
inputs saturate to the largest magnitude.

Scalar functions work on exact ``Fraction`` values. The ``*_array`` variants
work on float64 numpy arrays; every representable value, and every midpoint
between neighbours, is exactly representable in float64, so the array path
rounds exactly like the scalar one.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from numbers import Rational

import numpy as np

__all__ = [
    "MiniFloatFormat",
    "ALL_FORMATS",
    "decode",
    "encode",
    "max_value",
    "enumerate_values",
    "quantize_value",
    "dequantize_value",
    "decode_array",
    "encode_array",
    "quantize_array",
    "dequantize_array",
    "fields",
    "make_code",
]

_FORMAT_RE = re.compile(r"^M([0-7])E([0-7])$")


@dataclass(frozen=True)
class MiniFloatFormat:
    """Sign + ``mantissa_bits`` + ``exponent_bits`` = 8."""

    mantissa_bits: int
    exponent_bits: int

    def __post_init__(self) -> None:
        a, b = self.mantissa_bits, self.exponent_bits
        if not (0 <= a <= 7 and 0 <= b <= 7 and a + b == 7):
            raise ValueError(f"invalid minifloat format M{a}E{b}: need a+b=7")

    @classmethod
    def parse(cls, name: str) -> "MiniFloatFormat":
        m = _FORMAT_RE.match(name.strip())
        if m is None:
            raise ValueError(f"format must look like 'M4E3', got {name!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    @property
    def name(self) -> str:
        return f"M{self.mantissa_bits}E{self.exponent_bits}"

    @property
    def bias(self) -> int:
        b = self.exponent_bits
        return 2 ** (b - 1) - 1 if b >= 1 else 0

    @property
    def max_exponent_field(self) -> int:
        return 2**self.exponent_bits - 1

    @property
    def min_effective_exponent(self) -> int:
        # subnormals share the exponent of E=1; with no exponent field the
        # whole grid is plain sign-magnitude fixed point
        return 1 if self.exponent_bits >= 1 else 0

    def __str__(self) -> str:
        return self.name


ALL_FORMATS: tuple[MiniFloatFormat, ...] = tuple(
    MiniFloatFormat(a, 7 - a) for a in range(7, -1, -1)
)


def fields(code: int, fmt: MiniFloatFormat) -> tuple[int, int, int]:
    """Split a code byte into (sign, mantissa, exponent) fields."""
    code = int(code)  # numpy uint8 scalars would wrap in later arithmetic
    if not 0 <= code <= 0xFF:
        raise ValueError(f"code out of byte range: {code}")
    b = fmt.exponent_bits
    sign = code >> 7
    mant = (code >> b) & ((1 << fmt.mantissa_bits) - 1)
    exp = code & ((1 << b) - 1)
    return sign, mant, exp


def make_code(sign: int, mant: int, exp: int, fmt: MiniFloatFormat) -> int:
    if not (0 <= mant < 2**fmt.mantissa_bits and 0 <= exp < 2**fmt.exponent_bits):
        raise ValueError(f"field out of range for {fmt}: M={mant} E={exp}")
    return ((sign & 1) << 7) | (mant << fmt.exponent_bits) | exp


def significand(mant: int, exp: int, fmt: MiniFloatFormat) -> tuple[int, int]:
    """Integer significand (hidden bit included) and effective exponent.

    The decoded magnitude is ``sig * 2**(eff - bias - a)``.
    """
    a = fmt.mantissa_bits
    if fmt.exponent_bits == 0:
        return mant, 0
    if exp == 0:
        return mant, 1
    return (1 << a) | mant, exp


def decode(code: int, fmt: MiniFloatFormat) -> Fraction:
    sign, mant, exp = fields(code, fmt)
    sig, eff = significand(mant, exp, fmt)
    shift = eff - fmt.bias - fmt.mantissa_bits
    mag = Fraction(sig) * (Fraction(2) ** shift)
    return -mag if sign else mag


@lru_cache(maxsize=None)
def _magnitude_table(fmt: MiniFloatFormat) -> tuple[tuple[Fraction, ...], tuple[int, ...]]:
    """Positive-sign values sorted ascending, with their codes.

    The sort index ("rank") is E * 2**a + M for b >= 1 and M for b = 0, so
    adjacent ranks are adjacent values and ties go to the even rank.
    """
    pairs = [(decode(c, fmt), c) for c in range(128)]
    pairs.sort()
    values = tuple(v for v, _ in pairs)
    codes = tuple(c for _, c in pairs)
    if len(set(values)) != 128:
        raise AssertionError(f"{fmt}: positive codes are not distinct")
    return values, codes


def max_value(fmt: MiniFloatFormat) -> Fraction:
    return _magnitude_table(fmt)[0][-1]


def enumerate_values(fmt: MiniFloatFormat) -> list[Fraction]:
    """All representable values, sorted, with +0 and -0 merged."""
    pos = _magnitude_table(fmt)[0]
    return [-v for v in reversed(pos[1:])] + list(pos)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, Rational):
        return Fraction(x)
    xf = float(x)
    if not math.isfinite(xf):
        raise ValueError(f"cannot encode non-finite value {x!r}")
    return Fraction(xf)


def _nearest_rank(mag: Fraction, values: tuple[Fraction, ...]) -> int:
    if mag >= values[-1]:
        return len(values) - 1
    lo, hi = 0, len(values) - 1
    # invariant: values[lo] <= mag < values[hi]
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if values[mid] <= mag:
            lo = mid
        else:
            hi = mid
    d_lo = mag - values[lo]
    d_hi = values[hi] - mag
    if d_lo < d_hi:
        return lo
    if d_hi < d_lo:
        return hi
    return lo if lo % 2 == 0 else hi


def encode(x, fmt: MiniFloatFormat) -> int:
    """Round to the nearest code (ties to even), saturating at +-max."""
    q = _as_fraction(x)
    values, codes = _magnitude_table(fmt)
    code = codes[_nearest_rank(abs(q), values)]
    if q < 0 and code != 0:
        code |= 0x80
    return code


def quantize_value(x, h_s: int, fmt: MiniFloatFormat) -> int:
    return encode(_as_fraction(x) * Fraction(2) ** h_s, fmt)


def dequantize_value(code: int, h_s: int, fmt: MiniFloatFormat) -> Fraction:
    return decode(code, fmt) * Fraction(2) ** (-h_s)


# ---------------------------------------------------------------- arrays


@lru_cache(maxsize=None)
def _array_tables(fmt: MiniFloatFormat):
    values, codes = _magnitude_table(fmt)
    mags = np.array([float(v) for v in values], dtype=np.float64)
    mids = (mags[:-1] + mags[1:]) / 2.0  # exact: <= 9 significant bits
    rank_codes = np.array(codes, dtype=np.uint8)
    decoded = np.array([float(decode(c, fmt)) for c in range(256)], dtype=np.float64)
    for arr in (mags, mids, rank_codes, decoded):
        arr.setflags(write=False)
    return mags, mids, rank_codes, decoded


def decode_array(codes, fmt: MiniFloatFormat) -> np.ndarray:
    """Decode a uint8 array to exact float64 values."""
    table = _array_tables(fmt)[3]
    return table[np.asarray(codes, dtype=np.uint8)]


def encode_array(x, fmt: MiniFloatFormat) -> np.ndarray:
    """Vectorised ``encode`` for float arrays; exact for float64 input."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot encode non-finite values")
    mags, mids, rank_codes, _ = _array_tables(fmt)
    mag = np.abs(x)
    # number of midpoints strictly below mag -> candidate rank
    lo = np.searchsorted(mids, mag, side="left")
    # mag exactly on a midpoint: lo points at the upper neighbour's midpoint
    # index; pick the even rank of the two neighbours
    on_mid = (lo < len(mids)) & (mids[np.minimum(lo, len(mids) - 1)] == mag)
    rank = np.where(on_mid & (lo % 2 == 1), lo + 1, lo)
    code = rank_codes[rank]
    neg = (x < 0) & (code != 0)
    return np.where(neg, code | 0x80, code).astype(np.uint8)


def quantize_array(x, h_s: int, fmt: MiniFloatFormat) -> np.ndarray:
    return encode_array(np.ldexp(np.asarray(x, dtype=np.float64), h_s), fmt)


def dequantize_array(codes, h_s: int, fmt: MiniFloatFormat) -> np.ndarray:
    return np.ldexp(decode_array(codes, fmt), -h_s)
