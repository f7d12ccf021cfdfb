from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phoenix8.minifloat import (
    ALL_FORMATS,
    MiniFloatFormat,
    decode,
    decode_array,
    dequantize_value,
    encode,
    encode_array,
    enumerate_values,
    make_code,
    max_value,
    quantize_value,
)

M4E3 = MiniFloatFormat(4, 3)


def brute_nearest(x: Fraction, fmt):
    """Nearest value by scanning every code; ties to the even-rank neighbour."""
    pos = sorted({abs(decode(c, fmt)) for c in range(256)})
    mag = abs(x)
    best = min(range(len(pos)), key=lambda k: (abs(pos[k] - mag), k % 2))
    v = pos[best]
    return -v if x < 0 else v


def test_parse_and_name():
    assert MiniFloatFormat.parse("M4E3") == M4E3
    assert str(MiniFloatFormat.parse("M7E0")) == "M7E0"
    for bad in ["M4E4", "m4e3", "M8E0", "M4E3 x", "E3M4"]:
        with pytest.raises(ValueError):
            MiniFloatFormat.parse(bad)


def test_all_eight_formats_constructible():
    assert [f.name for f in ALL_FORMATS] == [f"M{a}E{7 - a}" for a in range(7, -1, -1)]
    assert {f.bias for f in ALL_FORMATS} == {0, 1, 3, 7, 15, 31, 63}
    assert MiniFloatFormat(7, 0).bias == 0
    assert M4E3.bias == 3


@pytest.mark.parametrize(
    "fields, expected",
    [
        ((0, 0, 0), Fraction(0)),
        ((0, 8, 3), Fraction(3, 2)),
        ((0, 15, 7), Fraction(31)),
        ((1, 1, 0), Fraction(-1, 64)),
    ],
)
def test_decode_examples(fields, expected):
    assert decode(make_code(*fields, M4E3), M4E3) == expected


@pytest.mark.parametrize(
    "name, expected",
    [("M4E3", Fraction(31)), ("M5E2", Fraction(63, 8)), ("M3E4", Fraction(480))],
)
def test_max_value(name, expected):
    fmt = MiniFloatFormat.parse(name)
    assert max_value(fmt) == expected
    assert max(abs(decode(c, fmt)) for c in range(256)) == expected


def test_encode_examples():
    assert encode(1.5, M4E3) == make_code(0, 8, 3, M4E3)
    assert encode(100.0, M4E3) == make_code(0, 15, 7, M4E3)
    assert encode(0.0, M4E3) == 0
    assert encode(-0.0, M4E3) == 0
    with pytest.raises(ValueError):
        encode(float("nan"), M4E3)
    with pytest.raises(ValueError):
        encode(float("inf"), M4E3)


def test_quantize_examples():
    c = quantize_value(0.75, 1, M4E3)
    assert c == make_code(0, 8, 3, M4E3)
    assert dequantize_value(c, 1, M4E3) == Fraction(3, 4)
    c = quantize_value(64, -1, M4E3)
    assert c == make_code(0, 15, 7, M4E3)
    assert dequantize_value(c, -1, M4E3) == 62
    for fmt in ALL_FORMATS:
        for h in (-10, 0, 9):
            assert quantize_value(0, h, fmt) == 0


def test_enumerate_values():
    vals = enumerate_values(M4E3)
    assert len(vals) == 255
    assert vals == sorted(vals)
    for fmt in ALL_FORMATS:
        vals = enumerate_values(fmt)
        assert vals == [-v for v in reversed(vals)]
    grid = enumerate_values(MiniFloatFormat(7, 0))
    assert len(grid) == 255
    assert len({b - a for a, b in zip(grid, grid[1:])}) == 1


@pytest.mark.parametrize("fmt", ALL_FORMATS, ids=str)
def test_spacing_ratio(fmt):
    pos = [v for v in enumerate_values(fmt) if v >= 0]
    gaps = [b - a for a, b in zip(pos, pos[1:])]
    ratio = max(gaps) / min(gaps)
    if fmt.exponent_bits == 0:
        assert ratio == 1
    elif fmt.mantissa_bits == 0:
        # no mantissa: the top gap spans the binade below the largest value
        assert ratio == 2 ** (2**fmt.exponent_bits - 3)
    else:
        assert ratio == 2 ** (2**fmt.exponent_bits - 2)


@pytest.mark.parametrize("fmt", ALL_FORMATS, ids=str)
def test_round_trip_every_code(fmt):
    for c in range(256):
        back = encode(decode(c, fmt), fmt)
        assert back == (0 if c == 0x80 else c)


@pytest.mark.parametrize("fmt", ALL_FORMATS, ids=str)
def test_array_path_matches_scalar_on_codes_and_midpoints(fmt):
    vals = enumerate_values(fmt)
    probes = list(vals)
    probes += [(a + b) / 2 for a, b in zip(vals, vals[1:])]
    probes += [vals[-1] * 2, vals[0] * 2]
    expected = np.array([encode(p, fmt) for p in probes], dtype=np.uint8)
    got = encode_array(np.array([float(p) for p in probes]), fmt)
    np.testing.assert_array_equal(got, expected)
    np.testing.assert_array_equal(
        decode_array(np.arange(256, dtype=np.uint8), fmt),
        [float(decode(c, fmt)) for c in range(256)],
    )


@pytest.mark.parametrize("fmt", ALL_FORMATS, ids=str)
def test_ties_go_to_even_rank(fmt):
    pos = [v for v in enumerate_values(fmt) if v >= 0]
    for k in range(len(pos) - 1):
        mid = (pos[k] + pos[k + 1]) / 2
        want = pos[k] if k % 2 == 0 else pos[k + 1]
        assert decode(encode(mid, fmt), fmt) == want


formats = st.sampled_from(ALL_FORMATS)
reals = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=400, deadline=None)
@given(formats, reals)
def test_encode_matches_brute_force(fmt, x):
    assert decode(encode(x, fmt), fmt) == brute_nearest(Fraction(x), fmt)


@settings(max_examples=300, deadline=None)
@given(formats, reals, reals)
def test_monotone(fmt, x, y):
    if x > y:
        x, y = y, x
    assert decode(encode(x, fmt), fmt) <= decode(encode(y, fmt), fmt)


@settings(max_examples=300, deadline=None)
@given(formats, reals)
def test_sign_symmetry(fmt, x):
    c, n = encode(x, fmt), encode(-x, fmt)
    if c == 0:
        assert n == 0
    else:
        assert n == c ^ 0x80


@settings(max_examples=300, deadline=None)
@given(formats, reals)
def test_half_ulp_bound(fmt, x):
    q = Fraction(x)
    top = max_value(fmt)
    if abs(q) > top:
        return
    vals = enumerate_values(fmt)
    below = max(v for v in vals if v <= q)
    above = min(v for v in vals if v >= q)
    err = abs(q - decode(encode(q, fmt), fmt))
    assert err <= (above - below) / 2


@settings(max_examples=200, deadline=None)
@given(formats, st.lists(reals, min_size=1, max_size=40), st.integers(-10, 9))
def test_array_matches_scalar_random(fmt, xs, h):
    got = encode_array(np.ldexp(np.array(xs), h), fmt)
    want = [quantize_value(x, h, fmt) for x in xs]
    assert got.tolist() == want
