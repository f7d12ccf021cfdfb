from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phoenix8.datapath import (
    ACC_MAX,
    AccumulatorState,
    RawProduct,
    adder_tree,
    align_truncate,
    execute_layer_quantized,
    fp8_mul,
    lossless_width,
    pe_dot,
    pe_dot_array,
    ppm_step,
    product_frac_bits,
    raw_product_width,
    reload,
    spill,
    truncated_products,
    window_shift,
)
from phoenix8.graph import ADD, AVGPOOL, CONCAT, CONV, FC, MAXPOOL, RELU, INPUT, Layer
from phoenix8.minifloat import ALL_FORMATS, MiniFloatFormat, decode, encode, make_code
from phoenix8.quantizer import QuantizedBias, QuantizedTensor

M4E3 = MiniFloatFormat(4, 3)
U = Fraction(1, 2**12)


def code(x, fmt=M4E3):
    return encode(Fraction(x), fmt)


# ------------------------------------------------------------- multiplier


def test_fp8_mul_examples():
    p = fp8_mul(code(1.5), code(2.0), M4E3)
    assert (p.sign, p.mant_product, p.exp_sum) == (0, 384, 7)
    assert p.value(M4E3) == 3
    assert fp8_mul(code(31), code(31), M4E3) == RawProduct(0, 961, 14)
    assert fp8_mul(code(31), code(31), M4E3).value(M4E3) == 961
    tiny = make_code(0, 1, 0, M4E3)
    p = fp8_mul(tiny, tiny, M4E3)
    assert (p.mant_product, p.exp_sum) == (1, 2)
    assert p.value(M4E3) == U
    for fmt in ALL_FORMATS:
        for c in (0x00, 0x7F, 0xFF, 0x13):
            assert fp8_mul(c, 0, fmt).mant_product == 0


@pytest.mark.parametrize("fmt", ALL_FORMATS, ids=str)
def test_fp8_mul_exhaustive_matches_decoded_product(fmt):
    vals = [decode(c, fmt) for c in range(256)]
    a = fmt.mantissa_bits
    pw, sw = 2 * (a + 1), fmt.exponent_bits + 1
    for x in range(256):
        for y in range(256):
            p = fp8_mul(x, y, fmt)
            assert p.mant_product < 2**pw and p.exp_sum < 2**sw
            assert p.mant_product <= (2 ** (a + 1) - 1) ** 2
            assert p.exp_sum <= 2 * (2**fmt.exponent_bits - 1)
            assert p.pack(fmt) < 2 ** raw_product_width(fmt)
            assert p.value(fmt) == vals[x] * vals[y]


def test_raw_product_width_identity():
    for fmt in ALL_FORMATS:
        assert raw_product_width(fmt) == 2 * fmt.mantissa_bits + fmt.exponent_bits + 4


def test_debug_dump_order():
    p = fp8_mul(code(1.5), code(2.0), M4E3)
    assert p.dump(M4E3) == "S=0 P=0110000000 E=0111"


def test_widths():
    assert product_frac_bits(M4E3) == 12
    assert lossless_width(M4E3) == 22
    assert lossless_width(MiniFloatFormat(7, 0)) == 14


# ------------------------------------------------------- truncating module


def test_align_truncate_examples():
    p = fp8_mul(code(1.5), code(2.0), M4E3)
    assert align_truncate(p, 14, M4E3) == 12288
    big = fp8_mul(code(31), code(31), M4E3)
    assert align_truncate(big, 14, M4E3) == 16383
    assert align_truncate(big, 22, M4E3) == 961 * 2**12
    neg = fp8_mul(code(-31), code(31), M4E3)
    assert align_truncate(neg, 14, M4E3) == -16383
    for bad in (6, 23):
        with pytest.raises(ValueError):
            align_truncate(p, bad, M4E3)


def test_align_truncate_lossless_at_full_width():
    for x in range(0, 256, 7):
        for y in range(256):
            p = fp8_mul(x, y, M4E3)
            assert align_truncate(p, 22, M4E3) * U == p.value(M4E3)


def test_align_truncate_rounds_when_window_lsb_raised():
    p = fp8_mul(code(1.5), code(2.0), M4E3)  # 12288 u
    assert align_truncate(p, 14, M4E3, lsb_shift=13) == 2  # 1.5 -> 2 (ties to even)
    assert align_truncate(p, 14, M4E3, lsb_shift=14) == 1  # 0.75 -> 1
    q = fp8_mul(make_code(0, 1, 0, M4E3), make_code(0, 1, 0, M4E3), M4E3)
    assert align_truncate(q, 14, M4E3, lsb_shift=1) == 0  # 0.5 -> 0
    assert align_truncate(q, 14, M4E3, lsb_shift=-2) == 4


@pytest.mark.parametrize("fmt", ALL_FORMATS, ids=str)
def test_array_truncation_matches_scalar(fmt):
    rng = np.random.default_rng(7)
    x = rng.integers(0, 256, size=3000, dtype=np.uint8)
    y = rng.integers(0, 256, size=3000, dtype=np.uint8)
    hi = min(lossless_width(fmt), 40)
    for t in sorted({7, 10, min(14, hi), hi}):
        for s in (-3, 0, 2, 9):
            got = truncated_products(x, y, fmt, t, s)
            want = [align_truncate(fp8_mul(int(a), int(b), fmt), t, fmt, s) for a, b in zip(x, y)]
            assert got.tolist() == want, (t, s)


# --------------------------------------------------------------- adder tree


def test_adder_tree_examples():
    assert adder_tree([0] * 32, 14) == 0
    assert adder_tree([16383] * 32, 14) == 524256
    assert (524256).bit_length() <= 20
    vals = [5, -5, 16383, -16383, 7, -7]
    assert adder_tree(vals, 14) == 0
    with pytest.raises(ValueError):
        adder_tree([16384], 14)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-(2**14) + 1, 2**14 - 1), min_size=1, max_size=64))
def test_adder_tree_is_exact_sum(vals):
    assert adder_tree(vals, 14) == sum(vals)


# ----------------------------------------------------------------- PE dot


def test_pe_dot_examples():
    rng = np.random.default_rng(1)
    acts = rng.integers(0, 256, size=32).tolist()
    assert pe_dot(acts, [0] * 32, M4E3, 14) == 0
    w = [0] * 32
    w[5] = code(3.25)
    assert pe_dot(acts, w, M4E3, 14) == align_truncate(fp8_mul(acts[5], w[5], M4E3), 14, M4E3)


def test_pe_dot_full_width_is_exact():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a = rng.integers(0, 256, size=32).tolist()
        w = rng.integers(0, 256, size=32).tolist()
        exact = sum(decode(x, M4E3) * decode(y, M4E3) for x, y in zip(a, w))
        assert pe_dot(a, w, M4E3, 22) * U == exact
        assert pe_dot_array(np.array(a, np.uint8), np.array(w, np.uint8), M4E3, 22) == pe_dot(a, w, M4E3, 22)


# --------------------------------------------------------------------- PPM


def test_ppm_examples():
    st0 = AccumulatorState()
    _, c = ppm_step(0, st0, 0, True, True, 0, M4E3)
    assert c == 0
    _, c = ppm_step(12288, st0, 0, True, False, 0, M4E3)
    assert c == make_code(0, 8, 4, M4E3) and decode(c, M4E3) == 3
    _, c = ppm_step(-5 * 2**12, st0, 0, True, True, 0, M4E3)
    assert c == 0
    s1, c = ppm_step(4096, st0, 0, False, False, 0, M4E3)
    assert c is None and s1.value == 4096 and s1.passes == 1
    s2, c = ppm_step(4096, s1, 2048, True, False, 0, M4E3)
    assert decode(c, M4E3) == Fraction(5, 2)
    _, c = ppm_step(12288, st0, 0, True, False, -1, M4E3)
    assert decode(c, M4E3) == Fraction(3, 2)


def test_ppm_saturates_and_flags():
    st0 = AccumulatorState(value=ACC_MAX - 1)
    s1, _ = ppm_step(100, st0, 0, False, False, 0, M4E3)
    assert s1.value == ACC_MAX and s1.overflow
    s2, _ = ppm_step(-5, s1, 0, False, False, 0, M4E3)
    assert s2.overflow  # sticky


def test_spill_round_trip():
    assert spill(12345, 0) == 12345
    assert reload(spill(12345, 2), 2) == 12344
    assert reload(spill(-12346, 2), 2) == -12344  # -3086.5 -> -3086
    assert spill(10**9, 0) == 32767


# ------------------------------------------------------------ layer execution


def _qt(values, h, fmt=M4E3):
    return QuantizedTensor(np.vectorize(lambda v: encode(Fraction(v) * 2**h, fmt), otypes=[np.uint8])(values), fmt, h)


def _exact_conv(x, w, b, stride, pad, fmt):
    """Rational reference on dequantized operands."""
    xs = np.vectorize(lambda c: decode(c, fmt) * Fraction(2) ** -x.h_s, otypes=[object])(x.codes)
    ws = np.vectorize(lambda c: decode(c, fmt) * Fraction(2) ** -w.h_s, otypes=[object])(w.codes)
    bs = [Fraction(int(v), 2**b.frac_bits) for v in b.values]
    c, h, wd = xs.shape
    oc, ic, k, _ = ws.shape
    xp = np.full((c, h + 2 * pad, wd + 2 * pad), Fraction(0), dtype=object)
    xp[:, pad : pad + h, pad : pad + wd] = xs
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((oc, oh, ow), dtype=np.uint8)
    for o in range(oc):
        for i in range(oh):
            for j in range(ow):
                acc = bs[o]
                for ci in range(ic):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[ci, i * stride + di, j * stride + dj] * ws[o, ci, di, dj]
                out[o, i, j] = encode(acc * Fraction(2) ** x.h_s, fmt)
    return out


def test_identity_conv_copies_codes():
    rng = np.random.default_rng(3)
    x = QuantizedTensor(rng.integers(0, 256, size=(4, 5, 5), dtype=np.uint8), M4E3, 2)
    w = np.zeros((4, 4, 1, 1), dtype=np.uint8)
    for i in range(4):
        w[i, i] = code(1.0)
    layer = Layer("id", CONV, (INPUT,), out_channels=4, kernel=1)
    out, info = execute_layer_quantized(layer, [x], M4E3, 22, QuantizedTensor(w, M4E3, 0))
    canon = np.where(x.codes == 0x80, 0, x.codes)
    np.testing.assert_array_equal(out.codes, canon)
    assert not info.overflow
    # the narrow window keeps values below 2**(t - 12) in real units intact
    small = _qt(rng.uniform(-3.9, 3.9, size=(4, 5, 5)), 2)
    out, info = execute_layer_quantized(layer, [small], M4E3, 14, QuantizedTensor(w, M4E3, 0))
    np.testing.assert_array_equal(out.codes, np.where(small.codes == 0x80, 0, small.codes))
    assert info.saturated_products == 0


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_exact_oracle_at_full_width(stride, pad):
    rng = np.random.default_rng(4 + stride + pad)
    x = _qt(rng.normal(0, 1, size=(3, 4, 4)), 2)
    w = _qt(rng.normal(0, 0.3, size=(5, 3, 3, 3)), 4)
    b = QuantizedBias(rng.integers(-3000, 3000, size=5))
    layer = Layer("c", CONV, (INPUT,), out_channels=5, kernel=3, stride=stride, pad=pad)
    out, info = execute_layer_quantized(layer, [x], M4E3, 22, w, b)
    assert info.lsb_shift == 0
    np.testing.assert_array_equal(out.codes, _exact_conv(x, w, b, stride, pad, M4E3))


def test_fc_matches_exact_oracle_at_full_width():
    rng = np.random.default_rng(5)
    x = _qt(rng.normal(0, 1, size=(3, 2, 2)), 2)
    w = _qt(rng.normal(0, 0.2, size=(6, 12)), 5)
    b = QuantizedBias(rng.integers(-3000, 3000, size=6))
    layer = Layer("f", FC, (INPUT,), out_channels=6)
    out, _ = execute_layer_quantized(layer, [x], M4E3, 22, w, b)
    w4 = QuantizedTensor(w.codes.reshape(6, 12, 1, 1), M4E3, 5)
    x4 = QuantizedTensor(x.codes.reshape(12, 1, 1), M4E3, 2)
    np.testing.assert_array_equal(out.codes, _exact_conv(x4, w4, b, 1, 0, M4E3))


def test_spill_path_is_exact_when_peak_fits():
    rng = np.random.default_rng(6)
    x = _qt(rng.normal(0, 1, size=(64, 3, 3)), 2)
    w = _qt(rng.normal(0, 0.05, size=(4, 64, 3, 3)), 7)
    layer = Layer("c", CONV, (INPUT,), out_channels=4, kernel=3)
    ref, _ = execute_layer_quantized(layer, [x], M4E3, 14, w)
    out, info = execute_layer_quantized(layer, [x], M4E3, 14, w, spill_every=3)
    assert info.spill_shift is not None
    if info.spill_shift == 0:
        np.testing.assert_array_equal(out.codes, ref.codes)
    diff = np.abs(out.dequantize() - ref.dequantize()).max()
    assert diff <= 2.0 ** (info.spill_shift - 12 - 2 - 7 + 2) + np.abs(ref.dequantize()).max() / 16


def test_pool_relu_concat_add():
    rng = np.random.default_rng(8)
    x = QuantizedTensor(rng.integers(0, 256, size=(2, 4, 4), dtype=np.uint8), M4E3, 1)
    mp, _ = execute_layer_quantized(Layer("p", MAXPOOL, (0,), kernel=2, stride=2), [x], M4E3, 14)
    assert set(decode(int(c), M4E3) for c in mp.codes.ravel()) <= set(decode(int(c), M4E3) for c in x.codes.ravel())
    vals = np.vectorize(lambda c: decode(c, M4E3), otypes=[object])(x.codes)
    for c in range(2):
        for i in range(2):
            for j in range(2):
                assert decode(int(mp.codes[c, i, j]), M4E3) == vals[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()

    ap, _ = execute_layer_quantized(Layer("a", AVGPOOL, (0,), kernel=2, stride=2), [x], M4E3, 14)
    for c in range(2):
        for i in range(2):
            for j in range(2):
                mean = sum(vals[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].ravel()) / 4
                assert ap.codes[c, i, j] == encode(mean, M4E3)

    r, _ = execute_layer_quantized(Layer("r", RELU, (0,)), [x], M4E3, 14)
    assert all(decode(int(c), M4E3) >= 0 for c in r.codes.ravel())

    cat, _ = execute_layer_quantized(Layer("c", CONCAT, (0, 0)), [x, r], M4E3, 14)
    np.testing.assert_array_equal(cat.codes, np.concatenate([x.codes, r.codes]))

    s, _ = execute_layer_quantized(Layer("s", ADD, (0, 0)), [x, r], M4E3, 14)
    for a, b, o in zip(x.codes.ravel(), r.codes.ravel(), s.codes.ravel()):
        assert o == encode(decode(int(a), M4E3) + decode(int(b), M4E3), M4E3)


def test_layer_rejects_mixed_scales():
    x = QuantizedTensor(np.zeros((1, 2, 2), np.uint8), M4E3, 1)
    y = QuantizedTensor(np.zeros((1, 2, 2), np.uint8), M4E3, 2)
    with pytest.raises(ValueError):
        execute_layer_quantized(Layer("s", ADD, (0, 0)), [x, y], M4E3, 14)


def test_window_shift_policy():
    # t at full width is always exact
    for h in range(-6, 14):
        assert window_shift(M4E3, 22, h, 0) == 0
    assert window_shift(M4E3, 14, 2, 3) == 5
    assert window_shift(M4E3, 14, 2, 9) == 8  # clamped to the full-precision top
    assert window_shift(M4E3, 14, -4, 1) == 0  # never below u


def test_scalar_path_accepts_numpy_codes():
    rng = np.random.default_rng(11)
    a = rng.integers(0, 256, size=32, dtype=np.uint8)
    w = rng.integers(0, 256, size=32, dtype=np.uint8)
    want = pe_dot([int(x) for x in a], [int(x) for x in w], M4E3, 22)
    assert pe_dot(a, w, M4E3, 22) == want == pe_dot_array(a, w, M4E3, 22)
