"""Bit-exact model of one processing element and of quantized layer execution.

Data flow per lane: FP8 x FP8 multiply into a raw (sign, mantissa product,
exponent sum) triple, alignment of the product onto a common fixed-point
grid, truncation to a ``t``-bit signed window, exact adder-tree reduction,
then a 32-bit saturating accumulator in the post-processing module that
adds the bias and re-encodes to FP8.

Units. The finest product grid has weight ``u = 2**-product_frac_bits(fmt)``
(2**-12 for M4E3). ``align_truncate`` expresses a product as an integer
multiple of ``u * 2**lsb_shift``; with ``lsb_shift=0`` the window is the
full-precision LSB and only saturates.

Scalar functions take Python ints and are the reference; the ``*_array``
functions are their numpy counterparts used for whole layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import ADD, AVGPOOL, CONCAT, CONV, FC, MAXPOOL, RELU, GraphError, Layer
from .minifloat import (
    MiniFloatFormat,
    decode,
    decode_array,
    encode,
    encode_array,
    fields,
    significand,
)
from .quantizer import BIAS_FRAC_BITS, QuantizedBias, QuantizedTensor

NM_DEFAULT = 32
T_MIN = 7
ACC_BITS = 32
ACC_MAX = 2 ** (ACC_BITS - 1) - 1
ACC_MIN = -(2 ** (ACC_BITS - 1))
SPILL_BITS = 16
# real-domain LSB of the truncation window for normalized activations
WINDOW_LSB = -BIAS_FRAC_BITS
ARRAY_T_MAX = 48


# ------------------------------------------------------------ format math


def product_frac_bits(fmt: MiniFloatFormat) -> int:
    """-log2 of the product unit u."""
    return 2 * (fmt.mantissa_bits + fmt.bias - fmt.min_effective_exponent)


def _exp_sum_min(fmt: MiniFloatFormat) -> int:
    return 2 * fmt.min_effective_exponent


def _max_significand(fmt: MiniFloatFormat) -> int:
    a = fmt.mantissa_bits
    return (1 << (a + 1)) - 1 if fmt.exponent_bits else (1 << a) - 1


def _max_effective_exponent(fmt: MiniFloatFormat) -> int:
    return fmt.max_exponent_field if fmt.exponent_bits else 0


def lossless_width(fmt: MiniFloatFormat) -> int:
    """Magnitude bits needed to hold every aligned product exactly (22 for M4E3)."""
    top = _max_significand(fmt) ** 2 << (2 * _max_effective_exponent(fmt) - _exp_sum_min(fmt))
    return top.bit_length()


def raw_product_width(fmt: MiniFloatFormat) -> int:
    return 1 + 2 * (fmt.mantissa_bits + 1) + (fmt.exponent_bits + 1)


def _check_t(t: int, fmt: MiniFloatFormat) -> None:
    hi = lossless_width(fmt)
    if not T_MIN <= t <= hi:
        raise ValueError(f"t={t} outside [{T_MIN}, {hi}] for {fmt}")


# ------------------------------------------------------------- multiplier


@dataclass(frozen=True)
class RawProduct:
    """Multiplier output in sign-product-sum order; bias not yet removed."""

    sign: int
    mant_product: int
    exp_sum: int

    def value(self, fmt: MiniFloatFormat) -> Fraction:
        shift = self.exp_sum - 2 * fmt.bias - 2 * fmt.mantissa_bits
        v = Fraction(self.mant_product) * Fraction(2) ** shift
        return -v if self.sign else v

    def pack(self, fmt: MiniFloatFormat) -> int:
        pw = 2 * (fmt.mantissa_bits + 1)
        sw = fmt.exponent_bits + 1
        return (self.sign << (pw + sw)) | (self.mant_product << sw) | self.exp_sum

    def dump(self, fmt: MiniFloatFormat) -> str:
        """One debug line: sign, product and sum fields as binary."""
        pw = 2 * (fmt.mantissa_bits + 1)
        sw = fmt.exponent_bits + 1
        return f"S={self.sign} P={self.mant_product:0{pw}b} E={self.exp_sum:0{sw}b}"


def fp8_mul(x: int, y: int, fmt: MiniFloatFormat) -> RawProduct:
    sx, mx, ex = fields(x, fmt)
    sy, my, ey = fields(y, fmt)
    sig_x, eff_x = significand(mx, ex, fmt)
    sig_y, eff_y = significand(my, ey, fmt)
    return RawProduct(sx ^ sy, sig_x * sig_y, eff_x + eff_y)


# ------------------------------------------------------ truncating module


def _round_shift_right(v: int, r: int) -> int:
    """Non-negative ``v / 2**r`` rounded to nearest, ties to even."""
    if r <= 0:
        return v << -r
    q, rem = v >> r, v & ((1 << r) - 1)
    half = 1 << (r - 1)
    if rem > half or (rem == half and q & 1):
        q += 1
    return q


def align_truncate(p: RawProduct, t: int, fmt: MiniFloatFormat, lsb_shift: int = 0) -> int:
    """Aligned product as a signed integer in units of ``u * 2**lsb_shift``.

    Magnitude saturates at ``2**t - 1``; bits below the window LSB are
    rounded to nearest even.
    """
    _check_t(t, fmt)
    full = p.mant_product << (p.exp_sum - _exp_sum_min(fmt))
    mag = min(_round_shift_right(full, lsb_shift), (1 << t) - 1)
    return -mag if p.sign else mag


def adder_tree(values, t: int | None = None) -> int:
    """Pairwise reduction; exact, with a width check when ``t`` is given."""
    vals = [int(v) for v in values]
    if t is not None:
        lim = (1 << t) - 1
        if any(abs(v) > lim for v in vals):
            raise ValueError(f"adder-tree input exceeds {t}-bit magnitude")
    n = max(len(vals), 1)
    while len(vals) > 1:
        nxt = [vals[i] + vals[i + 1] for i in range(0, len(vals) - 1, 2)]
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    total = vals[0] if vals else 0
    if t is not None:
        width = t + 1 + (n - 1).bit_length()
        assert -(1 << (width - 1)) <= total < (1 << (width - 1))
    return total


def pe_dot(acts, weights, fmt: MiniFloatFormat, t: int, lsb_shift: int = 0) -> int:
    if len(acts) != len(weights):
        raise ValueError("activation and weight vectors differ in length")
    lanes = [align_truncate(fp8_mul(a, w, fmt), t, fmt, lsb_shift) for a, w in zip(acts, weights)]
    return adder_tree(lanes, t)


# ---------------------------------------------------- post-processing module


@dataclass(frozen=True)
class AccumulatorState:
    value: int = 0
    passes: int = 0
    overflow: bool = False
    pixel: tuple[int, ...] = ()


def _sat32(v: int) -> tuple[int, bool]:
    if v > ACC_MAX:
        return ACC_MAX, True
    if v < ACC_MIN:
        return ACC_MIN, True
    return v, False


def ppm_step(
    psum: int,
    state: AccumulatorState,
    bias: int,
    last_pass: bool,
    relu: bool,
    out_shift: int,
    fmt: MiniFloatFormat,
) -> tuple[AccumulatorState, int | None]:
    """Accumulate one adder-tree sum; on the last pass emit an FP8 code.

    ``bias`` is already in accumulator units. The emitted value is
    ``(acc + bias) * u * 2**out_shift``, clamped at zero when ``relu``.
    """
    acc, ovf = _sat32(state.value + int(psum))
    state = AccumulatorState(acc, state.passes + 1, state.overflow or ovf, state.pixel)
    if not last_pass:
        return state, None
    v, ovf = _sat32(acc + int(bias))
    if ovf:
        state = AccumulatorState(state.value, state.passes, True, state.pixel)
    if relu and v < 0:
        v = 0
    scale = Fraction(2) ** (out_shift - product_frac_bits(fmt))
    return state, encode(v * scale, fmt)


def spill(value: int, spill_shift: int) -> int:
    """Accumulator to a 16-bit OFMB word (round-nearest-even, saturating)."""
    mag = _round_shift_right(abs(value), spill_shift)
    lim = 2 ** (SPILL_BITS - 1) - 1
    mag = min(mag, lim)
    return -mag if value < 0 else mag


def reload(word: int, spill_shift: int) -> int:
    return int(word) << spill_shift


# ------------------------------------------------------------------ arrays


@dataclass(frozen=True)
class _Tables:
    sign: np.ndarray
    sig: np.ndarray
    eff: np.ndarray


_TABLES: dict[MiniFloatFormat, _Tables] = {}


def _tables(fmt: MiniFloatFormat) -> _Tables:
    if fmt not in _TABLES:
        sign, sig, eff = [], [], []
        for c in range(256):
            s, m, e = fields(c, fmt)
            g, f = significand(m, e, fmt)
            sign.append(s)
            sig.append(g)
            eff.append(f)
        _TABLES[fmt] = _Tables(*(np.array(v, dtype=np.int64) for v in (sign, sig, eff)))
    return _TABLES[fmt]


def truncated_products(x_codes, w_codes, fmt: MiniFloatFormat, t: int, lsb_shift: int = 0) -> np.ndarray:
    """Elementwise ``align_truncate(fp8_mul(x, w))`` over broadcast arrays."""
    _check_t(t, fmt)
    if t > ARRAY_T_MAX:
        raise ValueError(f"array path supports t <= {ARRAY_T_MAX}")
    tb = _tables(fmt)
    x = np.asarray(x_codes, dtype=np.uint8)
    w = np.asarray(w_codes, dtype=np.uint8)
    sign = tb.sign[x] ^ tb.sign[w]
    mant = tb.sig[x] * tb.sig[w]
    shift = tb.eff[x] + tb.eff[w] - _exp_sum_min(fmt) - lsb_shift
    lim = (1 << t) - 1
    bitlen = np.frexp(mant.astype(np.float64))[1].astype(np.int64)
    # left shifts: saturate by bit length before shifting to stay in int64
    left = np.maximum(shift, 0)
    over = (mant > 0) & (bitlen + left > t)
    mag_left = np.where(over, lim, mant << np.minimum(left, t))
    # right shifts: round half to even
    r = np.clip(-shift, 0, 62)
    q = mant >> r
    rem = mant & ((np.int64(1) << r) - 1)
    half = np.where(r > 0, np.int64(1) << np.maximum(r - 1, 0), 0)
    up = (r > 0) & ((rem > half) | ((rem == half) & (q & 1 == 1)))
    mag_right = np.minimum(q + up, lim)
    mag = np.where(shift >= 0, mag_left, mag_right)
    return np.where(sign == 1, -mag, mag)


def pe_dot_array(acts, weights, fmt: MiniFloatFormat, t: int, lsb_shift: int = 0) -> np.ndarray:
    """Dot products over the last axis (one PE pass per row)."""
    return truncated_products(acts, weights, fmt, t, lsb_shift).sum(axis=-1)


def window_shift(fmt: MiniFloatFormat, t: int, h_act: int, h_w: int, window_lsb: int = WINDOW_LSB) -> int:
    """``lsb_shift`` placing the window LSB at ``2**window_lsb`` in real units.

    Products of codes at scales ``h_act`` and ``h_w`` have real unit
    ``u * 2**-(h_act + h_w)``. The shift is clamped so the window never
    drops below ``u`` nor rises above the full-precision span, which keeps
    ``t = lossless_width(fmt)`` exact.
    """
    want = h_act + h_w + product_frac_bits(fmt) + window_lsb
    return int(min(max(want, 0), lossless_width(fmt) - t))


def _shift_round_array(v: np.ndarray, shift: int) -> np.ndarray:
    """Signed ``v * 2**shift`` rounded half-even when shift < 0."""
    v = np.asarray(v, dtype=np.int64)
    if shift >= 0:
        return v << shift
    r = min(-shift, 62)
    mag = np.abs(v)
    q = mag >> r
    rem = mag & ((np.int64(1) << r) - 1)
    half = np.int64(1) << (r - 1)
    q = q + ((rem > half) | ((rem == half) & (q & 1 == 1)))
    return np.where(v < 0, -q, q)


@dataclass
class LayerRunInfo:
    lsb_shift: int = 0
    overflow: bool = False
    spill_shift: int | None = None
    saturated_products: int = 0
    passes: int = 0
    notes: list[str] = field(default_factory=list)


def _accumulate(psums: np.ndarray, spill_every: int | None, spill_shift: int) -> tuple[np.ndarray, bool]:
    """Run the PPM accumulator over passes (last axis) with 32-bit saturation."""
    acc = np.zeros(psums.shape[:-1], dtype=np.int64)
    overflow = False
    n = psums.shape[-1]
    for p in range(n):
        acc = acc + psums[..., p]
        clipped = np.clip(acc, ACC_MIN, ACC_MAX)
        overflow |= bool(np.any(clipped != acc))
        acc = clipped
        if spill_every and (p + 1) % spill_every == 0 and p + 1 < n:
            lim = 2 ** (SPILL_BITS - 1) - 1
            word = np.clip(_shift_round_array(acc, -spill_shift), -lim, lim)
            acc = word << spill_shift
    return acc, overflow


def _mac_layer(
    acts: np.ndarray,
    wts: np.ndarray,
    bias: QuantizedBias,
    fmt: MiniFloatFormat,
    t: int,
    h_act: int,
    h_w: int,
    window_lsb: int,
    spill_every: int | None,
) -> tuple[np.ndarray, LayerRunInfo]:
    """acts (P, passes, Nm), wts (OC, passes, Nm) -> output codes (P, OC)."""
    s = window_shift(fmt, t, h_act, h_w, window_lsb)
    info = LayerRunInfo(lsb_shift=s, passes=acts.shape[1])
    lim = (1 << t) - 1
    n_pix, n_oc = acts.shape[0], wts.shape[0]
    psums = np.empty((n_pix, n_oc, acts.shape[1]), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(1, n_oc * acts.shape[1] * acts.shape[2]))
    for p0 in range(0, n_pix, chunk):
        prods = truncated_products(acts[p0 : p0 + chunk, None], wts[None], fmt, t, s)
        info.saturated_products += int(np.count_nonzero(np.abs(prods) == lim))
        psums[p0 : p0 + chunk] = prods.sum(axis=-1)
    spill_shift = 0
    if spill_every:
        peak = int(np.abs(np.cumsum(psums, axis=-1)).max(initial=0))
        spill_shift = max(0, peak.bit_length() - (SPILL_BITS - 1))
        info.spill_shift = spill_shift
    acc, info.overflow = _accumulate(psums, spill_every, spill_shift)
    # bias: Q.BIAS_FRAC_BITS real -> accumulator units
    b_shift = h_act + h_w + product_frac_bits(fmt) - bias.frac_bits - s
    b_acc = _shift_round_array(bias.values.astype(np.int64), b_shift)
    total = acc + b_acc[None, :]
    clipped = np.clip(total, ACC_MIN, ACC_MAX)
    info.overflow |= bool(np.any(clipped != total))
    out_exp = s - product_frac_bits(fmt) - h_w
    codes = encode_array(np.ldexp(clipped.astype(np.float64), out_exp), fmt)
    return codes, info


def _pad_lanes(x: np.ndarray, nm: int) -> np.ndarray:
    """Pad the last axis to a multiple of nm with zero codes and split into passes."""
    n = x.shape[-1]
    passes = -(-n // nm)
    if passes * nm != n:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, passes * nm - n)]
        x = np.pad(x, pad)
    return x.reshape(*x.shape[:-1], passes, nm)


def execute_layer_quantized(
    layer: Layer,
    inputs: list[QuantizedTensor],
    fmt: MiniFloatFormat,
    t: int,
    weight: QuantizedTensor | None = None,
    bias: QuantizedBias | None = None,
    *,
    nm: int = NM_DEFAULT,
    window_lsb: int = WINDOW_LSB,
    spill_every: int | None = None,
) -> tuple[QuantizedTensor, LayerRunInfo]:
    """Run one layer on (C, H, W) code tensors that share one activation scale."""
    if not inputs:
        raise GraphError(f"{layer.name}: no inputs")
    h_act = inputs[0].h_s
    if any(q.h_s != h_act for q in inputs) or any(q.fmt != fmt for q in inputs):
        raise GraphError(f"{layer.name}: inputs disagree on format or scale")
    x = inputs[0].codes
    kind = layer.kind
    info = LayerRunInfo()

    if kind in (CONV, FC):
        if weight is None:
            raise GraphError(f"{layer.name}: missing weights")
        if bias is None:
            bias = QuantizedBias(np.zeros(weight.shape[0], dtype=np.int16))
        w = weight.codes
        if kind == CONV:
            oc, ic, k, _ = w.shape
            if x.shape[0] != ic:
                raise GraphError(f"{layer.name}: expected {ic} input channels, got {x.shape[0]}")
            xp = np.pad(x, ((0, 0), (layer.pad, layer.pad), (layer.pad, layer.pad))) if layer.pad else x
            win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, :: layer.stride, :: layer.stride]
            _, oh, ow = win.shape[:3]
            # (C, OH, OW, K, K) -> (pixels, K*K, C): lanes run over input channels
            a = win.transpose(1, 2, 3, 4, 0).reshape(oh * ow, k * k, ic)
            wk = w.transpose(0, 2, 3, 1).reshape(oc, k * k, ic)
            a = _pad_lanes(a, nm).reshape(oh * ow, -1, nm)
            wk = _pad_lanes(wk, nm).reshape(oc, -1, nm)
            out_shape = (oc, oh, ow)
        else:
            oc = w.shape[0]
            flat = x.reshape(1, -1)
            if flat.shape[1] != w.shape[1]:
                raise GraphError(f"{layer.name}: fc expects {w.shape[1]} inputs, got {flat.shape[1]}")
            a = _pad_lanes(flat, nm)
            wk = _pad_lanes(w, nm)
            out_shape = (oc, 1, 1)
        codes, info = _mac_layer(a, wk, bias, fmt, t, h_act, weight.h_s, window_lsb, spill_every)
        return QuantizedTensor(codes.T.reshape(out_shape), fmt, h_act), info

    if kind == RELU:
        return QuantizedTensor(np.where(x & 0x80, 0, x), fmt, h_act), info

    if kind == CONCAT:
        if len({q.shape[1:] for q in inputs}) != 1:
            raise GraphError(f"{layer.name}: concat operands differ spatially")
        return QuantizedTensor(np.concatenate([q.codes for q in inputs], axis=0), fmt, h_act), info

    if kind == ADD:
        if inputs[0].shape != inputs[1].shape:
            raise GraphError(f"{layer.name}: residual operands differ in shape")
        # the sum of two codes is exact in float64; one rounding on re-encode
        total = decode_array(inputs[0].codes, fmt) + decode_array(inputs[1].codes, fmt)
        return QuantizedTensor(encode_array(total, fmt), fmt, h_act), info

    if kind == MAXPOOL:
        vals = decode_array(x, fmt)
        if layer.pad:
            p = layer.pad
            vals = np.pad(vals, ((0, 0), (p, p), (p, p)), constant_values=-np.inf)
        win = sliding_window_view(vals, (layer.kernel, layer.kernel), axis=(1, 2))
        best = win[:, :: layer.stride, :: layer.stride].max(axis=(-2, -1))
        return QuantizedTensor(encode_array(best, fmt), fmt, h_act), info

    if kind == AVGPOOL:
        return QuantizedTensor(_avgpool_exact(x, layer, fmt), fmt, h_act), info

    raise GraphError(f"{layer.name}: layer kind {kind!r} is not executable on the datapath")


def _avgpool_exact(x: np.ndarray, layer: Layer, fmt: MiniFloatFormat) -> np.ndarray:
    # exact rational mean per window; formats span up to 2^126 so use ints
    table = [decode(c, fmt) for c in range(256)]
    k, s, p = layer.kernel, layer.stride, layer.pad
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    out = np.empty((c, oh, ow), dtype=np.uint8)
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                win = xp[ch, i * s : i * s + k, j * s : j * s + k].ravel()
                out[ch, i, j] = encode(sum(table[v] for v in win) / (k * k), fmt)
    return out
