import numpy as np
import pytest

from phoenix8.datapath import lossless_width
from phoenix8.graph import CONV, INPUT, RELU, GraphError, Layer, NetworkGraph, infer_fp32
from phoenix8.inference import infer_quantized, quantize_input, relative_l2_pct, run_quantized
from phoenix8.minifloat import MiniFloatFormat, quantize_array
from phoenix8.quantizer import apply_divisors, collect_stats, quantize_network
from phoenix8.toy import chain_network, random_toy_network

M4E3 = MiniFloatFormat(4, 3)


def _quantized(net, calib, fmt=M4E3):
    stats = collect_stats(net, calib, batch=len(calib))
    qnet, _ = quantize_network(net, stats, fmt)
    return qnet


def test_relative_l2():
    assert relative_l2_pct([1.0, 1.0], [1.0, 1.0]) == 0.0
    assert relative_l2_pct([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert relative_l2_pct([1.1, 0.0], [1.0, 0.0]) == pytest.approx(10.0)
    assert relative_l2_pct([1.0], [0.0]) == float("inf")


def test_zero_input_gives_zero_output():
    rng = np.random.default_rng(0)
    net = chain_network(rng, (4, 6, 6), widths=(6, 5))
    for layer in net.layers:
        if layer.bias is not None:
            layer.bias[:] = 0.0
    qnet = _quantized(net, rng.normal(size=(2,) + net.input_shape))
    out, report = infer_quantized(qnet, np.zeros(net.input_shape), 14)
    assert np.all(out.dequantize() == 0.0)
    assert report.output_rel_l2_pct == 0.0


def test_identity_network_changes_no_codes():
    net = NetworkGraph((3, 4, 4), [Layer("id", CONV, (INPUT,), out_channels=3, kernel=1, weight=np.eye(3).reshape(3, 3, 1, 1))])
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 4, 4))
    x /= np.sqrt(np.mean(x**2))  # unit second moment: the merged weights stay 1
    qnet = _quantized(net, x[None])
    out, report = infer_quantized(qnet, x, 14)
    np.testing.assert_array_equal(out.codes, quantize_input(qnet, x).codes)
    assert report.layers[0].changed_codes == 0.0


def test_full_width_is_one_rounding_of_exact_result():
    # every product kept: the only rounding is the output encode
    rng = np.random.default_rng(2)
    net = chain_network(rng, (4, 6, 6), widths=(8,), kernel=3)
    x = rng.normal(size=(4,) + net.input_shape)
    qnet = _quantized(net, x)
    deq = qnet.dequantized_graph()
    for img in x:
        # float64 holds these short sums of FP8 products exactly
        ref = infer_fp32(deq, quantize_input(qnet, img).dequantize())[-1]
        outs, infos = run_quantized(qnet, img, lossless_width(M4E3))
        assert not infos[0].overflow
        np.testing.assert_array_equal(outs[-1].codes, quantize_array(ref, qnet.h_s_act, M4E3))


@pytest.mark.parametrize("seed", range(3))
def test_truncation_error_not_below_full_width(seed):
    rng = np.random.default_rng(seed)
    net = random_toy_network(rng, 4)
    calib = rng.normal(size=(8,) + net.input_shape)
    qnet = _quantized(net, calib)
    ref = apply_divisors(net, qnet.divisors)
    x = rng.normal(size=net.input_shape)
    e14 = infer_quantized(qnet, x, 14, ref)[1].output_rel_l2_pct
    e22 = infer_quantized(qnet, x, 22, ref)[1].output_rel_l2_pct
    assert e22 <= e14 + 0.5
    assert e14 < 10.0


def test_report_layers_cover_network():
    rng = np.random.default_rng(4)
    net = random_toy_network(rng, 3)
    qnet = _quantized(net, rng.normal(size=(4,) + net.input_shape))
    _, report = infer_quantized(qnet, rng.normal(size=net.input_shape), 14)
    assert [e.name for e in report.layers] == [layer.name for layer in net.layers]
    d = report.to_dict()
    assert d["t"] == 14 and d["fmt"] == "M4E3"
    assert all(0.0 <= e["changed_codes"] <= 1.0 for e in d["layers"])


def test_wide_format_skips_changed_codes():
    rng = np.random.default_rng(5)
    net = NetworkGraph((2, 4, 4), [Layer("c", CONV, (INPUT,), out_channels=2, kernel=1, weight=rng.normal(size=(2, 2, 1, 1))), Layer("r", RELU, (0,))])
    fmt = MiniFloatFormat(1, 6)
    qnet = _quantized(net, rng.normal(size=(2, 2, 4, 4)), fmt)
    _, report = infer_quantized(qnet, rng.normal(size=(2, 4, 4)), 14)
    assert report.layers[0].changed_codes is None


def test_input_shape_checked():
    rng = np.random.default_rng(6)
    net = chain_network(rng, (4, 6, 6), widths=(4,))
    qnet = _quantized(net, rng.normal(size=(1,) + net.input_shape))
    with pytest.raises(GraphError):
        infer_quantized(qnet, np.zeros((4, 5, 5)), 14)
