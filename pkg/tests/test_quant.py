"""INT8 quantization: tensor mapping, calibration, integer conv and quantized inference."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv_oracle
from swrn import model, ops, quant, recurrence
from swrn.errors import ConfigurationError, QuantOverflow


def test_endpoint_mapping():
    w = np.array([1.27, -0.635, 0.0, 0.005, -1.27])
    q, s = quant.quantize_tensor(w)
    assert math.isclose(s, 0.01, rel_tol=1e-12)
    assert q.dtype == np.int8
    np.testing.assert_array_equal(q, [127, -64, 0, 1, -127])


def test_zero_maps_to_zero_for_any_scale():
    for s in (1e-6, 0.01, 3.0):
        assert quant.quantize_tensor(np.zeros(4), s)[0].tolist() == [0, 0, 0, 0]
    q, s = quant.quantize_tensor(np.zeros((2, 2)))
    assert s == 1.0 and not q.any()


def test_round_half_away():
    np.testing.assert_array_equal(quant.round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])),
                                  [1, -1, 2, -3, 0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(1, 500), mag=st.floats(1e-3, 1e3))
def test_roundtrip_error_at_most_half_scale(seed, n, mag):
    x = np.random.default_rng(seed).standard_normal(n) * mag
    q, s = quant.quantize_tensor(x)
    assert np.abs(quant.dequantize(q, s) - x).max() <= s / 2 + 1e-9
    assert np.abs(q).max() <= 127


def test_int_conv_matches_integer_oracle():
    rng = np.random.default_rng(0)
    q_in = rng.integers(-127, 128, (2, 5, 4, 6)).astype(np.int8)
    qw = rng.integers(-127, 128, (3, 5, 3, 3)).astype(np.int8)
    qb = rng.integers(-10**6, 10**6, 3).astype(np.int32)
    k = quant.QuantKernel(qw, 0.1, qb, 0.2)
    acc = quant.int_conv(q_in, k)
    ref = conv_oracle(q_in.astype(np.int64), qw.astype(np.int64), qb.astype(np.int64))
    assert acc.dtype == np.int64
    np.testing.assert_array_equal(acc, ref.astype(np.int64))


def test_int_conv_overflow_is_reported():
    q_in = np.full((1, 200, 3, 3), 127, np.int8)
    qw = np.full((1, 200, 3, 3), 127, np.int8)
    k = quant.QuantKernel(qw, 1.0, np.array([2**31 - 1 - 5], np.int32), 1.0)
    with pytest.raises(QuantOverflow):
        quant.int_conv(q_in, k, "big")


# --- calibration ------------------------------------------------------------

def _clip(n=3, h=4, w=4, seed=0, value=None):
    rng = np.random.default_rng(seed)
    if value is not None:
        return [np.full((1, 3, h, w), value, np.float32) for _ in range(n)]
    return [rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32) for _ in range(n)]


def test_calibration_zero_model():
    cfg = model.ModelConfig(channels=4)
    stats = quant.calibrate(model.Parameters.zeros(cfg), [_clip()])
    assert stats.count == 3
    for site, m in stats.max_abs.items():
        if site in ("x", "y", "f1.0.in", "f2.0.in"):
            assert m > 0, site
        else:
            assert m == 0, site


def test_calibration_constant_clip_and_determinism():
    # a stateless variant, so the first conv sees only the frames
    p = model.init_params(model.ModelConfig(channels=4, variant="sliding_window"), 0)
    clips = [_clip(value=0.5)]
    a, b = quant.calibrate(p, clips), quant.calibrate(p, clips)
    assert a.max_abs == b.max_abs
    assert a.max_abs["x"] == 0.5 and a.max_abs["f1.0.in"] == 0.5


def test_calibration_accumulates():
    p = model.init_params(model.ModelConfig(channels=4), 0)
    one = quant.calibrate(p, [_clip(seed=1)])
    two = quant.calibrate(p, [_clip(seed=2)], stats=one)
    both = quant.calibrate(p, [_clip(seed=1), _clip(seed=2)])
    assert two.max_abs == both.max_abs and two.count == 6
    assert one.merged(quant.calibrate(p, [_clip(seed=2)])).max_abs == both.max_abs
    with pytest.raises(ConfigurationError):
        quant.calibrate(p, [])


# --- quantized inference ----------------------------------------------------

@pytest.mark.parametrize("variant", model.VARIANTS)
def test_zero_params_quantized_equals_float(variant):
    cfg = model.ModelConfig(channels=4, variant=variant)
    p = model.Parameters.zeros(cfg)
    clip = _clip(n=3, seed=3)
    qm = quant.quantize_model(p, quant.calibrate(p, [clip]))
    qrun = quant.run_clip_quantized(qm, clip)
    frun = recurrence.run_clip(p, clip)
    for a, b in zip(qrun.outputs, frun.outputs):
        np.testing.assert_array_equal(a, b)


def _fake_quant_forward(qm, xp, xc, xn, hf, hb):
    """Float64 reference: quantize-dequantize each conv input, dequantized weights."""
    k, cfg = qm.kernels, qm.config

    def conv(name, x, relu):
        kk = k[name]
        xq = quant.dequantize(quant.quantize_tensor(x, kk.input_scale)[0], kk.input_scale)
        out = conv_oracle(xq, quant.dequantize(kk.q_weight, kk.weight_scale),
                          kk.q_bias.astype(np.float64) * kk.acc_scale)
        return np.maximum(out, 0) if relu else out

    def chain(prefix, x, relu_last):
        names = [n for n in k if n.startswith(prefix + ".")]
        for i, n in enumerate(names):
            x = conv(n, x, relu_last or i < len(names) - 1)
        return x
    fea_f = chain("f1", np.concatenate([xp, xc, hf], axis=1), True)
    fea_b = chain("f2", np.concatenate([xn, xc, hb], axis=1), True)
    head = chain("f3", np.concatenate([fea_f, fea_b], axis=1), False)
    y = ops.depth_to_space_x4(head) + ops.bilinear_upsample_x4(xc.astype(np.float64))
    hf2 = conv("h_fwd_update", fea_f, True)
    hb2 = conv("h_bwd_update", fea_b, True)
    return y, hf2, hb2


def test_quantized_forward_matches_fake_quant_reference():
    cfg = model.ModelConfig(channels=3, layers_f1=2, layers_f2=2, layers_f3=2)
    p = model.init_params(cfg, 4)
    clip = _clip(n=2, h=3, w=3, seed=4)
    qm = quant.quantize_model(p, quant.calibrate(p, [clip]))
    hf = np.zeros((1, 3, 3, 3), np.float32)
    y, qhf, qhb, _ = quant.quantized_forward(qm, clip[0], clip[0], clip[1], hf, hf)
    ry, rhf, rhb = _fake_quant_forward(qm, clip[0], clip[0], clip[1], hf, hf)
    # the only differences are float32 rounding in rescaling between layers
    np.testing.assert_allclose(y, ry, atol=1e-4)
    # the int8 carry saturates at 127 steps of the calibrated scale
    rhf = np.minimum(rhf, 127 * qhf.scale)
    np.testing.assert_allclose(qhf.dequantize(np.float64), rhf, atol=qhf.scale / 2 + 1e-4)
    assert qhf.q.dtype == np.int8 and qhb.q.dtype == np.int8


def test_quantized_weights_within_half_scale_and_bias_int32():
    p = model.init_params(model.ModelConfig(channels=8), 1)
    qm = quant.quantize_model(p, quant.calibrate(p, [_clip()]))
    deq = qm.dequantized_params()
    for name, k in p.kernels.items():
        qk = qm.kernels[name]
        assert qk.q_weight.dtype == np.int8 and qk.q_bias.dtype == np.int32
        assert np.abs(deq.kernels[name].weight - k.weight).max() <= qk.weight_scale / 2 + 1e-7


def test_quantized_inference_deterministic_and_close():
    p = model.init_params(model.ModelConfig(channels=8), 2)
    clips = [_clip(n=4, h=8, w=8, seed=s) for s in range(3)]
    qm = quant.quantize_model(p, quant.calibrate(p, clips))
    a = quant.run_clip_quantized(qm, clips[0])
    b = quant.run_clip_quantized(qm, clips[0])
    f = recurrence.run_clip(p, clips[0])
    for x, y, z in zip(a.outputs, b.outputs, f.outputs):
        np.testing.assert_array_equal(x, y)
        assert 10 * np.log10(1 / np.mean((x - z) ** 2)) > 30


def test_quantize_model_requires_stats():
    p = model.init_params(model.ModelConfig(channels=4), 0)
    with pytest.raises(ConfigurationError):
        quant.quantize_model(p, quant.CalibrationStats())
