"""Loss, optimiser, schedule, patch sampling and the training loop."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import adam_scalar_trace
from swrn import data, model, ops, training
from swrn.errors import ConfigurationError, ContractViolation, TrainingDivergence
from swrn.gradcheck import numerical_gradient
from swrn.ops import ConvKernel

TC = training.TrainConfig()


# --- Charbonnier ----------------------------------------------------------

def test_charbonnier_equal_inputs_is_exactly_eps():
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
    loss, grad = training.charbonnier_loss(x, x.copy(), 1e-6)
    assert loss == 1e-6
    assert not grad.any()


def test_charbonnier_closed_forms():
    loss, _ = training.charbonnier_loss(np.array([3e-6]), np.array([0.0]), 1e-6)
    assert math.isclose(loss, math.sqrt(1e-11), rel_tol=1e-12)
    assert abs(loss - 3.16228e-6) < 1e-11
    loss, _ = training.charbonnier_loss(np.array([1.0]), np.array([0.0]), 1e-6)
    assert abs(loss - 1.0) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12), st.integers(0, 100))
def test_charbonnier_matches_definition(diffs, seed):
    d = np.array(diffs)
    target = np.random.default_rng(seed).uniform(0, 1, d.shape)
    loss, grad = training.charbonnier_loss(target + d, target, 1e-6)
    dd = (target + d) - target
    assert math.isclose(loss, float(np.mean(np.sqrt(dd * dd + 1e-12))), rel_tol=1e-12, abs_tol=1e-15)
    np.testing.assert_allclose(grad, dd / np.sqrt(dd * dd + 1e-12) / d.size, rtol=1e-12)


def test_charbonnier_gradient_finite_differences():
    rng = np.random.default_rng(1)
    target = rng.uniform(0, 1, (1, 3, 4, 4))
    # keep every residual clear of the kink so the difference quotient is valid
    pred = target + rng.choice([-1, 1], target.shape) * rng.uniform(0.01, 1, target.shape)
    _, g = training.charbonnier_loss(pred, target, 1e-6)
    num = numerical_gradient(lambda: training.charbonnier_loss(pred, target, 1e-6)[0], pred, 1e-4)
    assert np.abs(g - num).max() < 1e-6


def test_charbonnier_errors():
    with pytest.raises(ContractViolation):
        training.charbonnier_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ContractViolation):
        training.charbonnier_loss(np.zeros(3), np.zeros(3), eps=0)


# --- schedule and Adam ----------------------------------------------------

@pytest.mark.parametrize("it,lr", [(0, 1e-3), (49_999, 1e-3), (50_000, 5e-4), (149_999, 2.5e-4),
                                   (150_000, 1.25e-4)])
def test_lr_schedule(it, lr):
    assert training.lr_at(it, TC) == lr


def test_lr_schedule_negative_iteration():
    with pytest.raises(ContractViolation):
        training.lr_at(-1, TC)


def _scalar_params(value, dtype=np.float64):
    """A 1x1-channel network is overkill; reuse a real Parameters shape and probe one weight."""
    cfg = model.ModelConfig(channels=1, variant="baseline", layers_f1=1, layers_f2=1, layers_f3=1)
    p = model.Parameters.zeros(cfg, dtype)
    p.kernels["f1.0"].weight[0, 0, 1, 1] = value
    return p


def _grads_like(p, value):
    g = {n: ConvKernel(np.zeros_like(k.weight), np.zeros_like(k.bias)) for n, k in p.kernels.items()}
    g["f1.0"].weight[0, 0, 1, 1] = value
    return g


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-4])
def test_adam_first_step_is_signed_lr(g):
    p = _scalar_params(0.5)
    new, state = training.adam_step(p, _grads_like(p, g), training.AdamState.zeros_like(p), 1e-3, TC)
    delta = new.kernels["f1.0"].weight[0, 0, 1, 1] - 0.5
    assert abs(delta + 1e-3 * np.sign(g)) <= 1e-3 * 1e-6 + 1e-3 * 1e-8 / abs(g)
    assert state.step == 1


def test_adam_zero_gradient_keeps_params():
    p = model.init_params(model.ModelConfig(channels=4), 0)
    state = training.AdamState.zeros_like(p)
    zero = {n: ConvKernel(np.zeros_like(k.weight), np.zeros_like(k.bias)) for n, k in p.kernels.items()}
    q = p
    for _ in range(3):
        q, state = training.adam_step(q, zero, state, 1e-3, TC)
    for (_, a), (_, b) in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)


def test_adam_two_step_trace():
    p = _scalar_params(0.25)
    state = training.AdamState.zeros_like(p)
    got = []
    for g in (0.5, 0.5):
        p, state = training.adam_step(p, _grads_like(p, g), state, 1e-2, TC)
        got.append(p.kernels["f1.0"].weight[0, 0, 1, 1])
    np.testing.assert_allclose(got, adam_scalar_trace(0.25, [0.5, 0.5], 1e-2), rtol=0, atol=1e-15)
    # by hand: both bias-corrected steps are exactly -lr * g/|g| up to eps
    np.testing.assert_allclose(got, [0.24, 0.23], atol=1e-9)


def test_adam_inputs_untouched_and_state_shapes():
    p = model.init_params(model.ModelConfig(channels=4), 0)
    before = [a.copy() for _, a in p.arrays()]
    state = training.AdamState.zeros_like(p)
    g = {n: ConvKernel(np.ones_like(k.weight), np.ones_like(k.bias)) for n, k in p.kernels.items()}
    _, new_state = training.adam_step(p, g, state, 1e-3, TC)
    for b, (_, a) in zip(before, p.arrays()):
        np.testing.assert_array_equal(a, b)
    assert state.step == 0 and new_state.step == 1
    assert {k: v.shape for k, v in new_state.m.items()} == {k: a.shape for k, a in p.arrays()}


def test_adam_rejects_non_finite_gradients():
    p = _scalar_params(0.0)
    with pytest.raises(TrainingDivergence, match="f1.0.weight"):
        training.adam_step(p, _grads_like(p, np.nan), training.AdamState.zeros_like(p), 1e-3, TC)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        training.TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        training.TrainConfig(base_lr=0)
    with pytest.raises(ConfigurationError):
        training.TrainConfig(adam_beta2=1.0)
    d = TC.to_dict()
    assert (d["batch_size"], d["crop"], d["clip_len"], d["total_iters"]) == (16, 64, 10, 250_000)
    assert (d["base_lr"], d["lr_halving_period"], d["charbonnier_eps"]) == (1e-3, 50_000, 1e-6)


# --- patch sampling -------------------------------------------------------

@pytest.fixture(scope="module")
def float_pair():
    return data.synth_pair("bouncing_rect", 10, 80, seed=3, quantize=False)


def test_sample_batch_shapes_offsets_and_determinism(float_pair):
    cfg = training.TrainConfig(batch_size=3)
    lr, hr = training.sample_batch([float_pair], cfg, np.random.default_rng(5))
    assert lr.shape == (3, 10, 3, 64, 64) and hr.shape == (3, 10, 3, 256, 256)
    lr2, hr2 = training.sample_batch([float_pair], cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(lr, lr2)
    np.testing.assert_array_equal(hr, hr2)
    # locate each LR crop in the clip and check the HR crop sits at 4x the offset
    for b in range(3):
        found = [(y, x) for y in range(17) for x in range(17)
                 if np.array_equal(float_pair.lr[:, :, y:y + 64, x:x + 64], lr[b])]
        assert found
        y, x = found[0]
        np.testing.assert_array_equal(float_pair.hr[:, :, 4 * y:4 * y + 256, 4 * x:4 * x + 256], hr[b])


def test_sampled_lr_is_bicubic_of_hr(float_pair):
    cfg = training.TrainConfig(batch_size=2, crop=16, clip_len=4)
    lr, hr = training.sample_batch([float_pair], cfg, np.random.default_rng(0))
    for b in range(2):
        down = data.bicubic_downsample_x4(hr[b])
        # the kernel support is 2 LR pixels, so only the interior is window-local
        np.testing.assert_allclose(down[:, :, 2:-2, 2:-2], lr[b][:, :, 2:-2, 2:-2], atol=1e-6)


def test_sample_batch_rejects_small_clips(float_pair):
    with pytest.raises(ConfigurationError):
        training.sample_batch([float_pair], training.TrainConfig(crop=96), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        training.sample_batch([float_pair], training.TrainConfig(clip_len=11), np.random.default_rng(0))


# --- training loop --------------------------------------------------------

def _tiny_setup(iters=6, **kw):
    pair = data.synth_pair("moving_gradient", 4, 8, seed=0)
    mc = model.ModelConfig(channels=4)
    tc = training.TrainConfig(batch_size=1, crop=8, clip_len=4, total_iters=iters, log_interval=1, **kw)
    return pair, mc, tc


def test_zero_init_first_loss_is_bilinear_loss():
    pair, mc, tc = _tiny_setup(iters=1)
    rep = training.train(mc, tc, [pair], init=model.Parameters.zeros(mc))
    expected = training.charbonnier_loss(ops.bilinear_upsample_x4(pair.lr)[None], pair.hr[None], 1e-6)[0]
    assert rep.initial_loss == expected


def test_training_deterministic_and_reports():
    pair, mc, tc = _tiny_setup(seed=11)
    a = training.train(mc, tc, [pair])
    b = training.train(mc, tc, [pair])
    assert a.curve == b.curve
    for (_, x), (_, y) in zip(a.params.arrays(), b.params.arrays()):
        np.testing.assert_array_equal(x, y)
    assert [r[0] for r in a.curve] == list(range(6))
    assert a.csv().splitlines()[0] == "iter,lr,loss" and len(a.csv().splitlines()) == 7
    c = training.train(mc, training.TrainConfig(**{**tc.to_dict(), "seed": 12}), [pair])
    assert c.curve != a.curve


def test_training_reduces_loss_quickly():
    pair, mc, tc = _tiny_setup(iters=60, base_lr=2e-3)
    rep = training.train(mc, tc, [pair])
    # the random head's noise is removed within a few dozen steps
    assert rep.final_loss < 0.8 * rep.initial_loss


def test_checkpoint_sink_schedule():
    pair, mc, tc = _tiny_setup(iters=5, checkpoint_interval=2)
    seen = []
    training.train(mc, tc, [pair], checkpoint_sink=lambda it, p: seen.append(it))
    assert seen == [2, 4, 5]


def test_divergence_is_reported():
    pair, mc, tc = _tiny_setup(iters=2)
    bad = model.init_params(mc, 0)
    bad.kernels["f3.3"].bias[:] = np.inf
    with pytest.raises(TrainingDivergence):
        training.train(mc, tc, [pair], init=bad)
