"""Parameter store, ADAM, He init, the bidirectional recurrent layer, KTNP files."""

import numpy as np
import pytest

from ktnext import autodiff as ad
from ktnext.network import (
    AdamState,
    ParamStore,
    adam_step,
    check_gradients,
    crnn_bidir_layer,
    he_conv_weights,
    init_adam,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from ktnext.sampling import BadMagicError, TruncatedPayloadError


# ------------------------------------------------------------ param store


def test_param_store_basics():
    store = ParamStore()
    w = store.add("w", np.zeros((4, 2, 3, 3)))
    store.add("b", np.zeros(4))
    assert w.needs_grad
    assert parameter_count(store) == 2 * 4 * 9 + 4  # 76
    assert list(store.names()) == ["w", "b"]
    with pytest.raises(ValueError):
        store.add("w", np.zeros(3))


def test_param_store_set_values_shape_guard():
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    with pytest.raises(ValueError):
        store.set_values({"w": np.ones((3, 3))})
    with pytest.raises(KeyError):
        store.set_values({"nope": np.ones((2, 2))})
    store.set_values({"w": np.full((2, 2), 5.0)})
    assert np.all(store["w"].value == 5.0)


def test_he_init_deterministic_and_scaled():
    a = he_conv_weights(np.random.default_rng(1), 8, 4, 3)
    b = he_conv_weights(np.random.default_rng(1), 8, 4, 3)
    assert np.array_equal(a, b)
    big = he_conv_weights(np.random.default_rng(2), 64, 32, 3)
    expect_std = np.sqrt(2.0 / (32 * 9))
    assert abs(big.std() - expect_std) < 0.1 * expect_std


# ------------------------------------------------------------ adam


def test_adam_zero_gradient_leaves_params():
    store = ParamStore()
    w = store.add("w", np.full((2, 2), 3.0))
    state = init_adam(store)
    w.grad = np.zeros((2, 2))
    adam_step(store, state, lr=0.1)
    assert np.all(w.value == 3.0)
    assert state.step == 1


def test_adam_none_gradient_treated_as_zero():
    store = ParamStore()
    w = store.add("w", np.full(3, 1.0))
    state = init_adam(store)
    adam_step(store, state, lr=0.1)
    assert np.all(w.value == 1.0)


def test_adam_quadratic_converges():
    # scalar f(x) = x^2; |x| shrinks monotonically once moments warm up
    store = ParamStore()
    x = store.add("x", np.array([3.0]))
    state = init_adam(store)
    trace = []
    for _ in range(300):
        x.grad = 2.0 * x.value
        adam_step(store, state, lr=0.05)
        trace.append(abs(float(x.value[0])))
    # monotone approach until |x| reaches the step-size scale, then it may
    # dither below that scale but never climbs back out
    cross = next(i for i, v in enumerate(trace) if v < 0.1)
    assert all(b <= a + 1e-12 for a, b in zip(trace[:cross], trace[1:cross]))
    assert max(trace[cross:]) < 0.1
    assert trace[-1] < 1e-3
    assert state.step == 300


def test_adam_matches_reference_formula():
    store = ParamStore()
    x = store.add("x", np.array([1.0, -2.0]))
    state = init_adam(store)
    g = np.array([0.5, 1.5])
    x.grad = g.copy()
    adam_step(store, state, lr=1e-2)
    m = 0.1 * g
    v = 0.001 * g * g
    mh = m / (1 - 0.9)
    vh = v / (1 - 0.999)
    expect = np.array([1.0, -2.0]) - 1e-2 * mh / (np.sqrt(vh) + 1e-8)
    assert np.allclose(x.value, expect, atol=1e-15)


# ------------------------------------------------------------ crnn layer


def layer_params(rng, ci, ch, scale=0.3):
    w_i2h = ad.parameter(rng.standard_normal((ch, ci, 3, 3)) * scale)
    w_h2h = ad.parameter(rng.standard_normal((ch, ch, 3, 3)) * scale)
    w_ih = ad.parameter(rng.standard_normal((ch, ch, 3, 3)) * scale)
    bias = ad.parameter(rng.standard_normal(ch) * 0.1)
    return w_i2h, w_h2h, w_ih, bias


def test_crnn_zero_weights_zero_output():
    rng = np.random.default_rng(1)
    seq = ad.constant(rng.standard_normal((4, 2, 5, 5)))
    zeros = lambda *shape: ad.parameter(np.zeros(shape))
    out, hidden = crnn_bidir_layer(
        seq, zeros(3, 2, 3, 3), zeros(3, 3, 3, 3), zeros(3, 3, 3, 3), zeros(3), None, dilation=1
    )
    assert np.all(out.value == 0)
    assert np.all(hidden.value == 0)


def test_crnn_single_frame_degenerate():
    rng = np.random.default_rng(2)
    seq = ad.constant(rng.standard_normal((1, 2, 6, 6)))
    w_i2h, w_h2h, w_ih, bias = layer_params(rng, 2, 4)
    out, _ = crnn_bidir_layer(seq, w_i2h, w_h2h, w_ih, bias, None, dilation=1)
    ref = ad.relu(ad.conv2d(seq, w_i2h, bias, 1))
    assert np.abs(out.value - 2.0 * ref.value).max() < 1e-12


def test_crnn_uses_prev_iteration_hidden():
    rng = np.random.default_rng(3)
    seq = ad.constant(rng.standard_normal((3, 2, 4, 4)))
    params = layer_params(rng, 2, 4)
    out0, _ = crnn_bidir_layer(seq, *params, None, dilation=1)
    hidden_prev = ad.constant(rng.standard_normal((3, 4, 4, 4)))
    out1, _ = crnn_bidir_layer(seq, *params, hidden_prev, dilation=1)
    assert np.abs(out0.value - out1.value).max() > 1e-6


def test_crnn_temporal_coupling_both_directions():
    # output at frame 0 must react to the input at the last frame (backward
    # stream) and vice versa (forward stream)
    rng = np.random.default_rng(4)
    base = rng.standard_normal((3, 1, 4, 4))
    params = layer_params(rng, 1, 3)
    out_a, _ = crnn_bidir_layer(ad.constant(base), *params, None, dilation=1)
    bumped = base.copy()
    bumped[2] += 1.0
    out_b, _ = crnn_bidir_layer(ad.constant(bumped), *params, None, dilation=1)
    assert np.abs(out_b.value[0] - out_a.value[0]).max() > 1e-8
    bumped0 = base.copy()
    bumped0[0] += 1.0
    out_c, _ = crnn_bidir_layer(ad.constant(bumped0), *params, None, dilation=1)
    assert np.abs(out_c.value[2] - out_a.value[2]).max() > 1e-8


def test_crnn_gradients_finite_differences():
    rng = np.random.default_rng(5)
    seq_v = rng.standard_normal((3, 2, 4, 4))
    w_i2h, w_h2h, w_ih, bias = layer_params(rng, 2, 3)
    hidden_prev = ad.constant(rng.standard_normal((3, 3, 4, 4)) * 0.3)
    target = rng.standard_normal((3, 3, 4, 4))

    def build():
        out, _ = crnn_bidir_layer(ad.constant(seq_v), w_i2h, w_h2h, w_ih, bias, hidden_prev, dilation=3)
        return ad.sumsq_diff_real(out, target)

    err = check_gradients(build, [w_i2h, w_h2h, w_ih, bias], np.random.default_rng(6), samples=12)
    assert err < 1e-4


def test_crnn_shape_mismatch():
    rng = np.random.default_rng(7)
    seq = ad.constant(rng.standard_normal((3, 2, 4, 4)))
    w_i2h, w_h2h, w_ih, bias = layer_params(rng, 5, 3)  # wrong ci
    with pytest.raises(ValueError):
        crnn_bidir_layer(seq, w_i2h, w_h2h, w_ih, bias, None, dilation=1)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    store = ParamStore()
    store.add("layer0.w", rng.standard_normal((4, 2, 3, 3)))
    store.add("layer0.b", rng.standard_normal(4))
    store.add("scalar", rng.standard_normal(()))
    path = tmp_path / "params.ktnp"
    save_checkpoint(path, store)
    loaded = load_checkpoint(path)
    assert list(loaded) == ["layer0.w", "layer0.b", "scalar"]
    for name, arr in loaded.items():
        assert arr.dtype == np.float64
        assert np.array_equal(arr, store[name].value)

    store2 = ParamStore()
    store2.add("layer0.w", np.zeros((4, 2, 3, 3)))
    store2.add("layer0.b", np.zeros(4))
    store2.add("scalar", np.zeros(()))
    store2.set_values(loaded)
    p2 = tmp_path / "params2.ktnp"
    save_checkpoint(p2, store2)
    assert path.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    path = tmp_path / "p.ktnp"
    save_checkpoint(path, store)
    raw = path.read_bytes()

    bad = tmp_path / "bad.ktnp"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)

    trunc = tmp_path / "trunc.ktnp"
    trunc.write_bytes(raw[:-4])
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(trunc)


def test_check_gradients_flags_broken_vjp():
    # a deliberately wrong gradient must be caught
    x = ad.parameter(np.array([1.0, 2.0]))

    def build():
        wrong = ad.Tensor(
            np.asarray((x.value**2).sum()), (x,), lambda g: (3.0 * x.value * g,)
        )
        return wrong

    err = check_gradients(build, [x], np.random.default_rng(0), samples=2)
    assert err > 1e-2
