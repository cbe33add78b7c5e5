import numpy as np
import pytest

from icm import autograd as ag
from icm import codec, oracles
from icm.autograd import Tensor


SMALL = codec.CodecConfig(base_channels=4, latent_channels=2, num_down_stages=2, seed=3)


def test_init_deterministic_and_channel_contract():
    cfg = codec.CodecConfig(seed=42)
    w1 = codec.init_codec(cfg)
    w2 = codec.init_codec(cfg)
    for (n1, t1), (n2, t2) in zip(w1.parameters(), w2.parameters()):
        assert n1 == n2
        assert t1.data.tobytes() == t2.data.tobytes()
    assert w1.get("enc.out.kernel").shape[0] == cfg.latent_channels


def test_roundtrip_shapes_and_finiteness():
    cfg = codec.CodecConfig(seed=7)
    w = codec.init_codec(cfg)
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(0, 1, (3, 32, 32)).astype(np.float32))
    y = codec.encode(x, w)
    assert y.shape == (cfg.latent_channels, 4, 4)
    ql = codec.quantize(y, cfg.quant_step)
    xhat = codec.decode(ql, w)
    assert xhat.shape == (3, 32, 32)
    assert np.isfinite(xhat.data).all()
    assert xhat.data.min() >= 0.0 and xhat.data.max() <= 1.0


def test_encode_determinism_and_divisibility_error():
    w = codec.init_codec(SMALL)
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
    y1 = codec.encode(Tensor(x), w)
    y2 = codec.encode(Tensor(x.copy()), w)
    np.testing.assert_array_equal(y1.data, y2.data)

    with pytest.raises(ValueError, match="pad"):
        codec.encode(Tensor(np.zeros((3, 15, 16), np.float32)), w)


def test_quantize_grid_contract():
    ql = codec.quantize(Tensor(np.zeros((1, 1, 1), np.float32)), 0.125)
    assert ql.symbols[0, 0, 0] == 32
    assert ql.values.data[0, 0, 0] == 0.0

    # clamped site: huge value pins to top symbol, STE gradient zero there
    y = Tensor(np.array([[[10.0, 0.3]]], np.float32), requires_grad=True)
    with ag.Tape() as tape:
        ql = codec.quantize(y, 0.125)
        loss = ag.sumall(ql.values)
    tape.backward(loss)
    assert ql.symbols[0, 0, 0] == 63
    assert ql.values.data[0, 0, 0] == np.float32(3.875)
    assert y.grad[0, 0, 0] == 0.0 and y.grad[0, 0, 1] == 1.0


def test_quantize_idempotent_and_half_away_rounding():
    rng = np.random.default_rng(5)
    y = rng.uniform(-5, 5, (2, 3, 3)).astype(np.float32)
    q1 = codec.quantize(Tensor(y), 0.125)
    q2 = codec.quantize(Tensor(q1.values.data), 0.125)
    np.testing.assert_array_equal(q1.symbols, q2.symbols)
    np.testing.assert_array_equal(q1.values.data, q2.values.data)
    np.testing.assert_array_equal(q1.values.data, (q1.symbols - 32) * np.float32(0.125))

    # halves round away from zero
    sym, val, _ = codec.quantize_array(np.array([0.0625, -0.0625], np.float32), 0.125)
    np.testing.assert_array_equal(sym, [33, 31])


def test_encode_gradient_vs_finite_differences():
    w = codec.init_codec(SMALL)
    rng = np.random.default_rng(11)
    x0 = rng.uniform(0.2, 0.8, (3, 8, 8)).astype(np.float32)
    x = Tensor(x0, requires_grad=True)
    with ag.Tape() as tape:
        y = codec.encode(x, w)
        loss = ag.sumall(y)
    tape.backward(loss)

    wd = {n: t.data.astype(np.float64) for n, t in w.parameters()}

    def ref_encode(xv):
        t = np.asarray(xv, np.float64)
        for i in range(SMALL.num_down_stages):
            t = oracles.ref_conv2d(t, wd[f"enc.down{i}.kernel"], wd[f"enc.down{i}.bias"], 2, 1)
            t = oracles.ref_leaky_relu(t, SMALL.act_slope)
            h = oracles.ref_conv2d(t, wd[f"enc.res{i}a.kernel"], wd[f"enc.res{i}a.bias"], 1, 1)
            h = oracles.ref_leaky_relu(h, SMALL.act_slope)
            h = oracles.ref_conv2d(h, wd[f"enc.res{i}b.kernel"], wd[f"enc.res{i}b.bias"], 1, 1)
            t = oracles.ref_leaky_relu(t + h, SMALL.act_slope)
        t = oracles.ref_conv2d(t, wd["enc.out.kernel"], wd["enc.out.bias"], 1, 1)
        return oracles.ref_scaled_tanh(t, SMALL.latent_bound)

    fd = oracles.finite_diff_grad(lambda v: float(ref_encode(v).sum()), x0)
    assert oracles.max_rel_err(x.grad, fd) < 1e-3


def test_decode_gradient_vs_finite_differences():
    w = codec.init_codec(SMALL)
    rng = np.random.default_rng(13)
    x_img = rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)
    v0 = rng.uniform(-1, 1, (SMALL.latent_channels, 2, 2)).astype(np.float32)
    v = Tensor(v0, requires_grad=True)
    with ag.Tape() as tape:
        xhat = codec.decode_values(v, w)
        loss = ag.mse(Tensor(x_img), xhat)
    tape.backward(loss)

    wd = {n: t.data.astype(np.float64) for n, t in w.parameters()}
    chans = SMALL.stage_channels()

    def ref_decode(vals):
        t = oracles.ref_conv2d(vals, wd["dec.head.kernel"], wd["dec.head.bias"], 1, 1)
        t = oracles.ref_leaky_relu(t, SMALL.act_slope)
        for i in reversed(range(len(chans))):
            h = oracles.ref_conv2d(t, wd[f"dec.res{i}a.kernel"], wd[f"dec.res{i}a.bias"], 1, 1)
            h = oracles.ref_leaky_relu(h, SMALL.act_slope)
            h = oracles.ref_conv2d(h, wd[f"dec.res{i}b.kernel"], wd[f"dec.res{i}b.bias"], 1, 1)
            t = oracles.ref_leaky_relu(t + h, SMALL.act_slope)
            th, tw = t.shape[1] * 2, t.shape[2] * 2
            t = oracles.ref_tconv2d(t, wd[f"dec.up{i}.kernel"], wd[f"dec.up{i}.bias"], 2, 0)
            t = t[:, :th, :tw]
            t = oracles.ref_leaky_relu(t, SMALL.act_slope)
        t = oracles.ref_conv2d(t, wd["dec.out.kernel"], wd["dec.out.bias"], 1, 1)
        return oracles.ref_sigmoid(t)

    fd = oracles.finite_diff_grad(
        lambda vv: oracles.ref_mse(x_img.astype(np.float64), ref_decode(vv)), v0)
    assert oracles.max_rel_err(v.grad, fd) < 1e-3


def test_ste_contract_grad_equality_at_unclamped_sites():
    w = codec.init_codec(SMALL)
    rng = np.random.default_rng(17)
    x_img = Tensor(rng.uniform(0, 1, (3, 8, 8)).astype(np.float32))
    y0 = rng.uniform(-2, 2, (SMALL.latent_channels, 2, 2)).astype(np.float32)

    y = Tensor(y0, requires_grad=True)
    with ag.Tape() as tape:
        ql = codec.quantize(y, SMALL.quant_step)
        loss = ag.mse(x_img, codec.decode(ql, w))
    tape.backward(loss)
    grad_through_q = y.grad.copy()

    v = Tensor(ql.values.data.copy(), requires_grad=True)
    with ag.Tape() as tape:
        loss = ag.mse(x_img, codec.decode_values(v, w))
    tape.backward(loss)
    np.testing.assert_array_equal(grad_through_q, v.grad)


def test_pad_crop_roundtrip():
    rng = np.random.default_rng(19)
    img = rng.uniform(0, 1, (3, 13, 10)).astype(np.float32)
    padded, orig = codec.pad_image(img, 8)
    assert padded.shape == (3, 16, 16)
    np.testing.assert_array_equal(codec.crop_image(padded, orig), img)
    same, orig2 = codec.pad_image(np.zeros((3, 16, 8), np.float32), 8)
    assert same.shape == (3, 16, 8) and orig2 == (16, 8)
