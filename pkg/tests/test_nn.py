import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarsim import nn
from lidarsim.nn import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    DegenerateChannel,
    Linear,
    Parameter,
    ShapeMismatch,
    Tensor,
    adam_step,
    batch_norm,
    bce_with_logits,
    conv2d,
    conv2d_transpose,
    double_precision,
    gradient_check,
)


def naive_conv(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation, the textbook definition."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for j in range(o):
            for r in range(oh):
                for s in range(ow):
                    patch = xp[i, :, r * stride: r * stride + kh, s * stride: s * stride + kw]
                    out[i, j, r, s] = np.sum(patch * w[j]) + (b[j] if b is not None else 0)
    return out


def naive_conv_transpose(x, w, b, stride, pad):
    """Scatter each input pixel times the kernel, then crop the padding."""
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    full = np.zeros((n, co, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for i in range(n):
        for c in range(ci):
            for r in range(h):
                for s in range(wd):
                    full[i, :, r * stride: r * stride + kh, s * stride: s * stride + kw] += x[i, c, r, s] * w[c]
    out = full[:, :, pad: full.shape[2] - pad, pad: full.shape[3] - pad]
    return out + (b[None, :, None, None] if b is not None else 0)


def test_conv_examples():
    y = conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    assert y.shape == (1, 1, 2, 2) and np.all(y.data == 9)
    x = np.random.default_rng(0).random((1, 1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    assert np.allclose(conv2d(Tensor(x), Tensor(k), padding=1).data, x)
    assert conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 4, 4))), stride=2, padding=1).shape == (1, 1, 2, 2)


def test_conv_transpose_examples():
    w = Tensor(np.ones((1, 1, 4, 4)))
    assert conv2d_transpose(Tensor(np.ones((1, 1, 2, 2))), w, stride=2, padding=1).shape == (1, 1, 4, 4)
    b = Tensor(np.array([0.7]))
    y = conv2d_transpose(Tensor(np.zeros((1, 1, 3, 3))), w, b, stride=2, padding=1)
    assert np.allclose(y.data, 0.7)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2), (3, 2, 5)])
def test_conv_matches_naive(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    with double_precision():
        x, w, b = rng.normal(size=(2, 3, 9, 8)), rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        assert np.allclose(got, naive_conv(x, w, b, stride, pad), atol=1e-12)
        xt, wt = rng.normal(size=(2, 4, 5, 6)), rng.normal(size=(4, 3, k, k))
        got = conv2d_transpose(Tensor(xt), Tensor(wt), Tensor(b[:3]), stride, pad).data
        assert np.allclose(got, naive_conv_transpose(xt, wt, b[:3], stride, pad), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2), (4, 0, 4)]))
def test_adjoint_identity(seed, geom):
    stride, pad, k = geom
    rng = np.random.default_rng(seed)
    with double_precision():
        x = rng.normal(size=(1, 2, 8, 8))
        w = rng.normal(size=(3, 2, k, k))
        y_shape = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).shape
        y = rng.normal(size=y_shape)
        lhs = np.sum(conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data * y)
        # conv weights (O, C, k, k) double as transpose weights (C_in=O, C_out=C)
        xt = conv2d_transpose(Tensor(y), Tensor(w), stride=stride, padding=pad).data
        assert xt.shape == x.shape
        assert lhs == pytest.approx(np.sum(x * xt), abs=1e-9 * max(1.0, abs(lhs)))


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeMismatch):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises(ShapeMismatch):
        conv2d_transpose(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 4, 4))))


def test_activation_examples():
    assert nn.leaky_relu(Tensor(-1.0), 0.2).item() == pytest.approx(-0.2)
    assert nn.relu(Tensor(-1.0)).item() == 0.0
    with double_precision():
        x = Tensor(0.0, requires_grad=True)
        y = nn.tanh(x)
        y.backward()
        assert y.item() == 0.0 and x.grad == 1.0
    assert nn.sigmoid(Tensor(0.0)).item() == 0.5
    assert np.all(np.isfinite(nn.sigmoid(Tensor([-1000.0, 1000.0])).data))


def test_batch_norm_examples():
    with double_precision():
        one, zero = Tensor(np.ones(1)), Tensor(np.zeros(1))
        assert np.allclose(batch_norm(Tensor(np.full((1, 1, 2, 2), 3.0)), one, zero).data, 0)
        x = Tensor(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2))
        assert np.allclose(batch_norm(x, one, zero, epsilon=1e-12).data.ravel(), [-1, 1])
        r = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
        assert np.allclose(batch_norm(Tensor(r), Tensor(np.zeros(1)), Tensor(np.array([0.4]))).data, 0.4)
    with pytest.raises(DegenerateChannel):
        batch_norm(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_adam_first_step_closed_form():
    with double_precision():
        p = Parameter(np.array([1.0, -2.0, 3.0]))
        g = np.array([0.5, -4.0, 1e-3])
        p.grad = g.copy()
        adam_step(p, lr=0.1, beta1=0.3, beta2=0.9, epsilon=1e-8)
        assert np.allclose(p.data, [1.0, -2.0, 3.0] - 0.1 * g / (np.abs(g) + 1e-8))
        assert p.grad is None and p.step == 1


def test_adam_two_identical_steps():
    with double_precision():
        p = Parameter(np.array([0.0]))
        trace = [0.0]
        for _ in range(2):
            p.grad = np.array([2.0])
            adam_step(p, lr=0.01)
            trace.append(float(p.data[0]))
    # bias correction makes both steps exactly lr * g / (|g| + eps)
    step = 0.01 * 2.0 / (2.0 + 1e-8)
    assert trace == pytest.approx([0.0, -step, -2 * step], abs=1e-15)


def test_adam_zero_gradient():
    with double_precision():
        p = Parameter(np.array([1.5]))
        p.m[:] = 0.2
        p.v[:] = 0.3
        p.grad = np.zeros(1)
        adam_step(p, lr=0.01, beta1=0.5, beta2=0.999)
    assert p.m[0] == pytest.approx(0.1) and p.v[0] == pytest.approx(0.2997)
    # stale moments still move the parameter, but a fresh parameter stays put
    q = Parameter(np.array([1.5]))
    q.grad = np.zeros(1)
    adam_step(q)
    assert q.data[0] == np.float32(1.5)


def weighted_sum(y, seed=99):
    w = np.random.default_rng(seed).normal(size=y.shape)
    return (y * Tensor(w)).sum()


def test_gradient_check_requires_double():
    t = Tensor(np.ones(3))
    with pytest.raises(TypeError):
        gradient_check(lambda: t.sum(), [t])


def test_gradient_check_linear():
    rng = np.random.default_rng(1)
    with double_precision():
        layer = Linear(4, 3, rng)
        layer.bias.data[:] = rng.normal(size=3)
        x = Tensor(rng.normal(size=(5, 4)))
        err = gradient_check(lambda: weighted_sum(layer(x)), [x, *layer.parameters()])
    assert err <= 1e-7


def test_gradient_check_conv():
    rng = np.random.default_rng(2)
    with double_precision():
        layer = Conv2d(2, 3, 3, 1, 1, rng)
        layer.weight.data = rng.normal(size=layer.weight.shape)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        err = gradient_check(lambda: weighted_sum(layer(x)), [x, *layer.parameters()])
    assert err <= 1e-4


def test_gradient_check_tanh_chain():
    rng = np.random.default_rng(3)
    with double_precision():
        x = Tensor(rng.normal(size=(3, 4)))
        err = gradient_check(lambda: weighted_sum(nn.tanh(nn.tanh(x) * 1.7 + 0.2)), [x])
    assert err <= 1e-6


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: nn.leaky_relu(a, 0.2),
        lambda a, b: nn.relu(a),
        lambda a, b: nn.sigmoid(a),
        lambda a, b: nn.abs_(a),
        lambda a, b: a * b,
        lambda a, b: a - b,
        lambda a, b: nn.concat([a, b], axis=1),
        lambda a, b: nn.dropout(a, 0.5, np.random.default_rng(0)),
        lambda a, b: a * Tensor(np.array([[[[2.0]]], [[[3.0]]]])),  # broadcast
    ],
)
def test_gradient_check_elementwise(op):
    rng = np.random.default_rng(4)
    with double_precision():
        # keep inputs away from the kinks of relu / abs
        a = Tensor(rng.choice([-1, 1], size=(2, 2, 3, 3)) * rng.uniform(0.1, 1.0, size=(2, 2, 3, 3)))
        b = Tensor(rng.normal(size=(2, 2, 3, 3)))
        err = gradient_check(lambda: weighted_sum(op(a, b)), [a, b])
    assert err <= 1e-7


def test_gradient_check_layers():
    rng = np.random.default_rng(5)
    with double_precision():
        up = ConvTranspose2d(3, 2, 4, 2, 1, rng)
        bn = BatchNorm2d(2)
        up.weight.data = rng.normal(size=up.weight.shape)
        up.bias.data = rng.normal(size=2)
        bn.gamma.data = rng.uniform(0.5, 1.5, size=2)
        bn.beta.data = rng.normal(size=2)
        x = Tensor(rng.normal(size=(1, 3, 3, 3)))
        err = gradient_check(lambda: weighted_sum(up(x)), [x, *up.parameters()])
        assert err <= 1e-6
        y = Tensor(rng.normal(size=(2, 2, 3, 3)))
        err = gradient_check(lambda: weighted_sum(bn(y)), [y, *bn.parameters()])
        assert err <= 1e-6


def test_gradient_check_bce_and_mean():
    rng = np.random.default_rng(6)
    with double_precision():
        z = Tensor(rng.normal(size=(1, 1, 4, 4)) * 3)
        assert gradient_check(lambda: bce_with_logits(z, 1.0), [z]) <= 1e-7
        assert gradient_check(lambda: bce_with_logits(z, 0.0), [z]) <= 1e-7
        assert gradient_check(lambda: nn.mean(nn.abs_(z)), [z]) <= 1e-7


def test_bce_closed_form():
    assert bce_with_logits(Tensor(np.zeros((1, 1, 3, 3))), 1.0).item() == pytest.approx(math.log(2))
    assert bce_with_logits(Tensor(np.full(4, 50.0)), 1.0).item() == pytest.approx(0.0, abs=1e-12)
    assert bce_with_logits(Tensor(np.full(4, -50.0)), 1.0).item() == pytest.approx(50.0)


def test_dropout_modes():
    x = Tensor(np.ones((1, 1, 100, 100)))
    assert nn.dropout(x, 0.5, np.random.default_rng(0), training=False) is x
    y = nn.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(y)) == {0.0, 2.0}
    assert np.array_equal(y, nn.dropout(x, 0.5, np.random.default_rng(0)).data)


def test_no_grad_builds_no_graph():
    w = Parameter(np.ones(3))
    with nn.no_grad():
        y = (w * 2.0).sum()
    assert y._parents == ()


def test_module_state_roundtrip():
    rng = np.random.default_rng(7)
    a, b = Conv2d(2, 3, 3, 1, 1, rng), Conv2d(2, 3, 3, 1, 1, rng)
    assert not np.array_equal(a.weight.data, b.weight.data)
    b.load_state_dict(a.state_dict())
    assert np.array_equal(a.weight.data, b.weight.data)
    with pytest.raises(KeyError):
        b.load_state_dict({"weight": a.weight.data})


def test_init_statistics():
    w = Conv2d(64, 64, 4, 2, 1, np.random.default_rng(0)).weight.data
    assert abs(w.mean()) < 1e-3 and w.std() == pytest.approx(0.02, rel=0.02)
    assert w.dtype == np.float32


def test_checkpoint_bytes(tmp_path):
    params = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], dtype=np.float32)}
    data = nn.encode_checkpoint(params, {"step": 3})
    # header by hand: magic, version 1, metadata {"step":3} (10 bytes), 2 entries
    assert data[:24] == b"LSIMCKPT" + (1).to_bytes(4, "little") + (10).to_bytes(4, "little") + b'{"step":3}'[:8]
    assert data[24:30] == b"3}" + (2).to_bytes(4, "little")
    # first entry: u16 name length 3, "a.w", ndim 2, dims 2 and 3, then six float32
    entry = (3).to_bytes(2, "little") + b"a.w" + bytes([2]) + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert data[30:30 + len(entry)] == entry
    assert len(data) == 30 + len(entry) + 24 + 2 + 1 + 1 + 4 + 4
    back, meta = nn.decode_checkpoint(data)
    assert meta == {"step": 3}
    assert all(np.array_equal(back[k], v) for k, v in params.items())
    nn.save_checkpoint(tmp_path / "x.ckpt", back, meta)
    assert (tmp_path / "x.ckpt").read_bytes() == data
    with pytest.raises(ValueError):
        nn.decode_checkpoint(b"garbage!" + data[8:])
