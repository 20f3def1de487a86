"""A small reverse-mode autodiff engine on numpy, sized for U-Net / PatchGAN.

Graphs are static feed-forward: each op records its parents and a closure that
pushes the output gradient back. ``Tensor.backward`` walks the tape in reverse
topological order.

Training runs in float32. Wrap construction and evaluation in
``with double_precision():`` for gradient checks.
"""

from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = {"dtype": np.dtype(np.float32), "grad": True}


class ShapeMismatch(ValueError):
    pass


class DegenerateChannel(ValueError):
    pass


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def double_precision():
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(np.float64)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _needs_grad(*ts: Tensor) -> bool:
    return _state["grad"] and any(t.requires_grad for t in ts)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _needs_grad(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sum_(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training."""
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean sigmoid cross-entropy of ``logits`` against a constant label."""
    z = logits.data
    n = z.size
    loss = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    return _make(
        np.asarray(loss.mean(), dtype=logits.dtype),
        (logits,),
        lambda g: (g * (_sigmoid(z) - target) / n,),
    )


# ---------------------------------------------------------------- convolution


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, OH, OW, kh, kw) strided view of a padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _scatter(cols: np.ndarray, out: np.ndarray, stride: int) -> None:
    """Adjoint of ``_windows``: add (N, C, OH, OW, kh, kw) columns into ``out`` (N, C, Hp, Wp)."""
    _, _, oh, ow, kh, kw = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += cols[
                :, :, :, :, i, j
            ]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    win = _windows(_pad(x, padding), kh, kw, stride, oh, ow)
    return np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_input_adjoint(g: np.ndarray, w: np.ndarray, in_hw: tuple, stride: int, padding: int) -> np.ndarray:
    """Gradient of a conv2d w.r.t. its input; also the forward pass of a transposed conv.

    ``g`` is (N, O, OH, OW), ``w`` is (O, C, kh, kw); returns (N, C, H, W).
    """
    n, _, oh, ow = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, OH, OW, C, kh, kw
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    full = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    needed_h = (oh - 1) * stride + kh
    needed_w = (ow - 1) * stride + kw
    if needed_h > full.shape[2] or needed_w > full.shape[3]:
        full = np.zeros((n, c, max(needed_h, full.shape[2]), max(needed_w, full.shape[3])), dtype=g.dtype)
    _scatter(cols, full, stride)
    return full[:, :, padding : padding + h, padding : padding + wd]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, kshape: tuple, stride: int, padding: int) -> np.ndarray:
    _, _, oh, ow = g.shape
    kh, kw = kshape
    win = _windows(_pad(x, padding), kh, kw, stride, oh, ow)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. ``x`` (N, C, H, W), ``w`` (O, C, kh, kw), ``b`` (O,)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d input {x.shape} incompatible with weights {w.shape}")
    h, wd = x.shape[2:]
    kh, kw = w.shape[2:]
    if _out_size(h, kh, stride, padding) < 1 or _out_size(wd, kw, stride, padding) < 1:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    out = _conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = _conv_input_adjoint(g, w.data, (h, wd), stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, (kh, kw), stride, padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), parents, backward)


def conv2d_transpose(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`. ``x`` (N, Cin, H, W), ``w`` (Cin, Cout, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"conv2d_transpose input {x.shape} incompatible with weights {w.shape}")
    h, wd = x.shape[2:]
    kh, kw = w.shape[2:]
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ShapeMismatch("transposed convolution output would be empty")
    out = _conv_input_adjoint(x.data, w.data, (oh, ow), stride, padding)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = _conv_forward(g, w.data, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(g, x.data, (kh, kw), stride, padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), parents, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Per-channel normalisation over batch and spatial axes with current-batch statistics."""
    n, c, h, w = x.shape
    m = n * h * w
    if m < 2:
        raise DegenerateChannel(f"batch_norm needs at least 2 values per channel, got {m}")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True)
    denom = var + epsilon
    if np.any(denom <= 0):
        raise DegenerateChannel("variance + epsilon underflows to zero")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = (x.data - mu) * inv_std
    gm = gamma.data.reshape(1, -1, 1, 1)
    out = gm * xhat + beta.data.reshape(1, -1, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gm
        dx = inv_std / m * (
            m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return dx, dgamma, dbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# --------------------------------------------------------------- parameters


class Parameter(Tensor):
    """A trainable leaf carrying its own Adam moments."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def adam_step(p: Parameter, lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, epsilon: float = 1e-8) -> None:
    """One bias-corrected Adam update; clears ``p.grad`` afterwards."""
    g = p.grad if p.grad is not None else np.zeros_like(p.data)
    p.step += 1
    p.m *= beta1
    p.m += (1 - beta1) * g
    p.v *= beta2
    p.v += (1 - beta2) * (g * g)
    mhat = p.m / (1 - beta1**p.step)
    vhat = p.v / (1 - beta2**p.step)
    p.data -= (lr * mhat / (np.sqrt(vhat) + epsilon)).astype(p.dtype, copy=False)
    p.grad = None


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for mod in self.modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if tuple(state[name].shape) != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(default_dtype())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_init_normal(rng, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y if self.bias is None else add(y, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, stride, padding, rng, bias=True):
        self.weight = Parameter(_init_normal(rng, (c_out, c_in, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, stride, padding, rng, bias=True):
        self.weight = Parameter(_init_normal(rng, (c_in, c_out, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, epsilon: float = 1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.epsilon = epsilon

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.epsilon)


# ------------------------------------------------------------ verification


def gradient_check(
    loss_fn: Callable[[], Tensor], tensors: Iterable[Tensor], epsilon: float = 1e-5
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild the scalar loss from the current values of ``tensors``
    deterministically. Relative error per tensor is ``|a - n| / max(|a|, |n|)``
    in the Euclidean norm; the max over tensors is returned.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient_check needs float64 tensors; build them under double_precision()")
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn().data)
            flat[i] = orig - epsilon
            down = float(loss_fn().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * epsilon)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    for t in tensors:
        t.grad = None
    return worst


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"LSIMCKPT"
CKPT_VERSION = 1


def encode_checkpoint(params: dict[str, np.ndarray], metadata: Optional[dict] = None) -> bytes:
    """magic, u32 version, u32 metadata length + JSON, u32 count, then per parameter:
    u16 name length, utf-8 name, u8 ndim, u32 dims, float32 LE payload. All little-endian."""
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    metadata = json.loads(data[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    return params, metadata


def save_checkpoint(path, params: dict[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, metadata))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
