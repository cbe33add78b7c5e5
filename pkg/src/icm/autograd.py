"""Minimal reverse-mode autodiff engine over float32 numpy arrays.

Supplies exactly the tensor operations the codec, probability model,
proxy losses and the latent finetuning loop need: 2-d convolution and
its transpose, pointwise activations, 2x resampling, pooling, MSE,
log-softmax over a leading symbol axis, and gather/sum reductions.
Gradients are recorded on an explicit, thread-local :class:`Tape`.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided


class AutogradError(Exception):
    """Misuse of the tape machinery (e.g. backward on a foreign loss)."""


class DimensionError(ValueError):
    """Shapes of the operands do not satisfy the operation's contract."""


class Tensor:
    """Dense float32 n-d array with an optional gradient buffer.

    Layout is row-major (channels, height, width) with an optional
    leading batch axis. Tensors are immutable once produced by an op;
    leaves created with ``requires_grad=True`` carry a zeroed ``grad``
    buffer from construction so non-participating leaves read as zero
    gradient after any backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "stop_gradient")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        # frozen leaves can opt out of gradient computation entirely
        self.stop_gradient = False
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops for one forward pass.

    Usable as a context manager; ops executed inside register their
    backward rules. ``backward`` replays the rules in exact reverse
    execution order. ``clear`` drops all tensor references.
    """

    def __init__(self):
        self._nodes = []  # (output Tensor, backward callable)
        self._outputs = {}  # id(tensor) -> tensor, to validate losses

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise AutogradError("tape context exited out of order")
        stack.pop()

    def record(self, out: Tensor, backward_fn) -> None:
        self._nodes.append((out, backward_fn))
        self._outputs[id(out)] = out

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every participating tensor w.r.t. ``loss``."""
        if loss.data.size != 1:
            raise AutogradError("backward requires a scalar loss")
        if id(loss) not in self._outputs or self._outputs[id(loss)] is not loss:
            raise AutogradError("loss was not produced under this tape")
        _accum(loss, np.ones_like(loss.data))
        for out, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn(out.grad)

    def clear(self) -> None:
        self._nodes.clear()
        self._outputs.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Gradients add when a tensor feeds multiple ops (residual connections).
    if t.stop_gradient:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution machinery

def _im2col(x_pad: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    c = x_pad.shape[0]
    s0, s1, s2 = x_pad.strides
    view = as_strided(
        x_pad,
        shape=(c, k, k, h_out, w_out),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
    )
    return np.ascontiguousarray(view).reshape(c * k * k, h_out * w_out)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, h_pad: int, w_pad: int,
            h_out: int, w_out: int) -> np.ndarray:
    # Scatter-add of window columns; k*k vectorized adds instead of np.add.at.
    canvas = np.zeros((c, h_pad, w_pad), dtype=np.float32)
    cols = cols.reshape(c, k, k, h_out, w_out)
    for u in range(k):
        ulim = u + (h_out - 1) * stride + 1
        for v in range(k):
            vlim = v + (w_out - 1) * stride + 1
            canvas[:, u:ulim:stride, v:vlim:stride] += cols[:, u, v]
    return canvas


def _check_conv_args(kernel_shape, stride: int, pad: int) -> None:
    k = kernel_shape[2]
    if kernel_shape[2] != kernel_shape[3]:
        raise DimensionError(f"kernel must be square, got {kernel_shape[2:]}")
    if k % 2 != 1:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be non-negative, got {pad}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (C_in,H,W) with kernel (C_out,C_in,k,k), zero padding."""
    _check_conv_args(kernel.shape, stride, pad)
    c_out, c_in, k, _ = kernel.shape
    if x.data.ndim != 3 or x.shape[0] != c_in:
        raise DimensionError(
            f"conv2d input {x.shape} does not match kernel expecting {c_in} channels")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} must be ({c_out},)")
    h, w = x.shape[1], x.shape[2]
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionError(
            f"input {h}x{w} with pad {pad} smaller than kernel {k}x{k}")
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1

    x_pad = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(x_pad, k, stride, h_out, w_out)
    k_mat = kernel.data.reshape(c_out, c_in * k * k)
    y = k_mat @ cols + bias.data[:, None]
    out = Tensor(y.reshape(c_out, h_out, w_out))

    def bwd(g: np.ndarray) -> None:
        g_mat = g.reshape(c_out, h_out * w_out)
        if not bias.stop_gradient:
            _accum(bias, g_mat.sum(axis=1))
        if not kernel.stop_gradient:
            _accum(kernel, (g_mat @ cols.T).reshape(kernel.shape))
        if not x.stop_gradient:
            cols_g = k_mat.T @ g_mat
            gx_pad = _col2im(cols_g, c_in, k, stride, h + 2 * pad, w + 2 * pad, h_out, w_out)
            _accum(x, gx_pad[:, pad:pad + h, pad:pad + w])

    return _record(out, (x, kernel, bias), bwd)


def tconv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; exact adjoint of conv2d's forward map (up to bias).

    Kernel layout is (C_in, C_out, k, k); output spatial size is
    (H-1)*stride - 2*pad + k.
    """
    kshape = (kernel.shape[1], kernel.shape[0], kernel.shape[2], kernel.shape[3])
    _check_conv_args(kshape, stride, pad)
    c_in, c_out, k, _ = kernel.shape
    if x.data.ndim != 3 or x.shape[0] != c_in:
        raise DimensionError(
            f"tconv2d input {x.shape} does not match kernel expecting {c_in} channels")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} must be ({c_out},)")
    h, w = x.shape[1], x.shape[2]
    h_out = (h - 1) * stride - 2 * pad + k
    w_out = (w - 1) * stride - 2 * pad + k
    if h_out < 1 or w_out < 1:
        raise DimensionError(
            f"tconv2d output {h_out}x{w_out} collapsed; input {h}x{w} too small for pad {pad}")

    k_mat = kernel.data.reshape(c_in, c_out * k * k)
    cols = k_mat.T @ x.data.reshape(c_in, h * w)
    canvas = _col2im(cols, c_out, k, stride, h_out + 2 * pad, w_out + 2 * pad, h, w)
    y = canvas[:, pad:pad + h_out, pad:pad + w_out] + bias.data[:, None, None]
    out = Tensor(y)

    def bwd(g: np.ndarray) -> None:
        if not bias.stop_gradient:
            _accum(bias, g.sum(axis=(1, 2)))
        if kernel.stop_gradient and x.stop_gradient:
            return
        g_pad = np.pad(g, ((0, 0), (pad, pad), (pad, pad))) if pad else g
        g_cols = _im2col(g_pad, k, stride, h, w)
        if not kernel.stop_gradient:
            _accum(kernel, (x.data.reshape(c_in, h * w) @ g_cols.T).reshape(kernel.shape))
        if not x.stop_gradient:
            _accum(x, (k_mat @ g_cols).reshape(c_in, h, w))

    return _record(out, (x, kernel, bias), bwd)


# ---------------------------------------------------------------------------
# pointwise ops

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0,1), got {slope}")
    factor = np.where(x.data >= 0, np.float32(1.0), np.float32(slope))
    out = Tensor(x.data * factor)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * factor)

    return _record(out, (x,), bwd)


def identity(x: Tensor) -> Tensor:
    out = Tensor(x.data)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g)

    return _record(out, (x,), bwd)


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "identity":
        return identity(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    """Saturating map onto (0,1); numerically stable on both tails."""
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)
    out = Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * out_data * (1.0 - out_data))

    return _record(out, (x,), bwd)


def scaled_tanh(x: Tensor, bound: float) -> Tensor:
    """bound * tanh(x / bound): identity-like near zero, saturating at +-bound."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    b = np.float32(bound)
    t = np.tanh(x.data / b)
    out = Tensor(b * t)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * (np.float32(1.0) - t * t))

    return _record(out, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    out = Tensor(x.data * c32)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * c32)

    return _record(out, (x,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a-b)^2, as a scalar tensor."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(np.float32(np.mean(diff * diff.astype(np.float64))))

    def bwd(g: np.ndarray) -> None:
        gd = (np.float32(2.0 / n) * float(g)) * diff
        _accum(a, gd)
        _accum(b, -gd)

    return _record(out, (a, b), bwd)


def sumall(x: Tensor) -> Tensor:
    out = Tensor(np.float32(x.data.sum(dtype=np.float64)))

    def bwd(g: np.ndarray) -> None:
        _accum(x, np.full_like(x.data, float(g)))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# resampling and pooling

def resample2(x: Tensor, mode: str) -> Tensor:
    """Down by non-overlapping 2x2 mean, or up by pixel replication."""
    if x.data.ndim != 3:
        raise DimensionError(f"resample2 expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if mode == "avg_down":
        if h % 2 or w % 2:
            raise ValueError(
                f"avg_down requires even dims, got {h}x{w}; pad before calling")
        out = Tensor(x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)))

        def bwd(g: np.ndarray) -> None:
            gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * np.float32(0.25)
            _accum(x, gx)

        return _record(out, (x,), bwd)
    if mode == "nearest_up":
        out = Tensor(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2))

        def bwd(g: np.ndarray) -> None:
            _accum(x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

        return _record(out, (x,), bwd)
    raise ValueError(f"unknown resample2 mode {mode!r}")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; gradient routes to the first argmax on ties."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 requires even dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = windows.argmax(axis=3)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=3)[..., 0])

    def bwd(g: np.ndarray) -> None:
        gw = np.zeros((c, h2, w2, 4), dtype=np.float32)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=3)
        _accum(x, gw.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w))

    return _record(out, (x,), bwd)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Top-left crop to (h, w); gradient zero-pads back."""
    c, hh, ww = x.shape
    if h > hh or w > ww:
        raise DimensionError(f"cannot crop {hh}x{ww} to {h}x{w}")
    out = Tensor(x.data[:, :h, :w])

    def bwd(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[:, :h, :w] = g
        _accum(x, gx)

    return _record(out, (x,), bwd)


def replicate_pad_br(x: Tensor, ph: int, pw: int) -> Tensor:
    """Edge-replicate pad on bottom/right; gradient folds back onto the edges."""
    out = Tensor(np.pad(x.data, ((0, 0), (0, ph), (0, pw)), mode="edge"))
    c, h, w = x.shape

    def bwd(g: np.ndarray) -> None:
        gx = g[:, :h, :w].copy()
        if ph:
            gx[:, -1, :] += g[:, h:, :w].sum(axis=1)
        if pw:
            gx[:, :, -1] += g[:, :h, w:].sum(axis=2)
        if ph and pw:
            gx[:, -1, -1] += g[:, h:, w:].sum(axis=(1, 2))
        _accum(x, gx)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g: np.ndarray) -> None:
        _accum(x, g.reshape(x.shape))

    return _record(out, (x,), bwd)


def tile2d(x: Tensor, h: int, w: int) -> Tensor:
    """Tile a (..., 1, 1) tensor to (..., h, w); gradient sums back per site."""
    if x.shape[-2:] != (1, 1):
        raise DimensionError(f"tile2d expects trailing (1,1) dims, got {x.shape}")
    out = Tensor(np.broadcast_to(x.data, x.shape[:-2] + (h, w)).copy())

    def bwd(g: np.ndarray) -> None:
        _accum(x, g.sum(axis=(-2, -1), keepdims=True))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# distributions

def log_softmax_symbols(logits: Tensor) -> Tensor:
    """Numerically stable log-softmax along axis 0 (the symbol axis)."""
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    ez = np.exp(z)
    logp = z - np.log(ez.sum(axis=0, keepdims=True))
    out = Tensor(logp)
    softmax = ez / ez.sum(axis=0, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        _accum(logits, g - softmax * g.sum(axis=0, keepdims=True))

    return _record(out, (logits,), bwd)


def gather_symbols(logp: Tensor, symbols: np.ndarray) -> Tensor:
    """Select logp[symbols[site], site] per site; symbols indexes axis 0."""
    sym = np.asarray(symbols)
    if sym.shape != logp.shape[1:]:
        raise DimensionError(
            f"symbols shape {sym.shape} must match per-site shape {logp.shape[1:]}")
    if sym.size and (sym.min() < 0 or sym.max() >= logp.shape[0]):
        raise ValueError("symbol index out of range")
    idx = sym[None].astype(np.int64)
    out = Tensor(np.take_along_axis(logp.data, idx, axis=0)[0])

    def bwd(g: np.ndarray) -> None:
        gl = np.zeros_like(logp.data)
        np.put_along_axis(gl, idx, g[None], axis=0)
        _accum(logp, gl)

    return _record(out, (logp,), bwd)


def ste_quantize(x: Tensor, quantized: np.ndarray, pass_mask: np.ndarray) -> Tensor:
    """Wrap externally quantized values with a clipped straight-through gradient.

    ``quantized`` is the exact forward value; gradient passes unchanged
    where ``pass_mask`` is true and is zero elsewhere.
    """
    if quantized.shape != x.shape:
        raise DimensionError("quantized values must match input shape")
    out = Tensor(quantized)
    mask = pass_mask.astype(np.float32)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * mask)

    return _record(out, (x,), bwd)
