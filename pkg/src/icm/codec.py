"""Lossy analysis/synthesis transform pair and the 6-bit uniform quantizer.

The encoder stacks stride-2 convolutions with one residual block per
stage; the decoder mirrors it with transposed convolutions and a final
saturating map onto [0,1]. The quantizer snaps latents to the 64-level
grid {-32..31}*step and exposes a clipped straight-through gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


QUANT_LEVELS = 64  # 6-bit alphabet, fixed


@dataclass(frozen=True)
class CodecConfig:
    input_channels: int = 3
    base_channels: int = 16
    latent_channels: int = 8
    num_down_stages: int = 3
    quant_step: float = 0.125
    quant_levels: int = QUANT_LEVELS
    act_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.quant_levels != QUANT_LEVELS:
            raise ValueError(f"quant_levels is fixed at {QUANT_LEVELS}")
        if self.num_down_stages < 1:
            raise ValueError("num_down_stages must be >= 1")
        if self.quant_step <= 0:
            raise ValueError("quant_step must be positive")
        if not 0.0 < self.act_slope < 1.0:
            raise ValueError("act_slope must lie in (0,1)")

    @property
    def scale_factor(self) -> int:
        return 2 ** self.num_down_stages

    @property
    def latent_bound(self) -> float:
        return self.quant_step * (self.quant_levels // 2)

    def stage_channels(self) -> list:
        return [self.base_channels * (2 ** i) for i in range(self.num_down_stages)]


class _Layers:
    """Ordered (name -> Tensor) parameter store shared by both halves."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self._params[name] = t
        return t

    def parameters(self) -> list:
        return list(self._params.items())

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def freeze(self) -> None:
        for t in self._params.values():
            t.stop_gradient = True

    def thaw(self) -> None:
        for t in self._params.values():
            t.stop_gradient = False


class CodecWeights(_Layers):
    """Encoder/decoder parameters for one codec configuration."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config


def pack_params(params) -> bytes:
    """Serialize ordered (name, Tensor) pairs: u16 name length, name bytes,
    u8 ndim, u32 dims, raw little-endian float32 payload."""
    import struct

    out = bytearray()
    out += struct.pack("<H", len(params))
    for name, t in params:
        nb = name.encode()
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", t.data.ndim)
        for d in t.data.shape:
            out += struct.pack("<I", d)
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return bytes(out)


def unpack_params(body: bytes, off: int):
    """Inverse of pack_params; returns (list of (name, array), new offset)."""
    import struct

    (count,) = struct.unpack_from("<H", body, off)
    off += 2
    params = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        dims = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<I", body, off)
            off += 4
            dims.append(d)
        size = int(np.prod(dims, dtype=np.int64)) * 4 if dims else 4
        arr = np.frombuffer(body[off:off + size], dtype="<f4").reshape(dims).copy()
        off += size
        params.append((name, arr))
    return params, off


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # He-scale uniform: variance 2/fan_in keeps activations alive through
    # the full conv stack (smaller inits plateau for tens of epochs)
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _add_conv(w: CodecWeights, rng, name: str, c_in: int, c_out: int, k: int = 3,
              transposed: bool = False) -> None:
    fan_in = c_in * k * k
    shape = (c_in, c_out, k, k) if transposed else (c_out, c_in, k, k)
    w.add(f"{name}.kernel", _fan_in_uniform(rng, shape, fan_in))
    w.add(f"{name}.bias", np.zeros(c_out, dtype=np.float32))


def init_codec(config: CodecConfig) -> CodecWeights:
    """Deterministic seeded initialization; same config+seed gives identical weights."""
    rng = np.random.default_rng(config.seed)
    w = CodecWeights(config)
    chans = config.stage_channels()

    c_prev = config.input_channels
    for i, c in enumerate(chans):
        _add_conv(w, rng, f"enc.down{i}", c_prev, c)
        _add_conv(w, rng, f"enc.res{i}a", c, c)
        _add_conv(w, rng, f"enc.res{i}b", c, c)
        c_prev = c
    _add_conv(w, rng, "enc.out", c_prev, config.latent_channels)

    _add_conv(w, rng, "dec.head", config.latent_channels, chans[-1])
    c_prev = chans[-1]
    for i in reversed(range(len(chans))):
        c_next = chans[i - 1] if i > 0 else config.base_channels
        _add_conv(w, rng, f"dec.res{i}a", c_prev, c_prev)
        _add_conv(w, rng, f"dec.res{i}b", c_prev, c_prev)
        _add_conv(w, rng, f"dec.up{i}", c_prev, c_next, transposed=True)
        c_prev = c_next
    _add_conv(w, rng, "dec.out", c_prev, config.input_channels)
    return w


def _residual_block(x: Tensor, w: CodecWeights, name: str, slope: float) -> Tensor:
    h = ag.conv2d(x, w.get(f"{name}a.kernel"), w.get(f"{name}a.bias"), 1, 1)
    h = ag.leaky_relu(h, slope)
    h = ag.conv2d(h, w.get(f"{name}b.kernel"), w.get(f"{name}b.bias"), 1, 1)
    return ag.leaky_relu(ag.add(x, h), slope)


def encode(x: Tensor, w: CodecWeights) -> Tensor:
    """Analysis transform: (3,H,W) image in [0,1] to the latent tensor."""
    cfg = w.config
    if x.data.ndim != 3 or x.shape[0] != cfg.input_channels:
        raise ag.DimensionError(
            f"encode expects ({cfg.input_channels},H,W), got {x.shape}")
    h, wd = x.shape[1], x.shape[2]
    f = cfg.scale_factor
    if h % f or wd % f:
        raise ValueError(
            f"image dims {h}x{wd} not divisible by {f}; reflect-pad first "
            f"(see pad_image)")
    t = x
    for i in range(cfg.num_down_stages):
        t = ag.conv2d(t, w.get(f"enc.down{i}.kernel"), w.get(f"enc.down{i}.bias"), 2, 1)
        t = ag.leaky_relu(t, cfg.act_slope)
        t = _residual_block(t, w, f"enc.res{i}", cfg.act_slope)
    t = ag.conv2d(t, w.get("enc.out.kernel"), w.get("enc.out.bias"), 1, 1)
    # keep latents inside the quantizer's representable range: unbounded
    # outputs freeze under the clipped straight-through gradient
    return ag.scaled_tanh(t, cfg.latent_bound)


@dataclass
class QuantizedLatent:
    """Latent snapped to the 64-level grid plus its integer symbols."""

    values: Tensor
    symbols: np.ndarray
    quant_step: float

    @property
    def shape(self) -> tuple:
        return self.values.shape


def quantize_array(y: np.ndarray, step: float):
    """Grid-snap a raw array; returns (symbols, values, pass_mask)."""
    q = y / np.float32(step)
    rounded = np.copysign(np.floor(np.abs(q) + np.float32(0.5)), q)
    clamped = np.clip(rounded, -32, 31)
    symbols = clamped.astype(np.int64) + 32
    values = (clamped * np.float32(step)).astype(np.float32)
    pass_mask = np.abs(q) <= 32
    return symbols, values, pass_mask


def quantize(y: Tensor, step: float | None = None) -> QuantizedLatent:
    """6-bit uniform quantization with a clipped straight-through gradient.

    Rounds half away from zero; gradient passes unchanged where
    |y/step| <= 32 and is zero outside.
    """
    if step is None:
        step = 0.125
    symbols, values, mask = quantize_array(y.data, step)
    vt = ag.ste_quantize(y, values, mask)
    return QuantizedLatent(values=vt, symbols=symbols, quant_step=float(step))


def decode_values(values: Tensor, w: CodecWeights) -> Tensor:
    """Synthesis transform on raw latent values (tape-registered)."""
    cfg = w.config
    if values.data.ndim != 3 or values.shape[0] != cfg.latent_channels:
        raise ag.DimensionError(
            f"decode expects ({cfg.latent_channels},h,w) latent, got {values.shape}")
    chans = cfg.stage_channels()
    t = ag.conv2d(values, w.get("dec.head.kernel"), w.get("dec.head.bias"), 1, 1)
    t = ag.leaky_relu(t, cfg.act_slope)
    for i in reversed(range(len(chans))):
        t = _residual_block(t, w, f"dec.res{i}", cfg.act_slope)
        target_h, target_w = t.shape[1] * 2, t.shape[2] * 2
        # stride-2 tconv with odd kernel overshoots by one; crop back
        t = ag.tconv2d(t, w.get(f"dec.up{i}.kernel"), w.get(f"dec.up{i}.bias"), 2, 0)
        t = ag.crop2d(t, target_h, target_w)
        t = ag.leaky_relu(t, cfg.act_slope)
    t = ag.conv2d(t, w.get("dec.out.kernel"), w.get("dec.out.bias"), 1, 1)
    return ag.sigmoid(t)


def decode(latent: QuantizedLatent, w: CodecWeights) -> Tensor:
    """Reconstruct (3,H,W) in [0,1] from a quantized latent."""
    return decode_values(latent.values, w)


def pad_image(img: np.ndarray, factor: int):
    """Reflect-pad (3,H,W) on right/bottom to a multiple of ``factor``.

    Returns (padded, (H, W)); the original dims travel in the bitstream
    header so outputs can be cropped back.
    """
    _, h, w = img.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return img, (h, w)
    if h == 1 or w == 1:
        padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    else:
        padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return padded, (h, w)


def crop_image(img: np.ndarray, orig_hw) -> np.ndarray:
    h, w = orig_hw
    return img[:, :h, :w]
