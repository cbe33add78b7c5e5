"""Bit-exact range coder and the bitstream container format.

The coder is a 32-bit-state, byte-renormalizing, carry-less range coder
over 16-bit quantized cumulative frequencies (total fixed at 65536,
every symbol span >= 1). The container wraps the coded payload with a
fixed little-endian header and a trailing CRC32.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import probmodel as pm
from .autograd import Tensor
from .codec import QUANT_LEVELS, QuantizedLatent

CDF_TOTAL = 1 << 16
_TOP = 1 << 24
_BOTTOM = 1 << 16
_MASK = 0xFFFFFFFF

MAGIC = b"ICM1"
VERSION = 1
_HEADER_FMT = "<4sBIIHHHBHII"  # magic, ver, H, W, C, h, w, N, delta, hash, paylen
HEADER_SIZE = struct.calcsize(_HEADER_FMT)
CRC_SIZE = 4


class CoderError(Exception):
    """Entropy-coding failure (invalid distribution, truncated payload)."""


class FormatError(CoderError):
    """Malformed container: bad magic, version, sizes or truncation."""


class CrcError(CoderError):
    """Container checksum mismatch."""


class ConfigMismatchError(CoderError):
    """Bitstream was produced under different model weights or grid."""


# ---------------------------------------------------------------------------
# cdf quantization

def quantize_cdf(probs) -> np.ndarray:
    """Deterministically map 64 probabilities to a 65-entry cumulative table.

    Largest-remainder allocation of 65536 units with a per-symbol floor of
    one unit, so every symbol stays decodable.
    """
    return quantize_cdf_batch(np.asarray(probs, dtype=np.float64)[None])[0]


def quantize_cdf_batch(probs: np.ndarray) -> np.ndarray:
    """Vectorized quantize_cdf over a (n, 64) probability matrix."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != QUANT_LEVELS:
        raise CoderError(f"expected (n, {QUANT_LEVELS}) probabilities, got {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any():
        raise CoderError("probabilities must be finite and non-negative")
    sums = p.sum(axis=1)
    if (np.abs(sums - 1.0) > 1e-4).any():
        raise CoderError("probabilities must sum to 1 within 1e-4")

    t = p * CDF_TOTAL
    floors = np.floor(t)
    spans = np.maximum(floors, 1.0).astype(np.int64)
    deficit = CDF_TOTAL - spans.sum(axis=1)

    rema = t - floors
    # stable argsort on negated remainders: ties resolve to the lower symbol
    order = np.argsort(-rema, axis=1, kind="stable")
    for i in np.nonzero(deficit > 0)[0]:
        take = order[i, : deficit[i]]
        spans[i, take] += 1
    for i in np.nonzero(deficit < 0)[0]:
        need = int(-deficit[i])
        row = spans[i]
        while need:
            j = int(row.argmax())
            give = min(need, int(row[j]) - 1)
            if give <= 0:
                raise CoderError("cannot normalize degenerate distribution")
            row[j] -= give
            need -= give

    cdf = np.zeros((p.shape[0], QUANT_LEVELS + 1), dtype=np.int64)
    np.cumsum(spans, axis=1, out=cdf[:, 1:])
    return cdf


# ---------------------------------------------------------------------------
# range coder core

def range_encode(symbols, cdfs) -> bytes:
    """Encode symbols (each in [0,64)) under per-symbol cumulative tables.

    ``cdfs`` is indexable per position: cdfs[i] is the 65-entry table for
    symbols[i].
    """
    low = 0
    rng = _MASK
    out = bytearray()
    for i, s in enumerate(symbols):
        s = int(s)
        if not 0 <= s < QUANT_LEVELS:
            raise CoderError(f"symbol {s} out of range at position {i}")
        cdf = cdfs[i]
        r = rng >> 16
        low += r * int(cdf[s])
        rng = r * (int(cdf[s + 1]) - int(cdf[s]))
        while (low ^ (low + rng)) < _TOP or rng < _BOTTOM:
            if (low ^ (low + rng)) < _TOP:
                out.append((low >> 24) & 0xFF)
                low = (low << 8) & _MASK
                rng <<= 8
                continue
            # range underflow straddling a byte boundary: waste the tail
            rng = (-low) & (_BOTTOM - 1)
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng <<= 8
    for _ in range(4):
        out.append((low >> 24) & 0xFF)
        low = (low << 8) & _MASK
    return bytes(out)


class _ByteReader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def next(self) -> int:
        if self.pos >= len(self.buf):
            raise CoderError("payload truncated: range decoder ran out of bytes")
        b = self.buf[self.pos]
        self.pos += 1
        return b


def range_decode(payload: bytes, cdfs, count: int):
    """Exact inverse of range_encode for the same per-symbol tables."""
    reader = _ByteReader(payload)
    low = 0
    rng = _MASK
    state = 0
    for _ in range(4):
        state = (state << 8) | reader.next()
    out = []
    for i in range(count):
        cdf = cdfs[i]
        r = rng >> 16
        value = (state - low) // r
        if value >= CDF_TOTAL:
            value = CDF_TOTAL - 1
        # highest symbol with cdf[s] <= value
        lo, hi = 0, QUANT_LEVELS
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if int(cdf[mid]) <= value:
                lo = mid
            else:
                hi = mid
        s = lo
        low += r * int(cdf[s])
        rng = r * (int(cdf[s + 1]) - int(cdf[s]))
        while (low ^ (low + rng)) < _TOP or rng < _BOTTOM:
            if (low ^ (low + rng)) < _TOP:
                state = ((state << 8) | reader.next()) & _MASK
                low = (low << 8) & _MASK
                rng <<= 8
                continue
            rng = (-low) & (_BOTTOM - 1)
            state = ((state << 8) | reader.next()) & _MASK
            low = (low << 8) & _MASK
            rng <<= 8
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# container

@dataclass
class Bitstream:
    """Header + range-coded payload; the on-disk interchange artifact."""

    orig_h: int
    orig_w: int
    latent_c: int
    latent_h: int
    latent_w: int
    num_levels: int
    quant_step: float
    config_hash: int
    payload: bytes
    version: int = VERSION

    @property
    def header_bytes(self) -> int:
        return HEADER_SIZE + CRC_SIZE

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    def to_bytes(self) -> bytes:
        delta_fixed = _delta_to_fixed(self.quant_step)
        head = struct.pack(
            _HEADER_FMT, MAGIC, self.version, self.orig_h, self.orig_w,
            self.latent_c, self.latent_h, self.latent_w, self.num_levels,
            delta_fixed, self.config_hash, len(self.payload))
        body = head + self.payload
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Bitstream":
        if len(raw) < HEADER_SIZE + CRC_SIZE:
            raise FormatError(f"container too short: {len(raw)} bytes")
        (magic, version, oh, ow, c, h, w, n, delta_fixed, cfg_hash,
         paylen) = struct.unpack_from(_HEADER_FMT, raw, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if len(raw) != HEADER_SIZE + paylen + CRC_SIZE:
            raise FormatError(
                f"container size {len(raw)} does not match declared payload {paylen}")
        body = raw[:HEADER_SIZE + paylen]
        (crc,) = struct.unpack_from("<I", raw, HEADER_SIZE + paylen)
        if crc != (zlib.crc32(body) & 0xFFFFFFFF):
            raise CrcError("CRC32 mismatch")
        return cls(
            orig_h=oh, orig_w=ow, latent_c=c, latent_h=h, latent_w=w,
            num_levels=n, quant_step=delta_fixed / 4096.0, config_hash=cfg_hash,
            payload=raw[HEADER_SIZE:HEADER_SIZE + paylen], version=version)


def _delta_to_fixed(step: float) -> int:
    fixed = round(step * 4096.0)
    if not 1 <= fixed <= 0xFFFF or abs(fixed / 4096.0 - step) > 1e-12:
        raise FormatError(
            f"quant_step {step} is not representable as a u16 multiple of 2^-12")
    return fixed


def prob_config_hash(pw: pm.ProbWeights, quant_step: float) -> int:
    """CRC32 fingerprint of the probability model and quantizer grid."""
    h = zlib.crc32(struct.pack(
        "<HBH", pw.config.latent_channels, pw.config.num_levels,
        _delta_to_fixed(quant_step)))
    for name, t in pw.parameters():
        h = zlib.crc32(name.encode(), h)
        h = zlib.crc32(np.ascontiguousarray(t.data, dtype="<f4").tobytes(), h)
    return h & 0xFFFFFFFF


def _level_dims(h: int, w: int, n: int):
    dims = [(h, w)]
    for _ in range(n - 1):
        h = (h + 1) // 2
        w = (w + 1) // 2
        dims.append((h, w))
    return dims


def _base_cdfs(pw: pm.ProbWeights, shape):
    c, h, w = shape
    logits = pm.base_logits(pw, (c, 1, 1))
    probs = pm.level_probabilities(logits)[:, :, 0, 0]  # (64, C)
    per_channel = quantize_cdf_batch(probs.T)  # (C, 65)
    return np.repeat(per_channel, h * w, axis=0)


def _cond_cdfs(pw: pm.ProbWeights, coarse_values: np.ndarray, shape):
    c, h, w = shape
    logits = pm.conditional_logits(Tensor(coarse_values), pw, (h, w))
    probs = pm.level_probabilities(logits)  # (64, C, h, w)
    flat = probs.reshape(QUANT_LEVELS, c * h * w).T
    return quantize_cdf_batch(flat)


def compress_latent(latent: QuantizedLatent, pw: pm.ProbWeights, orig_hw) -> Bitstream:
    """Losslessly code the quantized latent, coarsest pyramid level first."""
    n = pw.config.num_levels
    pyramid = pm.build_pyramid(latent, n)
    symbols_seq = []
    cdf_blocks = []
    for idx in reversed(range(n)):
        level = pyramid.levels[idx]
        if idx == n - 1:
            cdfs = _base_cdfs(pw, level.shape)
        else:
            cdfs = _cond_cdfs(pw, pyramid.levels[idx + 1].values.data, level.shape)
        symbols_seq.append(level.symbols.reshape(-1))
        cdf_blocks.append(cdfs)
    symbols = np.concatenate(symbols_seq)
    cdfs = np.concatenate(cdf_blocks, axis=0).tolist()
    payload = range_encode(symbols.tolist(), cdfs)
    return Bitstream(
        orig_h=orig_hw[0], orig_w=orig_hw[1],
        latent_c=latent.shape[0], latent_h=latent.shape[1], latent_w=latent.shape[2],
        num_levels=n, quant_step=latent.quant_step,
        config_hash=prob_config_hash(pw, latent.quant_step), payload=payload)


def decompress_latent(bs: Bitstream, pw: pm.ProbWeights) -> QuantizedLatent:
    """Exact inverse of compress_latent; rebuilds coarse context levels first."""
    if bs.config_hash != prob_config_hash(pw, bs.quant_step):
        raise ConfigMismatchError(
            "bitstream was coded under different probability-model weights")
    if bs.num_levels != pw.config.num_levels:
        raise ConfigMismatchError(
            f"bitstream has {bs.num_levels} levels, model expects {pw.config.num_levels}")
    c, h, w = bs.latent_c, bs.latent_h, bs.latent_w
    if c * h * w == 0:
        raise FormatError("declared latent is empty")
    if c != pw.config.latent_channels:
        raise ConfigMismatchError(
            f"bitstream latent has {c} channels, model expects {pw.config.latent_channels}")

    dims = _level_dims(h, w, bs.num_levels)
    step = np.float32(bs.quant_step)
    # levels arrive coarsest-first; each level's cdfs depend on the level
    # just decoded, so share one coder state across per-level blocks
    coder = _IncrementalDecoder(bs.payload)
    symbols = values = None
    for li, (lh, lw) in enumerate(reversed(dims)):
        shape = (c, lh, lw)
        if li == 0:
            cdfs = _base_cdfs(pw, shape)
        else:
            cdfs = _cond_cdfs(pw, values, shape)
        syms = coder.decode_block(cdfs.tolist(), c * lh * lw)
        symbols = np.asarray(syms, dtype=np.int64).reshape(shape)
        values = ((symbols - 32) * step).astype(np.float32)
    return QuantizedLatent(values=Tensor(values), symbols=symbols,
                           quant_step=float(bs.quant_step))


class _IncrementalDecoder:
    """Range decoder whose cdf tables arrive block by block."""

    def __init__(self, payload: bytes):
        self._reader = _ByteReader(payload)
        self.low = 0
        self.rng = _MASK
        self.state = 0
        for _ in range(4):
            self.state = (self.state << 8) | self._reader.next()

    def decode_block(self, cdfs, count: int):
        out = []
        low, rng, state = self.low, self.rng, self.state
        reader = self._reader
        for i in range(count):
            cdf = cdfs[i]
            r = rng >> 16
            value = (state - low) // r
            if value >= CDF_TOTAL:
                value = CDF_TOTAL - 1
            lo, hi = 0, QUANT_LEVELS
            while hi - lo > 1:
                mid = (lo + hi) >> 1
                if cdf[mid] <= value:
                    lo = mid
                else:
                    hi = mid
            s = lo
            low += r * cdf[s]
            rng = r * (cdf[s + 1] - cdf[s])
            while (low ^ (low + rng)) < _TOP or rng < _BOTTOM:
                if (low ^ (low + rng)) < _TOP:
                    state = ((state << 8) | reader.next()) & _MASK
                    low = (low << 8) & _MASK
                    rng <<= 8
                    continue
                rng = (-low) & (_BOTTOM - 1)
                state = ((state << 8) | reader.next()) & _MASK
                low = (low << 8) & _MASK
                rng <<= 8
            out.append(s)
        self.low, self.rng, self.state = low, rng, state
        return out
