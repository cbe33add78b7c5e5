"""Hierarchical probability model over the quantized latent.

Builds an N-level 2x-downsampled pyramid of the latent symbols, predicts
per-symbol categorical distributions for each level conditioned on the
next coarser one, and turns the observed symbols' negative log
probabilities into a differentiable coded-size estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import codec as codec_mod
from .autograd import Tensor
from .codec import QUANT_LEVELS, QuantizedLatent, _Layers

LOG2E = 1.0 / math.log(2.0)


@dataclass(frozen=True)
class ProbConfig:
    latent_channels: int = 8
    hidden_channels: int = 32
    num_levels: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_levels <= 4:
            raise ValueError("num_levels must lie in 1..4")


class ProbWeights(_Layers):
    def __init__(self, config: ProbConfig):
        super().__init__()
        self.config = config


def init_probmodel(config: ProbConfig) -> ProbWeights:
    """Seeded init; the output layer and base prior start at zero so the
    untrained model predicts the uniform distribution (6 bits/symbol)."""
    rng = np.random.default_rng(config.seed)
    w = ProbWeights(config)
    c, hid = config.latent_channels, config.hidden_channels
    limit = 1.0 / np.sqrt(c * 9)
    w.add("cond1.kernel", rng.uniform(-limit, limit, (hid, c, 3, 3)).astype(np.float32))
    w.add("cond1.bias", np.zeros(hid, dtype=np.float32))
    w.add("cond2.kernel", np.zeros((QUANT_LEVELS * c, hid, 3, 3), dtype=np.float32))
    w.add("cond2.bias", np.zeros(QUANT_LEVELS * c, dtype=np.float32))
    w.add("base.logits", np.zeros((QUANT_LEVELS, c), dtype=np.float32))
    return w


@dataclass
class Pyramid:
    """Levels 1..N of the downsampled latent; index 0 is the finest."""

    levels: list  # of QuantizedLatent
    quant_step: float

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def build_pyramid(latent: QuantizedLatent, num_levels: int) -> Pyramid:
    """Downsample by 2x2 value-space mean, requantizing onto the 64-level grid.

    Level 1 is the latent itself; odd dims are edge-replicated before
    pooling. Deterministic, so the decoder can rebuild every coarse level
    from decoded symbols alone.
    """
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    levels = [latent]
    cur = latent
    for _ in range(num_levels - 1):
        v = cur.values
        ph = v.shape[1] % 2
        pw = v.shape[2] % 2
        if ph or pw:
            v = ag.replicate_pad_br(v, ph, pw)
        pooled = ag.resample2(v, "avg_down")
        cur = codec_mod.quantize(pooled, latent.quant_step)
        levels.append(cur)
    return Pyramid(levels=levels, quant_step=latent.quant_step)


def conditional_logits(coarse_values: Tensor, w: ProbWeights, target_hw) -> Tensor:
    """Predict (64, C, h, w) logits for a level from the next coarser one."""
    th, tw = target_hw
    c = w.config.latent_channels
    if coarse_values.shape[0] != c:
        raise ag.DimensionError(
            f"coarse level has {coarse_values.shape[0]} channels, expected {c}")
    ch, cw = coarse_values.shape[1], coarse_values.shape[2]
    if (th + 1) // 2 != ch or (tw + 1) // 2 != cw:
        raise ag.DimensionError(
            f"coarse dims {ch}x{cw} inconsistent with target {th}x{tw}")
    up = ag.resample2(coarse_values, "nearest_up")
    up = ag.crop2d(up, th, tw)
    h = ag.conv2d(up, w.get("cond1.kernel"), w.get("cond1.bias"), 1, 1)
    h = ag.leaky_relu(h, 0.2)
    h = ag.conv2d(h, w.get("cond2.kernel"), w.get("cond2.bias"), 1, 1)
    return ag.reshape(h, (QUANT_LEVELS, c, th, tw))


def base_logits(w: ProbWeights, shape) -> Tensor:
    """Tile the per-channel base prior over a level's sites."""
    c, h, wd = shape
    base = ag.reshape(w.get("base.logits"), (QUANT_LEVELS, c, 1, 1))
    return ag.tile2d(base, h, wd)


@dataclass
class RateEstimate:
    """Differentiable Shannon cross-entropy estimate of the coded size.

    ``per_level_bits[0]`` is the finest level; the last entry is the
    base-prior-coded coarsest level.
    """

    total_bits: Tensor
    per_level_bits: list
    num_pixels: int | None = None

    @property
    def bpp(self) -> float:
        if not self.num_pixels:
            raise ValueError("num_pixels unknown; pass it to rate_loss")
        return self.total_bits.item() / self.num_pixels


def level_bits(logits: Tensor, symbols: np.ndarray) -> Tensor:
    """-log2 likelihood of the observed symbols under the logits, summed."""
    logp = ag.log_softmax_symbols(logits)
    picked = ag.gather_symbols(logp, symbols)
    return ag.scale(ag.sumall(picked), -LOG2E)


def rate_loss(pyramid: Pyramid, w: ProbWeights, num_pixels: int | None = None) -> RateEstimate:
    """Eq-style rate estimate: coarsest level under the base prior, finer
    levels under conditional predictions with the coarser level as context."""
    per_level = []
    total = None
    n = pyramid.num_levels
    for idx in range(n):
        level = pyramid.levels[idx]
        if idx == n - 1:
            logits = base_logits(w, level.shape)
        else:
            coarse = pyramid.levels[idx + 1]
            logits = conditional_logits(coarse.values, w, level.shape[1:])
        bits = level_bits(logits, level.symbols)
        per_level.append(bits)
        total = bits if total is None else ag.add(total, bits)
    return RateEstimate(
        total_bits=total,
        per_level_bits=[b.item() for b in per_level],
        num_pixels=num_pixels,
    )


def level_probabilities(logits: Tensor) -> np.ndarray:
    """Per-site symbol probabilities as a plain (64, C, h, w) float array."""
    logp = ag.log_softmax_symbols(logits)
    return np.exp(logp.data.astype(np.float64))
