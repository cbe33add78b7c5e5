"""Per-image inference-time latent optimization through frozen models.

Starting from the encoder's latent, each iteration quantizes, rebuilds
the probability pyramid, decodes, and takes one Adam step on the
combined rate + perceptual-proxy objective with respect to the latent
alone. Decoder, probability model and feature extractor stay untouched,
so the bitstream format and the decoder side are unchanged; no ground
truth or task network is consulted.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import codec as codec_mod
from . import probmodel as pm
from . import tasks
from .autograd import Tensor
from .optim import Adam


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-4
    iterations: int = 30
    w_rate: float = 1.0
    w_proxy: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    trace: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.w_rate < 0 or self.w_proxy < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class FinetuneReport:
    config: FinetuneConfig
    initial_total: float = 0.0
    final_total: float = 0.0
    initial_rate_bpp: float = 0.0
    final_rate_bpp: float = 0.0
    initial_proxy: float = 0.0
    final_proxy: float = 0.0
    iterations_run: int = 0
    wall_time: float = 0.0
    aborted: bool = False
    trace_total: list = field(default_factory=list)


def feature_loss(t1: Tensor, t2: Tensor, fe) -> Tensor:
    """Sum of tap MSEs between two images; the finetuning objective's
    perceptual term, identical to the proxy-task perceptual loss."""
    return tasks.perceptual_loss(t1, t2, fe)


def _objective(ybar: Tensor, x: Tensor, cw, pw, fe, cfg: FinetuneConfig,
               num_pixels: int):
    with ag.Tape() as tape:
        ql = codec_mod.quantize(ybar, cw.config.quant_step)
        pyramid = pm.build_pyramid(ql, pw.config.num_levels)
        est = pm.rate_loss(pyramid, pw, num_pixels=num_pixels)
        xhat = codec_mod.decode(ql, cw)
        proxy = feature_loss(x, xhat, fe)
        rate_bpp = ag.scale(est.total_bits, 1.0 / num_pixels)
        total = ag.add(ag.scale(rate_bpp, cfg.w_rate), ag.scale(proxy, cfg.w_proxy))
    return tape, total, rate_bpp.item(), proxy.item()


def finetune_latent(x: np.ndarray, cw, pw, fe, cfg: FinetuneConfig = FinetuneConfig()):
    """Content-adapt the latent of one preprocessed (3,H,W) image.

    Returns (latent Tensor, FinetuneReport). The latent is the last
    iterate, per-iteration losses land in the report when tracing, and a
    non-finite loss aborts with the iterate from before the failing step.
    """
    t_start = time.perf_counter()
    for layers in (cw, pw, fe):
        layers.freeze()
    x_t = Tensor(np.asarray(x, dtype=np.float32))
    num_pixels = x_t.shape[1] * x_t.shape[2]

    y0 = codec_mod.encode(x_t, cw)
    ybar = Tensor(y0.data.copy(), requires_grad=True)
    opt = Adam([ybar], lr=cfg.learning_rate, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.eps)

    report = FinetuneReport(config=cfg)
    prev_data = ybar.data.copy()
    last = None
    for i in range(cfg.iterations + 1):
        if np.isfinite(ybar.data).all():
            tape, total, rate_bpp, proxy = _objective(
                ybar, x_t, cw, pw, fe, cfg, num_pixels)
            value = total.item()
        else:  # a diverged step poisoned the latent itself
            tape, value = None, float("nan")
        if not np.isfinite(value):
            # roll back to the iterate before the step that produced this
            ybar = Tensor(prev_data, requires_grad=True)
            report.aborted = True
            report.iterations_run = max(0, report.iterations_run - 1)
            if tape is not None:
                tape.clear()
            break
        last = (value, rate_bpp, proxy)
        if cfg.trace:
            report.trace_total.append(value)
        if i == 0:
            report.initial_total = value
            report.initial_rate_bpp = rate_bpp
            report.initial_proxy = proxy
        if i == cfg.iterations:
            tape.clear()
            break
        prev_data = ybar.data.copy()
        ybar.zero_grad()
        tape.backward(total)
        opt.step()
        tape.clear()
        report.iterations_run = i + 1
    if last is None:  # non-finite before any step; latent is E(x) unchanged
        last = (float("nan"), float("nan"), float("nan"))
    report.final_total, report.final_rate_bpp, report.final_proxy = last
    report.wall_time = time.perf_counter() - t_start
    return ybar, report


# ---------------------------------------------------------------------------
# batch driver (embarrassingly parallel across images)

def resolve_workers(requested: int | None = None) -> int:
    if requested is not None and requested > 0:
        return requested
    env = os.environ.get("ICM_THREADS")
    if env:
        try:
            v = int(env)
            if v > 0:
                return v
        except ValueError:
            pass
    return os.cpu_count() or 1


def _worker_finetune(args):
    idx, img, cw, pw, fe, cfg = args
    ybar, report = finetune_latent(img, cw, pw, fe, cfg)
    return idx, ybar.data, report


def finetune_batch(images, cw, pw, fe, cfg: FinetuneConfig = FinetuneConfig(),
                   workers: int | None = None):
    """Finetune a list of images; results are index-aligned and identical
    for any worker count."""
    n = len(images)
    workers = min(resolve_workers(workers), max(n, 1))
    jobs = [(i, images[i], cw, pw, fe, cfg) for i in range(n)]
    results = [None] * n
    if workers <= 1 or n <= 1:
        for job in jobs:
            idx, data, report = _worker_finetune(job)
            results[idx] = (data, report)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for idx, data, report in pool.map(_worker_finetune, jobs, chunksize=1):
                results[idx] = (data, report)
    return results
