"""Offline training of codec + probability model under the multi-task loss.

Per epoch, one (w_rate, w_task, w_mse) triple from the cycled schedule
weights the per-pixel rate estimate, the frozen task network's
cross-entropy and the reconstruction MSE; Adam updates encoder, decoder
and probability model jointly with straight-through gradients through
the quantizer. After every epoch the held-out set is evaluated and a
checkpoint with its rate-metric point is recorded.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import codec as codec_mod
from . import probmodel as pm
from . import tasks
from .autograd import Tensor
from .corpus import Corpus
from .optim import Adam
from .rdeval import RDPoint

DEFAULT_SCHEDULE = ((1.0, 0.1, 1.0), (4.0, 0.1, 1.0), (16.0, 0.1, 1.0))


class TrainDivergedError(RuntimeError):
    """A loss term went non-finite; the message names the offender."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    schedule: tuple = DEFAULT_SCHEDULE

    def __post_init__(self):
        if not self.schedule:
            raise ValueError("weight schedule needs at least one triple")
        for triple in self.schedule:
            if len(triple) != 3 or any(w < 0 for w in triple):
                raise ValueError(f"bad weight triple {triple}")


@dataclass
class Checkpoint:
    epoch: int
    codec_weights: codec_mod.CodecWeights
    prob_weights: pm.ProbWeights
    rd: RDPoint


@dataclass
class EpochLog:
    epoch: int
    weights: tuple
    mean_rate_bpp: float
    mean_task: float
    mean_mse: float

    @property
    def train_loss(self) -> float:
        w_rate, w_task, w_mse = self.weights
        return w_rate * self.mean_rate_bpp + w_task * self.mean_task + w_mse * self.mean_mse


def image_loss(img: np.ndarray, labels, cw: codec_mod.CodecWeights,
               pw: pm.ProbWeights, tm, weights):
    """One image's multi-task loss under an active tape.

    Returns (loss Tensor, components dict). The rate term is normalized to
    bits per pixel so the three terms share a common scale.
    """
    w_rate, w_task, w_mse = weights
    x = Tensor(img)
    num_pixels = img.shape[1] * img.shape[2]
    y = codec_mod.encode(x, cw)
    if not np.isfinite(y.data).all():
        raise TrainDivergedError(
            "encoder latent became non-finite; every loss term is poisoned")
    ql = codec_mod.quantize(y, cw.config.quant_step)
    pyramid = pm.build_pyramid(ql, pw.config.num_levels)
    rate = pm.rate_loss(pyramid, pw, num_pixels=num_pixels)
    xhat = codec_mod.decode(ql, cw)

    rate_bpp = ag.scale(rate.total_bits, 1.0 / num_pixels)
    recon = ag.mse(x, xhat)
    comps = {"rate": rate_bpp.item(), "mse": recon.item()}
    loss = ag.add(ag.scale(rate_bpp, w_rate), ag.scale(recon, w_mse))
    if w_task > 0 and labels is not None:
        task = tasks.task_loss(xhat, labels, tm)
        comps["task"] = task.item()
        loss = ag.add(loss, ag.scale(task, w_task))
    else:
        comps["task"] = 0.0
    for name in ("rate", "task", "mse"):
        if not np.isfinite(comps[name]):
            raise TrainDivergedError(f"loss term '{name}' became non-finite")
    return loss, comps


def evaluate_pair(cw: codec_mod.CodecWeights, pw: pm.ProbWeights,
                  img: np.ndarray, labels, tm):
    """(estimated bpp, task metric) for one image, inference only."""
    num_pixels = img.shape[1] * img.shape[2]
    y = codec_mod.encode(Tensor(img), cw)
    ql = codec_mod.quantize(y, cw.config.quant_step)
    pyramid = pm.build_pyramid(ql, pw.config.num_levels)
    est = pm.rate_loss(pyramid, pw, num_pixels=num_pixels)
    xhat = codec_mod.decode(ql, cw)
    metric = tasks.task_metric(xhat, labels, tm) if labels is not None else 0.0
    return est.bpp, metric


def evaluate_checkpoint(cw: codec_mod.CodecWeights, pw: pm.ProbWeights,
                        heldout: Corpus, tm, label: str = "") -> RDPoint:
    """Mean estimated bpp and mean task metric over the held-out set."""
    bpps, metrics = [], []
    for img, lab in zip(heldout.images, heldout.labels):
        bpp, metric = evaluate_pair(cw, pw, img, lab, tm)
        bpps.append(bpp)
        metrics.append(metric)
    return RDPoint(bpp=float(np.mean(bpps)), metric=float(np.mean(metrics)), label=label)


def train(config: TrainConfig, corpus: Corpus, heldout: Corpus, tm,
          codec_config: codec_mod.CodecConfig | None = None,
          prob_config: pm.ProbConfig | None = None,
          progress=None):
    """Run the training loop; returns (checkpoints, epoch_logs)."""
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    if not getattr(tm, "frozen", False):
        raise ValueError("task model must be trained and frozen before codec training")
    codec_config = codec_config or codec_mod.CodecConfig(seed=config.seed)
    prob_config = prob_config or pm.ProbConfig(
        latent_channels=codec_config.latent_channels, seed=config.seed)
    if prob_config.latent_channels != codec_config.latent_channels:
        raise ValueError("probmodel latent_channels must match the codec")

    cw = codec_mod.init_codec(codec_config)
    pw = pm.init_probmodel(prob_config)
    params = [t for _, t in cw.parameters()] + [t for _, t in pw.parameters()]
    opt = Adam(params, lr=config.learning_rate)
    order_rng = np.random.default_rng(config.seed)

    checkpoints, logs = [], []
    n = len(corpus)
    for epoch in range(config.epochs):
        weights = config.schedule[epoch % len(config.schedule)]
        perm = order_rng.permutation(n)
        sums = {"rate": 0.0, "task": 0.0, "mse": 0.0}
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            opt.zero_grad()
            with ag.Tape() as tape:
                total = None
                for i in idx:
                    loss, comps = image_loss(
                        corpus.images[i], corpus.labels[i], cw, pw, tm, weights)
                    total = loss if total is None else ag.add(total, loss)
                    for k in sums:
                        sums[k] += comps[k]
                total = ag.scale(total, 1.0 / len(idx))
            tape.backward(total)
            opt.step()
            tape.clear()
        log = EpochLog(
            epoch=epoch, weights=tuple(weights),
            mean_rate_bpp=sums["rate"] / n, mean_task=sums["task"] / n,
            mean_mse=sums["mse"] / n)
        logs.append(log)

        ckpt_cw = _clone_weights(cw)
        ckpt_pw = _clone_prob(pw)
        rd = evaluate_checkpoint(ckpt_cw, ckpt_pw, heldout, tm, label=f"epoch{epoch:03d}")
        checkpoints.append(Checkpoint(
            epoch=epoch, codec_weights=ckpt_cw, prob_weights=ckpt_pw, rd=rd))
        if progress is not None:
            progress(epoch, log, rd)
    return checkpoints, logs


def _clone_weights(cw: codec_mod.CodecWeights) -> codec_mod.CodecWeights:
    out = codec_mod.CodecWeights(cw.config)
    for name, t in cw.parameters():
        out.add(name, t.data.copy())
    return out


def _clone_prob(pw: pm.ProbWeights) -> pm.ProbWeights:
    out = pm.ProbWeights(pw.config)
    for name, t in pw.parameters():
        out.add(name, t.data.copy())
    return out


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (little-endian): magic "ICKP", version u8, meta-length u32,
# meta JSON (configs, epoch, rd point), param count u16, then per param:
# name-length u16, name bytes, ndim u8, dims u32 each, float32 payload.
# A CRC32 over everything precedes nothing; it is the final u32.

CKPT_MAGIC = b"ICKP"
CKPT_VERSION = 1


class CheckpointFormatError(Exception):
    pass


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "epoch": ckpt.epoch,
        "codec_config": _dataclass_dict(ckpt.codec_weights.config),
        "prob_config": _dataclass_dict(ckpt.prob_weights.config),
        "rd": {"bpp": ckpt.rd.bpp, "metric": ckpt.rd.metric, "label": ckpt.rd.label},
    }
    groups = [("codec", ckpt.codec_weights), ("prob", ckpt.prob_weights)]
    all_params = [(f"{g}/{n}", t) for g, layer in groups for n, t in layer.parameters()]
    save_container(path, CKPT_MAGIC, CKPT_VERSION, meta, all_params)


def load_checkpoint(path) -> Checkpoint:
    meta, params = load_container(path, CKPT_MAGIC, CKPT_VERSION)
    ccfg = codec_mod.CodecConfig(**meta["codec_config"])
    pcfg = pm.ProbConfig(**meta["prob_config"])
    cw = codec_mod.CodecWeights(ccfg)
    pw = pm.ProbWeights(pcfg)
    for name, arr in params:
        group, pname = name.split("/", 1)
        (cw if group == "codec" else pw).add(pname, arr)
    rd = RDPoint(bpp=meta["rd"]["bpp"], metric=meta["rd"]["metric"], label=meta["rd"]["label"])
    return Checkpoint(epoch=meta["epoch"], codec_weights=cw, prob_weights=pw, rd=rd)


def save_container(path, magic: bytes, version: int, meta: dict, params) -> None:
    """Versioned binary container: magic, u8 version, u32 meta length,
    sorted-key JSON meta, packed parameter blobs, trailing CRC32."""
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(magic)
    buf.write(struct.pack("<B", version))
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(codec_mod.pack_params(params))
    body = buf.getvalue()
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_container(path, magic: bytes, version: int):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(magic) + 9 or raw[:len(magic)] != magic:
        raise CheckpointFormatError(f"not a {magic.decode()} container")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if crc != (zlib.crc32(body) & 0xFFFFFFFF):
        raise CheckpointFormatError("container CRC mismatch")
    off = len(magic)
    (got_version,) = struct.unpack_from("<B", body, off)
    off += 1
    if got_version != version:
        raise CheckpointFormatError(f"unsupported container version {got_version}")
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + meta_len].decode())
    off += meta_len
    params, _ = codec_mod.unpack_params(body, off)
    return meta, params


def _dataclass_dict(cfg) -> dict:
    import dataclasses

    return dataclasses.asdict(cfg)
