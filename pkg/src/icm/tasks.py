"""Frozen feature extractor, perceptual proxy loss, and the toy machine task.

The feature extractor is a seeded, never-trained conv stack with four
max-pool stages; the proxy loss compares its taps (inputs to the 2nd and
4th pools) between original and reconstructed images. The toy task is a
small per-pixel segmentation network trained once on the synthetic
corpus and then frozen; its cross-entropy and mIoU stand in for the
downstream machine's loss and metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .codec import _Layers
from .corpus import NUM_CLASSES, Corpus
from .optim import Adam


@dataclass(frozen=True)
class ExtractorConfig:
    channels: tuple = (12, 24, 32, 48)
    act_slope: float = 0.2
    seed: int = 0


class FeatureExtractor(_Layers):
    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config


def init_extractor(config: ExtractorConfig = ExtractorConfig()) -> FeatureExtractor:
    """Seeded random conv stack, frozen from birth."""
    rng = np.random.default_rng(config.seed)
    fe = FeatureExtractor(config)
    c_prev = 3
    for i, c in enumerate(config.channels):
        fan_in = c_prev * 9
        limit = np.sqrt(2.0 / fan_in)  # keep activations alive through 4 blocks
        fe.add(f"block{i}.kernel",
               rng.uniform(-limit, limit, (c, c_prev, 3, 3)).astype(np.float32))
        fe.add(f"block{i}.bias", np.zeros(c, dtype=np.float32))
        c_prev = c
    fe.freeze()
    for _, t in fe.parameters():
        t.requires_grad = False
        t.grad = None
    return fe


def extract_features(t: Tensor, fe: FeatureExtractor):
    """Taps (T2, T4): inputs to the 2nd and 4th max-pool stages."""
    if t.data.ndim != 3 or t.shape[0] != 3:
        raise ag.DimensionError(f"extractor expects (3,H,W), got {t.shape}")
    h, w = t.shape[1], t.shape[2]
    if h % 8 or w % 8:
        raise ag.DimensionError(f"extractor needs dims divisible by 8, got {h}x{w}")
    slope = fe.config.act_slope
    x = t
    taps = {}
    for i in range(4):
        x = ag.conv2d(x, fe.get(f"block{i}.kernel"), fe.get(f"block{i}.bias"), 1, 1)
        x = ag.leaky_relu(x, slope)
        if i == 1:
            taps["t2"] = x
        if i == 3:
            taps["t4"] = x
            break
        x = ag.maxpool2(x)
    return taps["t2"], taps["t4"]


def perceptual_loss(x: Tensor, xhat: Tensor, fe: FeatureExtractor) -> Tensor:
    """MSE between extractor taps of the two images, summed over both taps."""
    if x.shape != xhat.shape:
        raise ag.DimensionError(f"shapes differ: {x.shape} vs {xhat.shape}")
    x2, x4 = extract_features(x, fe)
    h2, h4 = extract_features(xhat, fe)
    return ag.add(ag.mse(x2, h2), ag.mse(x4, h4))


# ---------------------------------------------------------------------------
# toy segmentation task

@dataclass(frozen=True)
class TaskConfig:
    num_classes: int = NUM_CLASSES
    hidden_channels: int = 16
    act_slope: float = 0.2
    seed: int = 0


class ToyTaskModel(_Layers):
    def __init__(self, config: TaskConfig):
        super().__init__()
        self.config = config
        self.frozen = False


def init_task_model(config: TaskConfig = TaskConfig()) -> ToyTaskModel:
    rng = np.random.default_rng(config.seed)
    tm = ToyTaskModel(config)
    hid, k = config.hidden_channels, config.num_classes
    for name, c_in, c_out in (("l0", 3, hid), ("l1", hid, hid), ("l2", hid, k)):
        limit = 1.0 / np.sqrt(c_in * 9)
        tm.add(f"{name}.kernel", rng.uniform(-limit, limit, (c_out, c_in, 3, 3)).astype(np.float32))
        tm.add(f"{name}.bias", np.zeros(c_out, dtype=np.float32))
    return tm


def task_logits(x: Tensor, tm: ToyTaskModel) -> Tensor:
    slope = tm.config.act_slope
    h = ag.leaky_relu(ag.conv2d(x, tm.get("l0.kernel"), tm.get("l0.bias"), 1, 1), slope)
    h = ag.leaky_relu(ag.conv2d(h, tm.get("l1.kernel"), tm.get("l1.bias"), 1, 1), slope)
    return ag.conv2d(h, tm.get("l2.kernel"), tm.get("l2.bias"), 1, 1)


def task_loss(xhat: Tensor, gt: np.ndarray, tm: ToyTaskModel) -> Tensor:
    """Mean per-pixel cross-entropy (natural log) of the task predictions."""
    gt = np.asarray(gt)
    if gt.shape != xhat.shape[1:]:
        raise ag.DimensionError(
            f"labels {gt.shape} do not match image spatial dims {xhat.shape[1:]}")
    k = tm.config.num_classes
    if gt.min() < 0 or gt.max() >= k:
        raise ValueError(f"labels must lie in [0,{k})")
    logits = task_logits(xhat, tm)
    logp = ag.log_softmax_symbols(logits)
    picked = ag.gather_symbols(logp, gt)
    return ag.scale(ag.sumall(picked), -1.0 / gt.size)


def task_metric(xhat: Tensor, gt: np.ndarray, tm: ToyTaskModel) -> float:
    """Mean IoU over classes present in prediction or ground truth.

    Classes absent from both are excluded; if every class is absent
    (empty input) the metric is 1.0 by the exact-match-of-empties rule.
    """
    gt = np.asarray(gt)
    pred = task_logits(xhat, tm).data.argmax(axis=0)
    ious = []
    for c in range(tm.config.num_classes):
        p = pred == c
        g = gt == c
        union = int(np.logical_or(p, g).sum())
        if union == 0:
            continue
        ious.append(int(np.logical_and(p, g).sum()) / union)
    if not ious:
        return 1.0
    return float(np.mean(ious))


def params_checksum(layers: _Layers) -> int:
    import zlib

    h = 0
    for name, t in layers.parameters():
        h = zlib.crc32(name.encode(), h)
        h = zlib.crc32(np.ascontiguousarray(t.data, dtype="<f4").tobytes(), h)
    return h & 0xFFFFFFFF


def train_task_model(corpus: Corpus, config: TaskConfig = TaskConfig(),
                     epochs: int = 30, lr: float = 3e-3, batch_size: int = 8,
                     seed: int = 0) -> ToyTaskModel:
    """Fit the toy segmenter on clean images, then freeze it."""
    tm = init_task_model(config)
    opt = Adam([t for _, t in tm.parameters()], lr=lr)
    order_rng = np.random.default_rng(seed)
    n = len(corpus)
    for _ in range(epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            opt.zero_grad()
            with ag.Tape() as tape:
                total = None
                for i in idx:
                    loss = task_loss(Tensor(corpus.images[i]), corpus.labels[i], tm)
                    total = loss if total is None else ag.add(total, loss)
                total = ag.scale(total, 1.0 / len(idx))
            tape.backward(total)
            opt.step()
            tape.clear()
    freeze_task_model(tm)
    return tm


def freeze_task_model(tm: ToyTaskModel) -> None:
    tm.freeze()
    for _, t in tm.parameters():
        t.requires_grad = False
        t.grad = None
    tm.frozen = True


TASK_MAGIC = b"ICTM"
TASK_VERSION = 1


def save_task_model(tm: ToyTaskModel, path) -> None:
    from . import training

    meta = {"config": {k: getattr(tm.config, k) for k in
                       ("num_classes", "hidden_channels", "act_slope", "seed")}}
    training.save_container(path, TASK_MAGIC, TASK_VERSION, meta, tm.parameters())


def load_task_model(path) -> ToyTaskModel:
    from . import training

    meta, params = training.load_container(path, TASK_MAGIC, TASK_VERSION)
    tm = ToyTaskModel(TaskConfig(**meta["config"]))
    for name, arr in params:
        tm.add(name, arr)
    freeze_task_model(tm)
    return tm
