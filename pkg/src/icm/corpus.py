"""Seeded synthetic corpus: geometric shapes on textured backgrounds.

Each scene is an 8-bit RGB image plus a per-pixel label map with four
classes: 0 background, 1 rectangle, 2 disk, 3 triangle. Shape classes
carry distinct color families so a small segmentation network has real
signal, and the generator is a pure function of (seed, count, size).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import imageio

NUM_CLASSES = 4
CLASS_NAMES = ("background", "rectangle", "disk", "triangle")


@dataclass
class Corpus:
    images: list  # (3,H,W) float32 in [0,1], already 8-bit aligned
    labels: list  # (H,W) int64 in [0,NUM_CLASSES)

    def __len__(self) -> int:
        return len(self.images)


def _box_blur(a: np.ndarray, radius: int) -> np.ndarray:
    # separable box filter with edge clamping, via cumulative-sum differences
    width = 2 * radius + 1
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        c = np.cumsum(np.pad(a, pad, mode="edge"), axis=axis, dtype=np.float64)
        zero_shape = list(c.shape)
        zero_shape[axis] = 1
        base = np.concatenate([np.zeros(zero_shape), c], axis=axis)
        hi = [slice(None), slice(None)]
        hi[axis] = slice(width, None)
        lo = [slice(None), slice(None)]
        lo[axis] = slice(None, -width)
        a = ((base[tuple(hi)] - base[tuple(lo)]) / width).astype(np.float32)
    return a


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.30, 0.55)
    tint = rng.uniform(-0.05, 0.05, 3)
    img = np.empty((3, size, size), dtype=np.float32)
    coarse = rng.uniform(-1, 1, (size, size)).astype(np.float32)
    texture = _box_blur(coarse, max(2, size // 16)) * 2.5
    fine = rng.uniform(-0.02, 0.02, (size, size)).astype(np.float32)
    for c in range(3):
        img[c] = base + tint[c] + texture + fine
    return np.clip(img, 0.0, 1.0)


def _class_color(rng: np.random.Generator, cls: int) -> np.ndarray:
    strong = rng.uniform(0.60, 0.95)
    weak = rng.uniform(0.05, 0.30, 2)
    color = np.empty(3, dtype=np.float32)
    order = {1: (0, 1, 2), 2: (1, 0, 2), 3: (2, 0, 1)}[cls]
    color[order[0]] = strong
    color[order[1]] = weak[0]
    color[order[2]] = weak[1]
    return color


def _shape_mask(rng: np.random.Generator, cls: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy = rng.uniform(0.2, 0.8) * size
    cx = rng.uniform(0.2, 0.8) * size
    extent = rng.uniform(0.12, 0.26) * size
    if cls == 1:
        a = extent
        b = rng.uniform(0.12, 0.26) * size
        return (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)
    if cls == 2:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= extent ** 2
    # triangle: three vertices around the center, inside = consistent side signs
    angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
    if np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]])).min() < 0.5:
        angles = np.array([0.0, 2.1, 4.2]) + rng.uniform(0, 2 * np.pi)
    vy = cy + extent * np.sin(angles)
    vx = cx + extent * np.cos(angles)
    mask = np.ones((size, size), dtype=bool)
    for i in range(3):
        y0, x0 = vy[i], vx[i]
        y1, x1 = vy[(i + 1) % 3], vx[(i + 1) % 3]
        side = (xx - x0) * (y1 - y0) - (yy - y0) * (x1 - x0)
        ref = (vx[(i + 2) % 3] - x0) * (y1 - y0) - (vy[(i + 2) % 3] - y0) * (x1 - x0)
        mask &= (side * ref) >= 0
    return mask


def generate_scene(rng: np.random.Generator, size: int):
    img = _background(rng, size)
    labels = np.zeros((size, size), dtype=np.int64)
    for _ in range(int(rng.integers(3, 6))):
        cls = int(rng.integers(1, NUM_CLASSES))
        mask = _shape_mask(rng, cls, size)
        color = _class_color(rng, cls)
        jitter = rng.uniform(-0.03, 0.03, (size, size)).astype(np.float32)
        for ch in range(3):
            img[ch][mask] = np.clip(color[ch] + jitter[mask], 0.0, 1.0)
        labels[mask] = cls
    # align to the 8-bit grid so in-memory and PNG-roundtripped pixels match
    img = np.floor(img * 255.0 + 0.5).astype(np.float32) / 255.0
    return img, labels


def generate_corpus(seed: int, count: int, size: int) -> Corpus:
    """Deterministic corpus of ``count`` scenes at ``size`` x ``size``."""
    if size % 8:
        raise ValueError("size must be a multiple of 8 for the feature extractor")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(count):
        img, lab = generate_scene(rng, size)
        images.append(img)
        labels.append(lab)
    return Corpus(images=images, labels=labels)


def save_corpus(corpus: Corpus, out_dir) -> None:
    img_dir = os.path.join(out_dir, "images")
    lab_dir = os.path.join(out_dir, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    for i, (img, lab) in enumerate(zip(corpus.images, corpus.labels)):
        imageio.write_image(os.path.join(img_dir, f"{i:05d}.png"), img)
        imageio.write_labels(os.path.join(lab_dir, f"{i:05d}.png"), lab)


def load_corpus(path) -> Corpus:
    img_dir = os.path.join(path, "images")
    lab_dir = os.path.join(path, "labels")
    if not os.path.isdir(img_dir):
        raise FileNotFoundError(f"no images/ directory under {path}")
    names = sorted(n for n in os.listdir(img_dir) if n.endswith((".png", ".ppm")))
    images, labels = [], []
    for n in names:
        images.append(imageio.read_image(os.path.join(img_dir, n)))
        lab_path = os.path.join(lab_dir, os.path.splitext(n)[0] + ".png")
        if os.path.exists(lab_path):
            labels.append(imageio.read_labels(lab_path))
        else:
            labels.append(None)
    return Corpus(images=images, labels=labels)
