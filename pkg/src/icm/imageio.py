"""PNG/PPM image and label-map I/O (8-bit, via Pillow)."""

from __future__ import annotations

import numpy as np
from PIL import Image


class ImageIOError(Exception):
    pass


def to_unit(img_u8: np.ndarray) -> np.ndarray:
    """(H,W,3) uint8 -> (3,H,W) float32 in [0,1]."""
    return (img_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)


def to_u8(img: np.ndarray) -> np.ndarray:
    """(3,H,W) float in [0,1] -> (H,W,3) uint8, round-half-up."""
    arr = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG/PPM as (3,H,W) float32 in [0,1]."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            return to_unit(np.asarray(rgb))
    except FileNotFoundError:
        raise
    except Exception as e:  # Pillow raises assorted types for bad files
        raise ImageIOError(f"cannot read image {path}: {e}") from e


def write_image(path, img: np.ndarray) -> None:
    """Write (3,H,W) float in [0,1] as PNG or PPM by extension."""
    u8 = to_u8(img)
    fmt = "PPM" if str(path).lower().endswith((".ppm", ".pnm")) else "PNG"
    Image.fromarray(u8, mode="RGB").save(path, format=fmt)


def read_labels(path) -> np.ndarray:
    """Read a single-channel label PNG as (H,W) int64."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.int64)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise ImageIOError(f"cannot read labels {path}: {e}") from e


def write_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise ImageIOError("labels must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")
