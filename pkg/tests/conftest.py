"""Shared test fixtures: synthetic datasets and optional real-data discovery.

Real benchmark datasets are not bundled; tests that need them look under
``$BTNN_DATA_DIR`` (default ``./data``) and skip with instructions when the
files are absent.  Synthetic generators below cover everything else.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from btnn.data import LabeledImageSet


def data_root() -> Path:
    return Path(os.environ.get("BTNN_DATA_DIR", "data"))


def fashion_paths() -> dict | None:
    root = data_root() / "fashion"
    for suffix in ("", ".gz"):
        train = root / f"train-images-idx3-ubyte{suffix}"
        if train.exists():
            return {
                "train_images": str(train),
                "val_images": str(root / f"t10k-images-idx3-ubyte{suffix}"),
            }
    return None


def cifar_paths() -> dict | None:
    root = data_root() / "cifar-10-batches-bin"
    if (root / "data_batch_1.bin").exists():
        return {
            "train": [str(root / f"data_batch_{i}.bin") for i in range(1, 6)],
            "val": [str(root / "test_batch.bin")],
        }
    return None


def set5_dir() -> Path | None:
    root = data_root() / "Set5"
    if root.is_dir():
        return root
    return None


def require_dataset(value, name: str):
    if value is None:
        pytest.skip(
            f"{name} not found under {data_root()} "
            "(set BTNN_DATA_DIR to a directory holding it)"
        )
    return value


# ---------------------------------------------------------------------------
# synthetic data


def blob_set(n: int, seed: int = 0) -> LabeledImageSet:
    """Two linearly separable intensity classes as 2x2 gray images."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    means = np.where(labels == 0, 60.0, 180.0)
    images = rng.normal(means[:, None, None, None], 15.0, size=(n, 1, 2, 2))
    images = np.clip(images, 0, 255).astype(np.uint8)
    return LabeledImageSet(images, labels.astype(np.int64), 2)


def _draw_pattern(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    c = size // 2
    if cls == 0:  # horizontal bar
        row = rng.integers(2, size - 4)
        img[row : row + 3, 2 : size - 2] = 1.0
    elif cls == 1:  # vertical bar
        col = rng.integers(2, size - 4)
        img[2 : size - 2, col : col + 3] = 1.0
    elif cls == 2:  # filled disc
        cy, cx = rng.integers(size // 3, 2 * size // 3, size=2)
        r = rng.integers(size // 6, size // 4)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0
    elif cls == 3:  # ring
        cy, cx = rng.integers(size // 3, 2 * size // 3, size=2)
        r = rng.integers(size // 5, size // 3)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        img[(d2 <= r * r) & (d2 >= (r - 2) ** 2)] = 1.0
    elif cls == 4:  # checkerboard
        cell = max(2, size // 7)
        phase = rng.integers(0, 2)
        img[((yy // cell + xx // cell) % 2) == phase] = 1.0
    elif cls == 5:  # diagonal stripe
        off = rng.integers(-size // 3, size // 3)
        img[np.abs(yy - xx - off) <= 2] = 1.0
    elif cls == 6:  # cross
        img[c - 1 : c + 2, :] = 1.0
        img[:, c - 1 : c + 2] = 1.0
    elif cls == 7:  # square outline
        t = rng.integers(2, size // 3)
        img[t, t : size - t] = img[size - t - 1, t : size - t] = 1.0
        img[t : size - t, t] = img[t : size - t, size - t - 1] = 1.0
    elif cls == 8:  # horizontal grating
        freq = 2 + rng.integers(0, 2)
        img = 0.5 + 0.5 * np.sin(2 * np.pi * freq * yy / size + rng.uniform(0, 6.28))
    else:  # vertical grating
        freq = 2 + rng.integers(0, 2)
        img = 0.5 + 0.5 * np.sin(2 * np.pi * freq * xx / size + rng.uniform(0, 6.28))
    return img


def shapes_set(n_per_class: int, size: int = 28, classes: int = 10, seed: int = 0) -> LabeledImageSet:
    """Procedural multi-class image set: one drawing primitive per class."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in range(classes):
        for _ in range(n_per_class):
            img = _draw_pattern(cls, size, rng)
            img = 40.0 + 170.0 * img + rng.normal(0, 12.0, img.shape)
            images.append(np.clip(img, 0, 255).astype(np.uint8))
            labels.append(cls)
    order = rng.permutation(len(images))
    images = np.stack(images)[order][:, np.newaxis]
    labels = np.array(labels, dtype=np.int64)[order]
    return LabeledImageSet(images, labels, classes)


def synthetic_photo(h: int, w: int, seed: int = 0) -> np.ndarray:
    """Smooth band-limited gray image with a few soft edges, in uint8."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(6):
        u, v = rng.uniform(-6, 6, size=2)
        img += rng.uniform(0.2, 1.0) * np.cos(
            2 * np.pi * (u * yy / h + v * xx / w) + rng.uniform(0, 6.28)
        )
    for _ in range(3):  # soft rectangles add edge content
        y0, x0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
        hh, ww = rng.integers(h // 6, h // 2), rng.integers(w // 6, w // 2)
        img[y0 : y0 + hh, x0 : x0 + ww] += rng.uniform(0.5, 1.2)
    img -= img.min()
    img /= img.max()
    return np.round(255 * (0.1 + 0.8 * img)).astype(np.uint8)
