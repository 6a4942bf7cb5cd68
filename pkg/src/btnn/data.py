"""Dataset ingestion, augmentation, and image utilities.

Covers the two experiment families: labeled image sets for classification
(IDX and CIFAR-10 binary formats, decoded by hand and checked against their
format magic) and luminance patch pairs for super-resolution / denoising
(image folders via Pillow, BT.601 luma, Catmull-Rom bicubic resampling).
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IDX_DTYPE_UINT8 = 0x08
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixels

# BT.601 luma coefficients
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class LabeledImageSet:
    """Images as N x C x H x W uint8 with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ValueError("images must be uint8 with shape (N, C, H, W)")
        if len(self.labels) != len(self.images) or len(self.images) == 0:
            raise ValueError("need one label per image and at least one image")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError("label out of range for class_count")

    def __len__(self) -> int:
        return len(self.images)

    def save(self, path) -> None:
        np.savez(
            path,
            images=self.images,
            labels=self.labels,
            class_count=np.int64(self.class_count),
        )

    @classmethod
    def load(cls, path) -> "LabeledImageSet":
        with np.load(path) as z:
            return cls(z["images"], z["labels"], int(z["class_count"]))


@dataclass
class PatchPairSet:
    """Input/target luminance patch pairs in [0, 1] float32."""

    inputs: np.ndarray
    targets: np.ndarray
    degradation: str

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must be paired")

    def __len__(self) -> int:
        return len(self.inputs)

    def save(self, path) -> None:
        np.savez(
            path,
            inputs=self.inputs,
            targets=self.targets,
            degradation=np.bytes_(self.degradation.encode()),
        )

    @classmethod
    def load(cls, path) -> "PatchPairSet":
        with np.load(path) as z:
            return cls(z["inputs"], z["targets"], bytes(z["degradation"]).decode())


@dataclass(frozen=True)
class AugmentPolicy:
    """Pad-then-random-crop and cutout settings; zeros disable a step."""

    random_crop_pad: int = 0
    cutout: int = 0
    enabled: bool = True
    seed: int | None = None


# ---------------------------------------------------------------------------
# loaders


def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        header = fh.read(4)
        if len(header) < 4 or header[0] != 0 or header[1] != 0:
            raise ValueError(f"{path}: bad IDX magic")
        dtype_code, ndim = header[2], header[3]
        if dtype_code != IDX_DTYPE_UINT8:
            raise ValueError(f"{path}: unsupported IDX dtype code 0x{dtype_code:02x}")
        dims_raw = fh.read(4 * ndim)
        if len(dims_raw) != 4 * ndim:
            raise ValueError(f"{path}: truncated IDX header")
        dims = struct.unpack(f">{ndim}I", dims_raw)
        count = int(np.prod(dims))
        data = fh.read(count)
        if len(data) != count:
            raise ValueError(f"{path}: truncated IDX data")
        return np.frombuffer(data, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None, class_count: int | None = None) -> LabeledImageSet:
    """Load an IDX image file plus its companion label file.

    When ``labels_path`` is omitted it is derived by the conventional
    ``images-idx3`` -> ``labels-idx1`` renaming.
    """
    images_path = Path(images_path)
    if labels_path is None:
        derived = str(images_path).replace("images", "labels").replace("idx3", "idx1")
        labels_path = Path(derived)
        if not labels_path.exists():
            raise FileNotFoundError(
                f"cannot derive labels file for {images_path}; pass labels_path"
            )
    images = _read_idx(images_path)
    labels = _read_idx(Path(labels_path))
    if images.ndim == 3:
        images = images[:, np.newaxis]
    if images.ndim != 4:
        raise ValueError(f"{images_path}: expected 3-D or 4-D image data")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected 1-D label data")
    n_classes = class_count if class_count is not None else int(labels.max()) + 1
    return LabeledImageSet(images, labels.astype(np.int64), n_classes)


def load_cifar_binary(paths) -> LabeledImageSet:
    """Load one or more CIFAR-10 binary batch files (3073-byte records)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    all_images, all_labels = [], []
    for path in map(Path, paths):
        raw = path.read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise ValueError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES};"
                " truncated or not CIFAR-10 binary"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max() > 9:
            raise ValueError(f"{path}: label out of range, not a CIFAR-10 batch")
        all_labels.append(labels.astype(np.int64))
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    return LabeledImageSet(
        np.concatenate(all_images), np.concatenate(all_labels), 10
    )


def load_image_dir(path, extensions=(".png", ".bmp", ".jpg", ".jpeg")) -> list[np.ndarray]:
    """Decode every image in a directory, sorted by filename."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in extensions)
    if not files:
        raise FileNotFoundError(f"no images with {extensions} under {path}")
    out = []
    for f in files:
        with Image.open(f) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            out.append(np.asarray(im))
    return out


# ---------------------------------------------------------------------------
# augmentation


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Pad + random crop back to size, then one square cutout hole per image.

    Operates on uint8 (N, C, H, W) batches; deterministic given ``rng``.
    """
    if not policy.enabled or (policy.random_crop_pad == 0 and policy.cutout == 0):
        return batch
    n, c, h, w = batch.shape
    out = batch
    if policy.random_crop_pad > 0:
        p = policy.random_crop_pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.empty_like(batch)
        tops = rng.integers(0, 2 * p + 1, size=n)
        lefts = rng.integers(0, 2 * p + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, tops[i] : tops[i] + h, lefts[i] : lefts[i] + w]
    if policy.cutout > 0:
        hole = policy.cutout
        if hole >= min(h, w):
            raise ValueError(f"cutout hole {hole} must be smaller than image {h}x{w}")
        if out is batch:
            out = batch.copy()
        tops = rng.integers(0, h - hole + 1, size=n)
        lefts = rng.integers(0, w - hole + 1, size=n)
        for i in range(n):
            out[i, :, tops[i] : tops[i] + hole, lefts[i] : lefts[i] + hole] = 0
    return out


# ---------------------------------------------------------------------------
# color space and metrics


def rgb_to_y(img) -> np.ndarray:
    """BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B (last axis is RGB).

    Grayscale input passes through unchanged (as float32).
    """
    img = np.asarray(img)
    if img.ndim >= 1 and img.shape[-1] == 3:
        return (img.astype(np.float64) @ _LUMA).astype(np.float32)
    return img.astype(np.float32)


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("psnr of empty arrays")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# bicubic resampling (Catmull-Rom, a = -0.5), separable with edge clamping


def _cubic(t: np.ndarray) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = 1.5 * t3 - 2.5 * t2 + 1.0
    far = -0.5 * t3 + 2.5 * t2 - 4.0 * t + 2.0
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bicubic resampling operator as an (n_out, n_in) matrix.

    Uses half-pixel center alignment.  When shrinking, the kernel is widened
    by the inverse scale (antialiasing), matching the common convention of
    reference resizers.  Out-of-range taps clamp to the edge samples.
    """
    ratio = n_out / n_in
    span = max(1.0, 1.0 / ratio)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    radius = 2.0 * span
    for i in range(n_out):
        u = (i + 0.5) / ratio - 0.5
        k0 = int(np.ceil(u - radius))
        taps = np.arange(k0, int(np.floor(u + radius)) + 1)
        w = _cubic((u - taps) / span)
        w /= w.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), w)
    return m


def resize_bicubic(img, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of the last two axes."""
    img = np.asarray(img)
    h, w = img.shape[-2], img.shape[-1]
    mh = resize_matrix(h, out_h)
    mw = resize_matrix(w, out_w)
    out = mh @ img.astype(np.float64) @ mw.T
    return out.astype(np.float64 if img.dtype == np.float64 else np.float32)


def modcrop(img, scale: int) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[-2], img.shape[-1]
    return img[..., : (h // scale) * scale, : (w // scale) * scale]


def downscale_bicubic(img, scale: int) -> np.ndarray:
    img = modcrop(img, scale)
    return resize_bicubic(img, img.shape[-2] // scale, img.shape[-1] // scale)


def upscale_bicubic(img, scale: int) -> np.ndarray:
    img = np.asarray(img)
    return resize_bicubic(img, img.shape[-2] * scale, img.shape[-1] * scale)


# ---------------------------------------------------------------------------
# patch pair construction


def _normalized_luma(img) -> np.ndarray:
    y = rgb_to_y(img)
    if np.issubdtype(np.asarray(img).dtype, np.integer):
        y = y / np.float32(255.0)
    return y.astype(np.float32)


def _patch_origins(size: int, patch: int, stride: int) -> range:
    if patch > size:
        raise ValueError(f"patch {patch} larger than image extent {size}")
    return range(0, size - patch + 1, stride)


def make_sr_pairs(images, scale: int, patch: int = 24, stride: int = 14) -> PatchPairSet:
    """Bicubic-downscaled inputs paired with original luminance targets.

    ``patch``/``stride`` define a deterministic grid on the low-res image;
    the target patch is the aligned high-res region (``patch * scale``).
    """
    if scale not in (2, 3, 4):
        raise ValueError(f"super-resolution scale must be 2, 3 or 4, got {scale}")
    inputs, targets = [], []
    for img in images:
        hr = modcrop(_normalized_luma(img), scale)
        lr = downscale_bicubic(hr, scale).astype(np.float32)
        for top in _patch_origins(lr.shape[0], patch, stride):
            for left in _patch_origins(lr.shape[1], patch, stride):
                inputs.append(lr[top : top + patch, left : left + patch])
                ht, hl = top * scale, left * scale
                targets.append(
                    hr[ht : ht + patch * scale, hl : hl + patch * scale]
                )
    return PatchPairSet(
        np.stack(inputs)[:, np.newaxis],
        np.stack(targets)[:, np.newaxis],
        degradation=f"downscale{scale}",
    )


def make_noise_pairs(
    images, sigma: float, patch: int = 24, stride: int = 14, rng: np.random.Generator | None = None
) -> PatchPairSet:
    """Gaussian-noise-corrupted inputs paired with clean luminance targets."""
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"noise sigma must lie in (0, 1), got {sigma}")
    if rng is None:
        rng = np.random.default_rng(0)
    inputs, targets = [], []
    for img in images:
        clean = _normalized_luma(img)
        noisy = np.clip(clean + rng.normal(0.0, sigma, clean.shape), 0.0, 1.0).astype(
            np.float32
        )
        for top in _patch_origins(clean.shape[0], patch, stride):
            for left in _patch_origins(clean.shape[1], patch, stride):
                inputs.append(noisy[top : top + patch, left : left + patch])
                targets.append(clean[top : top + patch, left : left + patch])
    return PatchPairSet(
        np.stack(inputs)[:, np.newaxis],
        np.stack(targets)[:, np.newaxis],
        degradation=f"noise{sigma}",
    )
