"""Image I/O, augmentation, and synthetic noisy-sample generation.

Pixel data is float32 in [0, 255] throughout, shaped (C, H, W) with C of
1 or 3. Noisy samples carry additive white Gaussian noise of a chosen
standard deviation; with clipping on, noisy values are clamped to
[0, 255] and the stored noise is recomputed as noisy - clean so the
decomposition stays exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".pgm", ".ppm", ".bmp", ".jpg", ".jpeg")
MANIFEST_NAME = "manifest.txt"

FLIP_MODES = ("none", "horizontal", "vertical", "both")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise description (pixel units)."""

    sigma_delta: float
    clip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.sigma_delta < 0:
            raise ValueError("sigma_delta must be >= 0")


@dataclass
class SamplePair:
    """A clean image, its noisy counterpart, and noise == noisy - clean."""

    clean: np.ndarray
    noisy: np.ndarray
    noise: np.ndarray


def _from_pil(img):
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_image(path):
    """Read an 8-bit raster as float32 (C, H, W) in [0, 255]."""
    with Image.open(path) as img:
        if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise ValueError(f"{path}: unsupported bit depth (mode {img.mode})")
        if img.mode == "L":
            return _from_pil(img)
        if img.mode == "RGB":
            return _from_pil(img)
        return _from_pil(img.convert("RGB"))


def load_image_channels(path, channels):
    """Read an image forced to 1 (gray) or 3 (RGB) channels."""
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    with Image.open(path) as img:
        if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise ValueError(f"{path}: unsupported bit depth (mode {img.mode})")
        return _from_pil(img.convert("L" if channels == 1 else "RGB"))


def quantize(arr):
    """Clamp to [0, 255] and round half away from zero to integers."""
    return np.floor(np.clip(arr, 0.0, 255.0) + 0.5)


def save_image(arr, path):
    """Write (C, H, W) or (H, W) data as an 8-bit image file."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected (C, H, W) with C in {{1, 3}}, got {arr.shape}")
    data = quantize(arr).astype(np.uint8)
    if data.shape[0] == 1:
        img = Image.fromarray(data[0], mode="L")
    else:
        img = Image.fromarray(data.transpose(1, 2, 0), mode="RGB")
    img.save(path)


def random_crop(image, patch, rng):
    """Uniformly random patch x patch crop."""
    _, h, w = image.shape
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than patch {patch}")
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    return image[:, top:top + patch, left:left + patch]


def augment_flip(image, mode):
    """Reverse H and/or W axes; ``both`` equals a 180-degree rotation."""
    if mode not in FLIP_MODES:
        raise ValueError(f"mode must be one of {FLIP_MODES}, got {mode!r}")
    out = image
    if mode in ("horizontal", "both"):
        out = out[:, :, ::-1]
    if mode in ("vertical", "both"):
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def gaussian_kernel1d(sigma):
    """Normalized Gaussian taps with radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def _correlate1d_replicate(image, kernel, axis):
    radius = len(kernel) // 2
    pad = [(0, 0)] * image.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(image, pad, mode="edge")
    out = np.zeros_like(image)
    view = [slice(None)] * image.ndim
    for t, wt in enumerate(kernel):
        view[axis] = slice(t, t + image.shape[axis])
        out += wt * padded[tuple(view)]
    return out


def gaussian_blur(image, sigma):
    """Separable Gaussian blur with replicated borders; preserves DC."""
    k = gaussian_kernel1d(sigma)
    out = _correlate1d_replicate(image.astype(np.float32, copy=False), k, axis=1)
    return _correlate1d_replicate(out, k, axis=2)


def augment_blur(image, sigma_blur, probability, rng):
    """Blur with the given probability (jitter simulation), else identity."""
    if rng.random() >= probability:
        return image
    return gaussian_blur(image, sigma_blur)


def _synthesize(clean, sigma, clip, rng):
    g = rng.normal(0.0, sigma, clean.shape).astype(np.float32)
    noisy = clean + g
    if clip:
        noisy = np.clip(noisy, 0.0, 255.0)
    noise = noisy - clean
    return SamplePair(clean=clean, noisy=noisy, noise=noise)


def add_awgn(clean, spec):
    """Draw i.i.d. Gaussian noise onto a clean image.

    The stored noise field is noisy - clean, recomputed after any
    clipping, so the additive decomposition is exact by construction.
    """
    return _synthesize(clean, spec.sigma_delta,
                       spec.clip, np.random.default_rng(spec.seed))


def list_images(root):
    """Image paths under ``root``: the manifest's lines when one exists,
    otherwise all recognized raster files, sorted for determinism."""
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    manifest = root / MANIFEST_NAME
    if manifest.is_file():
        lines = [ln.strip() for ln in manifest.read_text().splitlines()]
        paths = [root / ln for ln in lines if ln]
    else:
        paths = sorted(
            (p for p in root.rglob("*")
             if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS),
            key=lambda p: p.relative_to(root).as_posix(),
        )
    if not paths:
        raise ValueError(f"no images found under {root}")
    return paths


def batch_iter(data_dir, config, noise, channels, seed):
    """Infinite stream of training batches.

    Batch k is a pure function of (seed, k): the per-batch generator is
    seeded with both, and image choice, crop corner, flip mode, blur
    draw, and noise draw are consumed in a fixed order. Each batch yields
    (noisy, clean, noise) arrays of shape (B, C, patch, patch). Images
    smaller than the patch are skipped at load time.
    """
    paths = list_images(data_dir)
    images = []
    for p in paths:
        img = load_image_channels(p, channels)
        if img.shape[1] >= config.patch and img.shape[2] >= config.patch:
            images.append(img)
    if not images:
        raise ValueError(
            f"no image under {data_dir} is at least {config.patch}px on both sides"
        )

    lo, hi = config.blur_sigma_range
    k = 0
    while True:
        rng = np.random.default_rng([seed, k])
        cleans = []
        noisys = []
        noises = []
        for _ in range(config.batch_size):
            img = images[int(rng.integers(len(images)))]
            patch = random_crop(img, config.patch, rng)
            if config.flip_enabled:
                patch = augment_flip(patch, FLIP_MODES[int(rng.integers(4))])
            if config.blur_prob > 0.0:
                sigma_blur = float(rng.uniform(lo, hi))
                patch = augment_blur(patch, sigma_blur, config.blur_prob, rng)
            patch = np.ascontiguousarray(patch, dtype=np.float32)
            pair = _synthesize(patch, noise.sigma_delta, noise.clip, rng)
            cleans.append(pair.clean)
            noisys.append(pair.noisy)
            noises.append(pair.noise)
        yield (np.stack(noisys), np.stack(cleans), np.stack(noises))
        k += 1
