"""Eval-phase helpers: whole-image denoising and dataset evaluation."""

from __future__ import annotations

import numpy as np

from .data import NoiseSpec, add_awgn, list_images, load_image_channels, quantize
from .metrics import MetricReport, mse, psnr
from .model import model_forward
from .tensor import Tensor

PIXEL_MAX = 255.0


def denoise_array(params, config, image):
    """Denoise one (C, H, W) image in [0, 255]; returns real values
    (not quantized) in the same scale. Works for any H, W since every
    layer preserves spatial size."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != config.image_channels:
        raise ValueError(
            f"expected ({config.image_channels}, H, W) input, got {image.shape}"
        )
    x = Tensor(image[None] / np.float32(PIXEL_MAX))
    _, final = model_forward(params, config, x, "eval")
    return final.data[0] * np.float32(PIXEL_MAX)


def evaluate_dataset(params, config, dataset_dir, sigma, seed, clip=True,
                     quantized=False):
    """Synthesize a noisy copy of each dataset image, denoise it, and
    report per-image MSE/PSNR plus the arithmetic-mean PSNR.

    The per-image noise seed is seed XOR image-index, so reports are
    reproducible and order-independent.
    """
    rows = []
    for idx, path in enumerate(list_images(dataset_dir)):
        clean = load_image_channels(path, config.image_channels)
        pair = add_awgn(clean, NoiseSpec(sigma, clip=clip, seed=seed ^ idx))
        out = denoise_array(params, config, pair.noisy)
        if quantized:
            out = quantize(out)
        rows.append((str(path), mse(out, clean), psnr(out, clean)))
    return MetricReport(rows=rows)
