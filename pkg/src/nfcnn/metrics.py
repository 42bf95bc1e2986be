"""Image quality metrics: MSE and PSNR in dB, plus dataset reports."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def mse(a, b):
    """Mean squared difference over all elements."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.square(a.astype(np.float64) - b.astype(np.float64))))


def psnr(pred, ref, max_value=255.0):
    """10*log10(max^2 / MSE); identical images give inf."""
    m = mse(pred, ref)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10((max_value * max_value) / m)


@dataclass
class MetricReport:
    """Per-image rows (path, mse, psnr_db) and their PSNR mean."""

    rows: list[tuple[str, float, float]]

    @property
    def mean_psnr(self):
        if not self.rows:
            raise ValueError("empty report")
        return sum(r[2] for r in self.rows) / len(self.rows)

    def lines(self):
        out = [f"{path}\t{m:.6g}\t{p:.4f}" for path, m, p in self.rows]
        out.append(f"mean\t{self.mean_psnr:.4f}")
        return out
