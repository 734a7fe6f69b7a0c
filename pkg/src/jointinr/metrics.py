"""Image quality metrics and cross-node aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

__all__ = ["SsimConfig", "psnr", "ssim", "aggregate", "PSNR_IDENTICAL"]

# Returned by psnr() when the two images are identical.
PSNR_IDENTICAL = math.inf


def _values(img) -> np.ndarray:
    return np.asarray(getattr(img, "values", img), dtype=np.float64)


def psnr(a, b, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``b`` is the reference.

    ``data_range`` defaults to the reference maximum.  Identical inputs give
    :data:`PSNR_IDENTICAL` (``+inf``).
    """
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range is None:
        data_range = float(b.max())
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(data_range**2 / mse)


@dataclass(frozen=True)
class SsimConfig:
    window: int = 7
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float | None = None

    def kernel(self) -> np.ndarray:
        r = np.arange(self.window) - (self.window - 1) / 2.0
        k = np.exp(-0.5 * (r / self.sigma) ** 2)
        return k / k.sum()


def _blur(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable Gaussian window, keeping only fully covered positions
    pad = (k.size - 1) // 2
    y = correlate1d(correlate1d(x, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return y[pad : x.shape[0] - pad, pad : x.shape[1] - pad]


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean structural similarity under a Gaussian window; ``b`` is the reference."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < cfg.window:
        raise ValueError(f"images smaller than the {cfg.window}x{cfg.window} window")
    data_range = cfg.data_range if cfg.data_range is not None else float(b.max())
    if not data_range > 0:
        data_range = 1.0
    c1 = (cfg.k1 * data_range) ** 2
    c2 = (cfg.k2 * data_range) ** 2
    k = cfg.kernel()
    mu_a, mu_b = _blur(a, k), _blur(b, k)
    var_a = _blur(a * a, k) - mu_a**2
    var_b = _blur(b * b, k) - mu_b**2
    cov = _blur(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def aggregate(values) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n))."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("need at least one value")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))
