"""Classical reconstruction: filtered back projection and SIRT."""
from __future__ import annotations

import logging
import math
from enum import Enum

import numpy as np

from .geometry import GridSpec, ImageGrid, ProjectionGeometry, Sinogram, projection_operator

logger = logging.getLogger(__name__)

__all__ = ["FbpFilter", "fbp", "ramp_filter", "sirt"]


class FbpFilter(str, Enum):
    RAM_LAK = "ram-lak"
    HANN = "hann"


def _padded_length(n: int) -> int:
    return 1 << max(1, math.ceil(math.log2(2 * n)))


def ramp_filter(n_det: int, spacing: float, kind: FbpFilter = FbpFilter.RAM_LAK) -> np.ndarray:
    """Frequency response of the band-limited ramp on the padded detector row.

    Built from the spatial ramp kernel, so the zero-frequency response is not
    forced to zero.  Returns a real, even array of the padded length.
    """
    n = _padded_length(n_det)
    k = np.arange(n)
    k = np.where(k <= n // 2, k, k - n)  # signed lag
    h = np.zeros(n)
    h[k == 0] = 1.0 / (4.0 * spacing**2)
    odd = (k % 2) == 1
    h[odd] = -1.0 / (math.pi * k[odd] * spacing) ** 2
    resp = np.real(np.fft.fft(h)) * spacing
    if FbpFilter(kind) is FbpFilter.HANN:
        f = np.fft.fftfreq(n)
        resp *= 0.5 * (1.0 + np.cos(2.0 * math.pi * f))
    return resp


def fbp(sino: Sinogram, geom: ProjectionGeometry, grid: GridSpec,
        filter: FbpFilter = FbpFilter.RAM_LAK) -> ImageGrid:
    """Filtered back projection.

    Each detector row is zero-padded to the next power of two at least twice
    its length, ramp-filtered in frequency, back-projected and scaled by
    ``pi / n_angles`` (a full 360 degree arc counts every line twice, so
    the same factor applies).
    """
    if geom.n_angles < 2:
        raise ValueError("FBP needs at least two angles")
    y = np.asarray(sino.values, dtype=np.float64)
    if y.shape != (geom.n_angles, geom.detector_count):
        raise ValueError(f"sinogram shape {y.shape} does not match geometry")
    resp = ramp_filter(geom.detector_count, geom.detector_spacing, filter)
    n = resp.size
    q = np.real(np.fft.ifft(np.fft.fft(y, n=n, axis=1) * resp, axis=1))[:, : geom.detector_count]
    _, at = projection_operator(geom, grid, np.float64)
    # A^T spreads a detector value with total weight spacing^2 / detector spacing per angle
    norm = grid.spacing**2 / geom.detector_spacing
    img = (at @ q.ravel()) * (math.pi / geom.n_angles) / norm
    return ImageGrid(img.reshape(grid.side, grid.side), grid.spacing)


def _safe_inverse(v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v)
    nz = v > 0
    out[nz] = 1.0 / v[nz]
    return out


def sirt(sino: Sinogram, geom: ProjectionGeometry, grid: GridSpec, iterations: int = 500,
         nonneg: bool = True, x0: np.ndarray | None = None,
         residuals: list | None = None) -> ImageGrid:
    """SIRT with unit relaxation: ``x <- x + C A^T R (y - A x)``.

    ``R`` and ``C`` are the inverse row and column sums of ``A`` (zero where a
    sum vanishes).  When ``residuals`` is a list, ``||y - A x||`` is appended
    for the initial and every updated iterate.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    a, at = projection_operator(geom, grid, np.float64)
    y = np.asarray(sino.values, dtype=np.float64).ravel()
    if y.size != a.shape[0]:
        raise ValueError("sinogram does not match geometry")
    R = _safe_inverse(np.asarray(a.sum(axis=1)).ravel())
    C = _safe_inverse(np.asarray(a.sum(axis=0)).ravel())
    x = np.zeros(grid.size) if x0 is None else np.array(x0, dtype=np.float64).ravel()
    r = y - a @ x
    if residuals is not None:
        residuals.append(float(np.linalg.norm(r)))
    for _ in range(iterations):
        x += C * (at @ (R * r))
        if nonneg:
            np.maximum(x, 0.0, out=x)
        r = y - a @ x
        if residuals is not None:
            residuals.append(float(np.linalg.norm(r)))
    return ImageGrid(x.reshape(grid.side, grid.side), grid.spacing)
