"""Synthetic data: phantom families, Beer-Lambert Poisson noise, grayscale I/O."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GridSpec, ImageGrid, Sinogram

logger = logging.getLogger(__name__)

__all__ = [
    "Ellipse",
    "PhantomFamilySpec",
    "NoiseSpec",
    "DEFAULT_ELLIPSES",
    "make_phantom_family",
    "render_ellipses",
    "disk_phantom",
    "poisson_counts",
    "apply_poisson_noise",
    "load_grayscale",
    "save_grayscale",
]


@dataclass(frozen=True)
class Ellipse:
    """An ellipse painted with a constant value; coordinates are normalized."""

    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float  # degrees, counter-clockwise
    intensity: float


# Shepp-Logan-like head: painted in order, later ellipses overwrite earlier ones.
DEFAULT_ELLIPSES = (
    Ellipse((0.0, 0.0), (0.70, 0.88), 0.0, 1.0),
    Ellipse((0.0, -0.02), (0.62, 0.80), 0.0, 0.25),
    Ellipse((0.22, 0.0), (0.11, 0.30), -18.0, 0.05),
    Ellipse((-0.22, 0.0), (0.16, 0.40), 18.0, 0.05),
    Ellipse((0.0, 0.35), (0.21, 0.25), 0.0, 0.6),
    Ellipse((0.0, -0.50), (0.12, 0.08), 0.0, 0.85),
)


@dataclass(frozen=True)
class PhantomFamilySpec:
    side: int = 64
    base_ellipses: tuple[Ellipse, ...] = DEFAULT_ELLIPSES
    jitter: float = 0.1
    count: int = 10
    seed: int = 0
    supersample: int = 3

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        for e in self.base_ellipses:
            if not 0.0 <= e.intensity <= 1.0:
                raise ValueError(f"ellipse intensity {e.intensity} outside [0, 1]")


def render_ellipses(ellipses, side: int, supersample: int = 3) -> ImageGrid:
    """Paint ellipses onto a ``side`` grid, averaging ``supersample**2``
    sub-pixel samples per pixel."""
    s = supersample
    n = side * s
    c = -1.0 + (2.0 * np.arange(n) + 1.0) / n
    yy, xx = np.meshgrid(c, c, indexing="ij")
    img = np.zeros((n, n))
    for e in ellipses:
        th = math.radians(e.angle)
        dx, dy = xx - e.center[0], yy - e.center[1]
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        inside = (u / e.axes[0]) ** 2 + (v / e.axes[1]) ** 2 <= 1.0
        img[inside] = e.intensity
    img = img.reshape(side, s, side, s).mean(axis=(1, 3))
    return ImageGrid(np.clip(img, 0.0, 1.0))


def _perturb(e: Ellipse, jitter: float, rng: np.random.Generator) -> Ellipse:
    z = rng.standard_normal(6)
    ax = (e.axes[0] * (1 + jitter * z[2]), e.axes[1] * (1 + jitter * z[3]))
    ax = tuple(float(np.clip(a, 0.01, 0.95)) for a in ax)
    center = (e.center[0] + jitter * z[0] * e.axes[0], e.center[1] + jitter * z[1] * e.axes[1])
    # keep the ellipse inside the field of view
    lim = max(0.0, 0.97 - max(ax))
    center = tuple(float(np.clip(c, -lim, lim)) for c in center)
    angle = e.angle + jitter * z[4] * 90.0
    intensity = float(np.clip(e.intensity * (1 + jitter * z[5]), 0.0, 1.0))
    return Ellipse(center, ax, angle, intensity)


def make_phantom_family(spec: PhantomFamilySpec) -> list[ImageGrid]:
    """Members are jittered copies of the base layout, each from its own sub-seed."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    members = []
    for child in children:
        rng = np.random.default_rng(child)
        ellipses = [_perturb(e, spec.jitter, rng) for e in spec.base_ellipses]
        members.append(render_ellipses(ellipses, spec.side, spec.supersample))
    return members


def disk_phantom(side: int, radius: float = 0.6, value: float = 1.0, supersample: int = 3):
    return render_ellipses([Ellipse((0.0, 0.0), (radius, radius), 0.0, value)], side, supersample)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """Beer-Lambert Poisson noise.

    The sinogram is first rescaled so that ``gamma_abs * max(y_scaled)`` equals
    ``max_attenuation``; ``None`` uses the sinogram as is.
    """

    photon_count: float = 5000.0
    gamma_abs: float = 0.5
    seed: int = 0
    max_attenuation: float | None = 4.0

    def __post_init__(self):
        if not self.photon_count > 0:
            raise ValueError("photon_count must be positive")
        if not 0 < self.gamma_abs <= 1:
            raise ValueError("gamma_abs must lie in (0, 1]")


@dataclass
class CountDraw:
    counts: np.ndarray  # clamped photon counts
    expected: np.ndarray  # Poisson means I0 * exp(-gamma * y_scaled)
    scale: float  # y_scaled = scale * y
    clamped: int


def poisson_counts(sino: Sinogram, spec: NoiseSpec) -> CountDraw:
    y = np.asarray(sino.values, dtype=np.float64)
    peak = float(np.max(np.abs(y)))
    if spec.max_attenuation is None or peak == 0.0:
        scale = 1.0
    else:
        scale = spec.max_attenuation / (spec.gamma_abs * peak)
    expected = spec.photon_count * np.exp(-spec.gamma_abs * scale * y)
    rng = np.random.default_rng(spec.seed)
    counts = rng.poisson(expected).astype(np.float64)
    zero = counts == 0
    clamped = int(zero.sum())
    counts[zero] = 1.0
    return CountDraw(counts, expected, scale, clamped)


def apply_poisson_noise(sino: Sinogram, spec: NoiseSpec) -> Sinogram:
    """Draw photon counts and map them back through the log transform.

    The returned sinogram is in the units of the input.  Zero-count bins are
    clamped to one count; the number clamped is logged and stored in
    ``meta["clamped"]``.
    """
    draw = poisson_counts(sino, spec)
    if draw.clamped:
        logger.warning("%d zero-count bins clamped to 1 photon", draw.clamped)
    y_scaled = -np.log(draw.counts / spec.photon_count) / spec.gamma_abs
    out = Sinogram(y_scaled / draw.scale, sino.geometry)
    out.meta.update(sino.meta)
    out.meta["clamped"] = draw.clamped
    return out


# ---------------------------------------------------------------------------
# Grayscale images
# ---------------------------------------------------------------------------


def _read_pgm(raw: bytes) -> np.ndarray:
    tokens, pos = [], 2
    while len(tokens) < 3:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    width, height, maxval = tokens
    pos += 1  # single whitespace before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float64) / maxval


def load_grayscale(path) -> ImageGrid:
    """Load an 8/16-bit grayscale PGM (P5) or PNG, mapped linearly to [0, 1].

    Non-square images are center-cropped with a warning.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P5":
        img = _read_pgm(raw)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
        if mode == "L":
            img = arr.astype(np.float64) / 255.0
        elif mode in ("I;16", "I;16B", "I"):
            img = arr.astype(np.float64) / 65535.0
        else:
            raise ValueError(f"{path}: unsupported PNG mode {mode!r} (grayscale only)")
    else:
        raise ValueError(f"{path}: unsupported format (expected PGM P5 or PNG)")
    h, w = img.shape
    if h != w:
        warnings.warn(f"{path}: {w}x{h} image center-cropped to square", stacklevel=2)
        n = min(h, w)
        top, left = (h - n) // 2, (w - n) // 2
        img = img[top : top + n, left : left + n]
    return ImageGrid(np.ascontiguousarray(img))


def save_grayscale(image, path, bits: int = 16, window: tuple[float, float] | None = None):
    """Write a PGM or PNG (chosen by suffix).

    Values are clipped to ``window`` (default ``(0, 1)``) and mapped linearly
    onto the integer range.
    """
    v = np.asarray(getattr(image, "values", image), dtype=np.float64)
    lo, hi = window if window is not None else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    maxval = 65535 if bits == 16 else 255
    q = np.rint(np.clip((v - lo) / (hi - lo), 0.0, 1.0) * maxval)
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        if bits == 16:
            Image.fromarray(q.astype(np.uint16)).save(path)
        else:
            Image.fromarray(q.astype(np.uint8), mode="L").save(path)
    else:
        dtype = ">u2" if bits == 16 else "u1"
        h, w = q.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
            fh.write(q.astype(dtype).tobytes())
