"""Parallel-beam geometry and the linear projector.

The image lives on a square grid whose pixel centers span ``[-1, 1]^2`` in
normalized units.  Rays are sampled every half pixel along their length and
the image is read with bilinear interpolation at each sample (zero outside
the grid).  The sampled operation is assembled once into a sparse matrix, so
back projection is the exact transpose of forward projection.

Array conventions
-----------------
* ``ImageGrid.values[i, j]``: row ``i`` runs along +y, column ``j`` along +x.
* ``Sinogram.values[a, d]``: one row per angle, one column per detector bin.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GridSpec",
    "ImageGrid",
    "ProjectionGeometry",
    "Sinogram",
    "forward_project",
    "back_project",
    "build_dense_operator",
    "projection_operator",
    "save_sinogram",
    "load_sinogram",
    "save_sinogram_csv",
]

STEP = 0.5  # ray sampling step, in pixels
DENSE_MAX_SIDE = 64
_MAGIC = b"SINO"


@dataclass(frozen=True)
class GridSpec:
    """Shape of the reconstruction grid.

    ``spacing`` is the physical pixel size.  The default maps the normalized
    ``[-1, 1]`` square onto physical units one to one.
    """

    side: int
    spacing: float | None = None

    def __post_init__(self):
        if int(self.side) != self.side or self.side < 1:
            raise ValueError(f"side must be a positive integer, got {self.side!r}")
        if self.spacing is None:
            object.__setattr__(self, "spacing", 2.0 / self.side)
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive, got {self.spacing!r}")

    @property
    def size(self) -> int:
        return self.side * self.side

    def pixel_centers(self) -> np.ndarray:
        """Normalized pixel-center coordinates along one axis."""
        n = self.side
        return -1.0 + (2.0 * np.arange(n) + 1.0) / n

    def coordinates(self) -> np.ndarray:
        """(side*side, 2) array of (x, y) pixel centers in row-major order."""
        c = self.pixel_centers()
        yy, xx = np.meshgrid(c, c, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class ImageGrid:
    values: np.ndarray
    spacing: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise ValueError(f"image must be a non-empty square array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image contains non-finite values")
        self.values = v
        if self.spacing is None:
            self.spacing = 2.0 / v.shape[0]
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")

    @property
    def side(self) -> int:
        return self.values.shape[0]

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.side, self.spacing)

    @classmethod
    def zeros(cls, spec: GridSpec, dtype=np.float64) -> "ImageGrid":
        return cls(np.zeros((spec.side, spec.side), dtype=dtype), spec.spacing)


@dataclass(frozen=True)
class ProjectionGeometry:
    """Parallel-beam acquisition: angle set and detector layout.

    ``detector_spacing`` is in the same physical units as ``GridSpec.spacing``.
    """

    angles: tuple[float, ...]
    detector_count: int
    detector_spacing: float
    arc_degrees: float = 180.0

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if not angles:
            raise ValueError("geometry needs at least one angle")
        if not all(math.isfinite(a) for a in angles):
            raise ValueError("angles must be finite")
        arc = math.radians(self.arc_degrees)
        if angles[0] < 0 or angles[-1] >= arc:
            raise ValueError(f"angles must lie in [0, {self.arc_degrees} deg)")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("angles must be strictly increasing")
        if int(self.detector_count) != self.detector_count or self.detector_count < 1:
            raise ValueError("detector_count must be a positive integer")
        if not self.detector_spacing > 0:
            raise ValueError("detector_spacing must be positive")

    @classmethod
    def parallel(
        cls,
        n_angles: int,
        grid: GridSpec,
        arc_degrees: float = 180.0,
        detector_count: int | None = None,
        detector_spacing: float | None = None,
    ) -> "ProjectionGeometry":
        """Equispaced angles over ``[0, arc)`` and a detector wide enough
        to cover the grid diagonal."""
        if n_angles < 1:
            raise ValueError("n_angles must be >= 1")
        angles = np.arange(n_angles) * math.radians(arc_degrees) / n_angles
        if detector_spacing is None:
            detector_spacing = grid.spacing
        if detector_count is None:
            width = grid.side * grid.spacing * math.sqrt(2.0)
            detector_count = int(math.ceil(width / detector_spacing)) + 1
        return cls(tuple(angles), detector_count, detector_spacing, arc_degrees)

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    @property
    def n_rays(self) -> int:
        return self.n_angles * self.detector_count

    def detector_positions(self) -> np.ndarray:
        d = np.arange(self.detector_count)
        return (d - (self.detector_count - 1) / 2.0) * self.detector_spacing


@dataclass
class Sinogram:
    values: np.ndarray
    geometry: ProjectionGeometry
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values)
        shape = (self.geometry.n_angles, self.geometry.detector_count)
        if v.shape != shape:
            if v.size == shape[0] * shape[1]:
                v = v.reshape(shape)
            else:
                raise ValueError(f"sinogram shape {v.shape} does not match geometry {shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("sinogram contains non-finite values")
        self.values = v


# ---------------------------------------------------------------------------
# Operator assembly
# ---------------------------------------------------------------------------


def _sample_offsets(side: int) -> np.ndarray:
    half = 0.5 * math.hypot(side, side) + 1.0
    k = int(math.ceil(half / STEP))
    return np.arange(-k, k + 1) * STEP


def _angle_block(theta: float, u_pix: np.ndarray, t: np.ndarray, side: int):
    """COO triplets for all rays at one angle (pixel units)."""
    c = (side - 1) / 2.0
    cos, sin = math.cos(theta), math.sin(theta)
    col = u_pix[:, None] * cos - t[None, :] * sin + c
    row = u_pix[:, None] * sin + t[None, :] * cos + c
    i0 = np.floor(row)
    j0 = np.floor(col)
    fr = row - i0
    fc = col - j0
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    ray = np.broadcast_to(np.arange(u_pix.size)[:, None], row.shape)

    rows, cols, vals = [], [], []
    for di, dj, w in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ii = i0 + di
        jj = j0 + dj
        ok = (ii >= 0) & (ii < side) & (jj >= 0) & (jj < side) & (w > 0)
        rows.append(ray[ok])
        cols.append(ii[ok] * side + jj[ok])
        vals.append(w[ok])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


@lru_cache(maxsize=32)
def _operator(geom: ProjectionGeometry, grid: GridSpec, dtype_name: str):
    side = grid.side
    u_pix = geom.detector_positions() / grid.spacing
    t = _sample_offsets(side)
    scale = STEP * grid.spacing
    blocks = []
    for theta in geom.angles:
        r, c, v = _angle_block(theta, u_pix, t, side)
        block = sp.csr_matrix(
            (v * scale, (r, c)), shape=(geom.detector_count, grid.size), dtype=np.float64
        )
        block.sum_duplicates()
        blocks.append(block)
    a = sp.vstack(blocks, format="csr").astype(np.dtype(dtype_name))
    a.sort_indices()
    at = a.T.tocsr()
    return a, at


def projection_operator(geom: ProjectionGeometry, grid: GridSpec, dtype=np.float64):
    """Cached sparse ``(A, A^T)`` pair in CSR format for this geometry."""
    return _operator(geom, grid, np.dtype(dtype).name)


def forward_project(image: ImageGrid, geom: ProjectionGeometry) -> Sinogram:
    """Line integrals of ``image`` along every ray of ``geom``."""
    v = image.values
    dtype = np.float32 if v.dtype == np.float32 else np.float64
    a, _ = projection_operator(geom, image.spec, dtype)
    return Sinogram(a @ v.ravel().astype(dtype, copy=False), geom)


def back_project(sino: Sinogram, geom: ProjectionGeometry, grid: GridSpec) -> ImageGrid:
    """Exact adjoint of :func:`forward_project`."""
    if sino.geometry != geom:
        raise ValueError("sinogram was not acquired with this geometry")
    v = sino.values
    dtype = np.float32 if v.dtype == np.float32 else np.float64
    _, at = projection_operator(geom, grid, dtype)
    out = at @ v.ravel().astype(dtype, copy=False)
    return ImageGrid(out.reshape(grid.side, grid.side), grid.spacing)


def build_dense_operator(geom: ProjectionGeometry, grid: GridSpec) -> np.ndarray:
    """Explicit ``(n_rays, side*side)`` matrix, built ray by ray with scalar code.

    Independent of the vectorized assembly used by the projector, so it can
    serve as a reference for it.  Only allowed for ``side <= 64``.
    """
    side = grid.side
    if side > DENSE_MAX_SIDE:
        raise ValueError(f"dense operator limited to side <= {DENSE_MAX_SIDE}, got {side}")
    c = (side - 1) / 2.0
    t = _sample_offsets(side)
    mat = np.zeros((geom.n_rays, side * side))
    scale = STEP * grid.spacing
    for a, theta in enumerate(geom.angles):
        cos, sin = math.cos(theta), math.sin(theta)
        for d, u in enumerate(geom.detector_positions()):
            u = u / grid.spacing
            r = a * geom.detector_count + d
            for tk in t:
                x = u * cos - tk * sin + c
                y = u * sin + tk * cos + c
                i = math.floor(y)
                j = math.floor(x)
                fy, fx = y - i, x - j
                for ii, jj, w in (
                    (i, j, (1 - fy) * (1 - fx)),
                    (i, j + 1, (1 - fy) * fx),
                    (i + 1, j, fy * (1 - fx)),
                    (i + 1, j + 1, fy * fx),
                ):
                    if 0 <= ii < side and 0 <= jj < side and w > 0:
                        mat[r, ii * side + jj] += w * scale
    return mat


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_sinogram(sino: Sinogram, path) -> None:
    """Binary layout: ``b"SINO"``, uint32 angle count, uint32 detector count,
    uint32 reserved (0), then little-endian float32 values row by row."""
    g = sino.geometry
    header = _MAGIC + struct.pack("<III", g.n_angles, g.detector_count, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(sino.values, dtype="<f4").tobytes())


def load_sinogram(path, geom: ProjectionGeometry) -> Sinogram:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a sinogram file")
    n_angles, n_det, _ = struct.unpack("<III", raw[4:16])
    if (n_angles, n_det) != (geom.n_angles, geom.detector_count):
        raise ValueError(
            f"{path}: header says {n_angles}x{n_det}, geometry expects "
            f"{geom.n_angles}x{geom.detector_count}"
        )
    values = np.frombuffer(raw[16:], dtype="<f4")
    if values.size != n_angles * n_det:
        raise ValueError(f"{path}: truncated payload")
    return Sinogram(values.astype(np.float64).reshape(n_angles, n_det), geom)


def save_sinogram_csv(sino: Sinogram, path) -> None:
    header = ",".join(["angle"] + [f"det{d}" for d in range(sino.geometry.detector_count)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for theta, row in zip(sino.geometry.angles, sino.values):
            fh.write(",".join([repr(theta)] + [repr(float(x)) for x in row]) + "\n")
