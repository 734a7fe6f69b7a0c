"""Independent INR reconstruction and the pieces every INR trainer shares."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import GridSpec, ImageGrid, ProjectionGeometry, Sinogram, projection_operator
from .inr import (
    AdamState,
    FourierEmbedding,
    SirenArch,
    SirenParams,
    adam_step,
    embed,
    init_siren,
    siren_backward,
    siren_forward,
)
from .metrics import psnr, ssim

logger = logging.getLogger(__name__)

__all__ = [
    "NetSpec",
    "TrainConfig",
    "TraceRow",
    "ReconResult",
    "TrainingDiverged",
    "DataTerm",
    "build_network",
    "inr_render",
    "data_loss_and_grad",
    "train_single_inr",
    "write_trace_csv",
]


@dataclass(frozen=True)
class NetSpec:
    width: int = 32
    depth: int = 4
    omega0: float = 30.0
    num_frequencies: int = 32
    fourier_scale: float = 1.0
    out_scale: float = 0.01


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 25
    net: NetSpec = NetSpec()
    dtype: str = "float32"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


class TraceRow(NamedTuple):
    iteration: int
    loss: float
    psnr: float | None = None
    ssim: float | None = None


@dataclass
class ReconResult:
    image: ImageGrid
    weights: np.ndarray
    trace: list[TraceRow] = field(default_factory=list)
    diverged: bool = False

    @property
    def final_loss(self) -> float:
        return self.trace[-1].loss


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


def _rngs(seed: int):
    """Independent streams for the embedding, the initialization and sampling."""
    return [np.random.default_rng([seed, k]) for k in (1, 2, 3)]


def build_network(net: NetSpec, seed: int, out_dim: int = 1):
    """Embedding and architecture for ``net``, plus the seeded initial weights."""
    rng_emb, rng_init, _ = _rngs(seed)
    emb = FourierEmbedding.create(net.num_frequencies, net.fourier_scale, rng_emb)
    arch = SirenArch(emb.dim, net.width, net.depth, out_dim, net.omega0)
    return emb, arch, init_siren(arch, rng_init, out_scale=net.out_scale).values


class DataTerm:
    """``||A F_w(C) - y||^2`` for one node, with the features and operator cached."""

    def __init__(self, arch: SirenArch, emb: FourierEmbedding, geom: ProjectionGeometry,
                 sino: Sinogram, grid: GridSpec, dtype=np.float32):
        self.arch = arch
        self.grid = grid
        self.dtype = np.dtype(dtype)
        self.features = embed(grid.coordinates(), emb, self.dtype)
        self.A, self.At = projection_operator(geom, grid, self.dtype)
        self.y = np.asarray(sino.values, dtype=self.dtype).ravel()

    def render(self, w: np.ndarray) -> np.ndarray:
        out, _ = siren_forward(SirenParams(self.arch, w), self.features, keep_tape=False)
        return out.reshape(self.grid.side, self.grid.side)

    def evaluate(self, w: np.ndarray):
        """Returns ``(loss, grad, rendered image values)``."""
        params = SirenParams(self.arch, w)
        out, tape = siren_forward(params, self.features)
        resid = self.A @ out - self.y
        loss = float(np.dot(resid.astype(np.float64), resid))
        g_img = 2.0 * (self.At @ resid)
        grad = siren_backward(params, tape, g_img)
        return loss, grad, out.reshape(self.grid.side, self.grid.side)

    def loss(self, w: np.ndarray) -> float:
        out, _ = siren_forward(SirenParams(self.arch, w), self.features, keep_tape=False)
        resid = self.A @ out - self.y
        return float(np.dot(resid.astype(np.float64), resid))


def inr_render(weights, embedding: FourierEmbedding, grid: GridSpec) -> ImageGrid:
    """Evaluate the network at every pixel center of ``grid``."""
    feats = embed(grid.coordinates(), embedding, weights.values.dtype)
    out, _ = siren_forward(weights, feats, keep_tape=False)
    return ImageGrid(np.asarray(out, dtype=np.float64).reshape(grid.side, grid.side), grid.spacing)


def data_loss_and_grad(weights: SirenParams, embedding: FourierEmbedding,
                       geom: ProjectionGeometry, sino: Sinogram, grid: GridSpec):
    """Squared residual norm and its gradient with respect to the flat weights."""
    term = DataTerm(weights.arch, embedding, geom, sino, grid, weights.values.dtype)
    loss, grad, _ = term.evaluate(weights.values)
    if not math.isfinite(loss):
        raise TrainingDiverged("non-finite data loss")
    return loss, grad


def quality(img: np.ndarray, truth: ImageGrid | None):
    if truth is None:
        return None, None
    return psnr(img, truth), ssim(img, truth)


def train_single_inr(sino: Sinogram, geom: ProjectionGeometry, config: TrainConfig,
                     grid: GridSpec, truth: ImageGrid | None = None,
                     init: np.ndarray | None = None, emb: FourierEmbedding | None = None,
                     on_step=None) -> ReconResult:
    """Fit one INR to one sinogram with Adam.

    ``init``/``emb`` override the seeded initialization (used when adapting
    from a learned initialization).  ``on_step(iteration, weights)`` is called
    after every update.
    """
    dtype = np.dtype(config.dtype)
    emb0, arch, w0 = build_network(config.net, config.seed)
    emb = emb or emb0
    w = np.array(init if init is not None else w0, dtype=dtype)
    term = DataTerm(arch, emb, geom, sino, grid, dtype)
    state = AdamState.zeros(arch.size, dtype)
    trace = run_adam(term, w, state, config.iterations, config.lr, config.log_every,
                     truth, on_step=on_step)
    w, state, rows = trace
    image = ImageGrid(term.render(w).astype(np.float64), grid.spacing)
    return ReconResult(image, w, rows)


def run_adam(term: DataTerm, w, state, iterations, lr, log_every, truth,
             offset=0, rows=None, on_step=None, final_row=True):
    """Shared Adam loop.  Logs the loss at the pre-update weights of every
    ``log_every``-th iteration and a final row after the last update."""
    rows = [] if rows is None else rows
    for it in range(iterations):
        loss, grad, img = term.evaluate(w)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {offset + it}", rows)
        if log_every and (offset + it) % log_every == 0:
            rows.append(TraceRow(offset + it, loss, *quality(img, truth)))
        w, state = adam_step(state, w, grad, lr)
        if on_step is not None:
            on_step(offset + it, w)
    if final_row:
        img = term.render(w)
        rows.append(TraceRow(offset + iterations, term.loss(w), *quality(img, truth)))
    return w, state, rows


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "loss", "psnr", "ssim"])
        for r in trace:
            wr.writerow([r.iteration, repr(r.loss),
                         "" if r.psnr is None else repr(r.psnr),
                         "" if r.ssim is None else repr(r.ssim)])
