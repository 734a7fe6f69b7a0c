"""Coordinate network: Fourier features, SIREN MLP and Adam.

The SIREN weights live in one flat vector; per-layer matrices are views into
it, so optimizers, priors and posteriors all work on plain 1-D arrays.
Layer ``l`` computes ``h_{l+1} = sin(omega_l * (h_l @ W_l + b_l))`` with
``omega_0 = omega0`` and ``omega_l = 1`` afterwards; the last layer is affine.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "FourierEmbedding",
    "SirenArch",
    "SirenParams",
    "Tape",
    "AdamState",
    "embed",
    "init_siren",
    "siren_forward",
    "siren_backward",
    "adam_step",
    "save_weights",
    "load_weights",
    "save_embedding",
    "load_embedding",
]


@dataclass(frozen=True)
class FourierEmbedding:
    """Random Fourier features ``[cos(2 pi B c), sin(2 pi B c)]``."""

    B: np.ndarray  # (num_frequencies, 2)
    scale: float

    def __post_init__(self):
        B = np.array(self.B, dtype=np.float64)
        if B.ndim != 2 or B.shape[1] != 2 or B.shape[0] < 1:
            raise ValueError(f"frequency matrix must be (F, 2), got {B.shape}")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)

    @classmethod
    def create(cls, num_frequencies: int, scale: float, rng: np.random.Generator):
        return cls(rng.normal(0.0, scale, size=(num_frequencies, 2)), float(scale))

    @property
    def num_frequencies(self) -> int:
        return self.B.shape[0]

    @property
    def dim(self) -> int:
        return 2 * self.B.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, FourierEmbedding)
            and self.scale == other.scale
            and np.array_equal(self.B, other.B)
        )

    def __hash__(self):
        return hash((self.scale, self.B.tobytes()))


def embed(coords: np.ndarray, emb: FourierEmbedding, dtype=np.float64) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"coords must be (N, 2), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise ValueError("coords contain non-finite values")
    proj = 2.0 * np.pi * coords @ emb.B.T
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=1).astype(dtype)


@dataclass(frozen=True)
class SirenArch:
    """``depth`` counts linear layers, so ``depth=2`` has one hidden layer."""

    in_dim: int
    width: int = 64
    depth: int = 4
    out_dim: int = 1
    omega0: float = 30.0

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"invalid architecture {self}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        if self.depth == 1:
            return [(self.in_dim, self.out_dim)]
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def size(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def omegas(self) -> list[float]:
        return [self.omega0] + [1.0] * (self.depth - 2)

    def views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if flat.ndim != 1 or flat.size != self.size:
            raise ValueError(f"weight vector length {flat.size} != architecture size {self.size}")
        out, k = [], 0
        for i, o in self.layer_shapes():
            W = flat[k : k + i * o].reshape(i, o)
            k += i * o
            b = flat[k : k + o]
            k += o
            out.append((W, b))
        return out


@dataclass
class SirenParams:
    arch: SirenArch
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.layers = self.arch.views(self.values)

    def flatten(self) -> np.ndarray:
        return self.values.copy()

    @classmethod
    def unflatten(cls, arch: SirenArch, flat: np.ndarray) -> "SirenParams":
        return cls(arch, np.array(flat))

    def with_values(self, values: np.ndarray) -> "SirenParams":
        return SirenParams(self.arch, values)


def init_siren(arch: SirenArch, rng: np.random.Generator, dtype=np.float64,
               out_scale: float = 1.0) -> SirenParams:
    """SIREN initialization: first layer ``U(-1/d, 1/d)``, later layers
    ``U(-sqrt(6/fan_in)/omega, sqrt(6/fan_in)/omega)`` with the layer's own omega.

    ``out_scale`` shrinks the final affine layer so the initial image is close
    to zero instead of unit-variance noise.
    """
    flat = np.empty(arch.size)
    params = SirenParams(arch, flat)
    omegas = arch.omegas() + [1.0]
    for l, (W, b) in enumerate(params.layers):
        fan_in = W.shape[0]
        if l == 0 and arch.depth > 1:
            bound = 1.0 / fan_in
        else:
            bound = math.sqrt(6.0 / fan_in) / omegas[l]
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    W[...] *= out_scale
    b[...] *= out_scale
    return SirenParams(arch, flat.astype(dtype))


@dataclass
class Tape:
    """Activations retained by :func:`siren_forward` for the backward pass."""

    inputs: list  # input to each layer
    phases: list  # omega * (h W + b) for each hidden layer
    weights: np.ndarray  # snapshot used to detect stale tapes


def siren_forward(params: SirenParams, features: np.ndarray, keep_tape: bool = True):
    """Evaluate the network on ``features`` (N, in_dim).

    Returns ``(out, tape)`` where ``out`` is (N,) for a scalar head and
    (N, out_dim) otherwise.
    """
    arch = params.arch
    if features.ndim != 2 or features.shape[1] != arch.in_dim:
        raise ValueError(f"features must be (N, {arch.in_dim}), got {features.shape}")
    h = features
    inputs, phases = [], []
    omegas = arch.omegas()
    for l, (W, b) in enumerate(params.layers[:-1]):
        if keep_tape:
            inputs.append(h)
        z = h @ W
        z += b
        if omegas[l] != 1.0:
            z *= omegas[l]
        if keep_tape:
            phases.append(z)
        h = np.sin(z)
    W, b = params.layers[-1]
    if keep_tape:
        inputs.append(h)
    out = h @ W + b
    if arch.out_dim == 1:
        out = out[:, 0]
    tape = Tape(inputs, phases, params.values.copy()) if keep_tape else None
    return out, tape


def siren_backward(
    params: SirenParams, tape: Tape, output_grads: np.ndarray, input_grad: bool = False
):
    """Gradient of ``sum(output_grads * out)`` with respect to the flat weights.

    With ``input_grad=True`` also returns the gradient with respect to the
    input features, as ``(weight_grad, feature_grad)``.
    """
    if tape is None or not np.array_equal(tape.weights, params.values):
        raise ValueError("stale tape: weights changed since the forward pass")
    arch = params.arch
    g = np.asarray(output_grads, dtype=params.values.dtype)
    if g.ndim == 1:
        g = g[:, None]
    grad = np.zeros_like(params.values)
    gviews = arch.views(grad)
    omegas = arch.omegas()

    delta = g
    for l in range(arch.depth - 1, -1, -1):
        W, _ = params.layers[l]
        gW, gb = gviews[l]
        if l < arch.depth - 1:
            z = tape.phases[l]
            delta = delta * np.cos(z)
            if omegas[l] != 1.0:
                delta *= omegas[l]
        np.matmul(tape.inputs[l].T, delta, out=gW)
        gb[...] = delta.sum(axis=0)
        if l > 0 or input_grad:
            delta = delta @ W.T
    if input_grad:
        return grad, delta
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=np.float64, **kw) -> "AdamState":
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are left untouched.  A step with non-finite gradients is skipped
    and counted in ``state.skipped``.
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    if not np.all(np.isfinite(grads)):
        logger.warning("non-finite gradient at Adam step %d; step skipped", state.step + 1)
        return params, replace(state, skipped=state.skipped + 1)
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new.astype(params.dtype, copy=False), replace(state, m=m, v=v, step=t)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_WMAGIC = b"SIRW"
_EMAGIC = b"FFEM"


def save_weights(arch: SirenArch, values: np.ndarray, path) -> None:
    """Header: magic, uint32 in_dim/width/depth/out_dim, float64 omega0, uint32 P;
    payload: little-endian float32 weights."""
    values = np.asarray(values)
    if values.size != arch.size:
        raise ValueError("weight vector does not match architecture")
    header = _WMAGIC + struct.pack(
        "<IIIIdI", arch.in_dim, arch.width, arch.depth, arch.out_dim, arch.omega0, arch.size
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.astype("<f4").tobytes())


def load_weights(path) -> tuple[SirenArch, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _WMAGIC:
        raise ValueError(f"{path}: not a weight file")
    hsize = 4 + struct.calcsize("<IIIIdI")
    in_dim, width, depth, out_dim, omega0, n = struct.unpack("<IIIIdI", raw[4:hsize])
    arch = SirenArch(in_dim, width, depth, out_dim, omega0)
    values = np.frombuffer(raw[hsize:], dtype="<f4")
    if values.size != n or n != arch.size:
        raise ValueError(f"{path}: payload length does not match header")
    return arch, values.astype(np.float32)


def save_embedding(emb: FourierEmbedding, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_EMAGIC + struct.pack("<Id", emb.num_frequencies, emb.scale))
        fh.write(emb.B.astype("<f8").tobytes())


def load_embedding(path) -> FourierEmbedding:
    raw = Path(path).read_bytes()
    if raw[:4] != _EMAGIC:
        raise ValueError(f"{path}: not an embedding file")
    f, scale = struct.unpack("<Id", raw[4:16])
    B = np.frombuffer(raw[16:], dtype="<f8").reshape(f, 2)
    return FourierEmbedding(B, scale)
