"""Joint baselines: FedAvg and first-order MAML initializations, and INRWild.

FedAvg and MAML learn a shared initialization ``theta`` from all nodes and
then adapt each node from it independently.  INRWild fits a shared static
network plus a small transient network per node, all at once.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridSpec, ImageGrid, projection_operator
from .inr import (
    AdamState,
    SirenArch,
    SirenParams,
    adam_step,
    embed,
    init_siren,
    siren_backward,
    siren_forward,
)
from .single import (
    DataTerm,
    NetSpec,
    ReconResult,
    TraceRow,
    TrainConfig,
    TrainingDiverged,
    build_network,
    quality,
    run_adam,
)
from .bayes import ordered_mean

logger = logging.getLogger(__name__)

__all__ = [
    "MetaConfig",
    "MetaResult",
    "WildConfig",
    "WildResult",
    "train_fedavg",
    "train_maml_first_order",
    "adapt_from_init",
    "train_inrwild",
]


@dataclass(frozen=True)
class MetaConfig:
    inner_steps: int = 100
    inner_lr: float = 1e-3
    outer_iterations: int = 10
    outer_lr: float = 1e-3
    adaptation_iterations: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 1 or self.outer_iterations < 0 or self.adaptation_iterations < 0:
            raise ValueError("invalid iteration counts")
        if not self.inner_lr > 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be positive")


@dataclass
class MetaResult:
    theta: np.ndarray
    results: list[ReconResult]
    diverged: list[int] = field(default_factory=list)


def _check_nodes(sinos, geoms, truths):
    if len(sinos) < 1 or len(sinos) != len(geoms):
        raise ValueError("need matching, non-empty sinogram and geometry lists")
    return truths if truths is not None else [None] * len(sinos)


def _adapt_all(terms, theta, states, cfg, train_cfg, truths, offset, traces, diverged):
    results = []
    for j, term in enumerate(terms):
        if j in diverged:
            img = term.render(theta)
            results.append(ReconResult(ImageGrid(img.astype(np.float64), term.grid.spacing),
                                       theta.copy(), traces[j], True))
            continue
        try:
            w, _, rows = run_adam(term, theta.copy(), states[j], cfg.adaptation_iterations,
                                  train_cfg.lr, train_cfg.log_every, truths[j], offset=offset,
                                  rows=traces[j])
        except TrainingDiverged as exc:
            logger.error("node %d diverged during adaptation: %s", j, exc)
            diverged.append(j)
            results.append(ReconResult(ImageGrid(term.render(theta).astype(np.float64),
                                                 term.grid.spacing), theta.copy(), exc.trace, True))
            continue
        results.append(ReconResult(ImageGrid(term.render(w).astype(np.float64), term.grid.spacing),
                                   w, rows))
    return results


def train_fedavg(sinos, geoms, cfg: MetaConfig, train_cfg: TrainConfig, grid: GridSpec,
                 truths=None) -> MetaResult:
    """Federated averaging followed by per-node adaptation.

    Each outer round runs ``inner_steps`` Adam steps per node from ``theta``
    and averages the results.  Every node keeps its own Adam moments for the
    whole run, so a single node follows exactly the SingleINR trajectory.
    Traces use the node's running iteration count.
    """
    truths = _check_nodes(sinos, geoms, truths)
    dt = np.dtype(train_cfg.dtype)
    emb, arch, w0 = build_network(train_cfg.net, train_cfg.seed)
    terms = [DataTerm(arch, emb, g, s, grid, dt) for s, g in zip(sinos, geoms)]
    theta = w0.astype(dt)
    states = [AdamState.zeros(arch.size, dt) for _ in terms]
    traces = [[] for _ in terms]
    diverged: list[int] = []
    K = cfg.inner_steps
    for r in range(cfg.outer_iterations):
        local = []
        for j, term in enumerate(terms):
            if j in diverged:
                continue
            try:
                w, states[j], traces[j] = run_adam(term, theta.copy(), states[j], K, train_cfg.lr,
                                                   train_cfg.log_every, truths[j], offset=r * K,
                                                   rows=traces[j], final_row=False)
            except TrainingDiverged as exc:
                logger.error("round %d, node %d excluded: %s", r, j, exc)
                diverged.append(j)
                continue
            local.append(w)
        if not local:
            raise TrainingDiverged("all nodes diverged")
        theta = ordered_mean(local).astype(dt)
    results = _adapt_all(terms, theta, states, cfg, train_cfg, truths,
                         cfg.outer_iterations * K, traces, diverged)
    return MetaResult(theta, results, diverged)


def train_maml_first_order(sinos, geoms, cfg: MetaConfig, train_cfg: TrainConfig,
                           grid: GridSpec, truths=None, on_outer=None) -> MetaResult:
    """First-order MAML.

    Inner loop: ``inner_steps`` SGD steps of size ``inner_lr`` from ``theta``.
    Outer step: ``theta <- theta - outer_lr * mean_j grad l_j(w_j^K)``.  Each
    node is then adapted from ``theta`` with Adam; its trace covers the
    adaptation phase only.
    """
    truths = _check_nodes(sinos, geoms, truths)
    dt = np.dtype(train_cfg.dtype)
    emb, arch, w0 = build_network(train_cfg.net, train_cfg.seed)
    terms = [DataTerm(arch, emb, g, s, grid, dt) for s, g in zip(sinos, geoms)]
    theta = w0.astype(dt)
    diverged: list[int] = []
    for it in range(cfg.outer_iterations):
        grads = []
        for j, term in enumerate(terms):
            if j in diverged:
                continue
            w = theta.copy()
            try:
                for _ in range(cfg.inner_steps):
                    loss, g, _ = term.evaluate(w)
                    if not math.isfinite(loss):
                        raise TrainingDiverged(f"non-finite inner loss at outer iteration {it}")
                    w = w - dt.type(cfg.inner_lr) * g
                loss, g, _ = term.evaluate(w)
                if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                    raise TrainingDiverged(f"non-finite outer gradient at iteration {it}")
            except TrainingDiverged as exc:
                logger.error("node %d excluded: %s", j, exc)
                diverged.append(j)
                continue
            grads.append(g)
        if not grads:
            raise TrainingDiverged("all nodes diverged")
        theta = (theta - dt.type(cfg.outer_lr) * ordered_mean(grads)).astype(dt)
        if on_outer is not None:
            on_outer(it, theta)
    states = [AdamState.zeros(arch.size, dt) for _ in terms]
    results = _adapt_all(terms, theta, states, cfg, train_cfg, truths, 0,
                         [[] for _ in terms], diverged)
    return MetaResult(theta, results, diverged)


def adapt_from_init(sino, geom, theta: np.ndarray, train_cfg: TrainConfig, grid: GridSpec,
                    truth=None, iterations: int | None = None) -> ReconResult:
    """Fit a new object starting from a learned initialization."""
    from .single import train_single_inr

    cfg = train_cfg if iterations is None else TrainConfig(
        iterations, train_cfg.lr, train_cfg.seed, train_cfg.log_every, train_cfg.net,
        train_cfg.dtype)
    return train_single_inr(sino, geom, cfg, grid, truth=truth, init=theta)


# ---------------------------------------------------------------------------
# INRWild
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WildConfig:
    static_depth: int = 8
    transient_depth: int = 4
    transient_width: int = 32
    transient_dim: int = 16  # length of each node's code b_j
    static_features: int = 16  # static channels fed to the transient net
    transient_omega0: float = 30.0
    code_std: float = 0.1  # b_j ~ N(0, 0.01)
    identical_transient_init: bool = False
    freeze_transients: bool = False

    def __post_init__(self):
        if self.static_features < 0 or self.transient_dim < 0:
            raise ValueError("feature widths must be >= 0")
        if self.transient_dim + self.static_features < 1:
            raise ValueError("transient net needs at least one input")
        if self.static_depth < 2 or self.transient_depth < 1:
            raise ValueError("invalid depths")


@dataclass
class WildResult:
    static_weights: np.ndarray
    transients: list[tuple[np.ndarray, np.ndarray]]  # (w_j, b_j)
    results: list[ReconResult]
    static_image: ImageGrid


class _WildModel:
    def __init__(self, wild: WildConfig, net: NetSpec, seed: int, grid: GridSpec, dtype):
        self.wild = wild
        self.grid = grid
        self.dtype = np.dtype(dtype)
        emb, _, _ = build_network(net, seed)
        self.static_arch = SirenArch(emb.dim, net.width, wild.static_depth,
                                     1 + wild.static_features, net.omega0)
        self.trans_arch = SirenArch(wild.transient_dim + wild.static_features,
                                    wild.transient_width, wild.transient_depth, 1,
                                    wild.transient_omega0)
        self.features = embed(grid.coordinates(), emb, self.dtype)
        self.embedding = emb

    def static(self, phi):
        out, tape = siren_forward(SirenParams(self.static_arch, phi), self.features)
        return out, tape

    def transient_input(self, code, static_out):
        n = static_out.shape[0]
        return np.concatenate([np.broadcast_to(code, (n, code.size)), static_out[:, 1:]], axis=1)


def train_inrwild(sinos, geoms, wild: WildConfig, train_cfg: TrainConfig, grid: GridSpec,
                  truths=None, on_step=None) -> WildResult:
    """Joint fit of a static network and one transient network per node.

    Node ``j`` renders ``H_j(b_j, G(C)[1:]) + G(C)[0]``.  All parameters take
    one Adam step per iteration on the summed data loss.  With
    ``freeze_transients`` the transient part is fixed at zero and only the
    static network is trained.
    """
    truths = _check_nodes(sinos, geoms, truths)
    J = len(sinos)
    dt = np.dtype(train_cfg.dtype)
    model = _WildModel(wild, train_cfg.net, train_cfg.seed, grid, dt)
    rng_s = np.random.default_rng([train_cfg.seed, 5])
    phi = init_siren(model.static_arch, rng_s, dt, out_scale=train_cfg.net.out_scale).values
    ws, codes = [], []
    for j in range(J):
        k = 0 if wild.identical_transient_init else j
        rng = np.random.default_rng([train_cfg.seed, 6, k])
        ws.append(init_siren(model.trans_arch, rng, dt, out_scale=train_cfg.net.out_scale).values)
        codes.append(rng.normal(0.0, wild.code_std, wild.transient_dim).astype(dt))
    ops = [projection_operator(g, grid, dt) for g in geoms]
    ys = [np.asarray(s.values, dtype=dt).ravel() for s in sinos]
    s_phi = AdamState.zeros(phi.size, dt)
    s_w = [AdamState.zeros(w.size, dt) for w in ws]
    s_b = [AdamState.zeros(b.size, dt) for b in codes]
    traces = [[] for _ in range(J)]
    side = grid.side

    def renders(phi, ws, codes, keep=True):
        sout, stape = model.static(phi)
        out = []
        for j in range(J):
            if wild.freeze_transients:
                out.append((sout[:, 0], None, None))
                continue
            tin = model.transient_input(codes[j], sout)
            h, ttape = siren_forward(SirenParams(model.trans_arch, ws[j]), tin, keep_tape=keep)
            out.append((h + sout[:, 0], ttape, tin))
        return sout, stape, out

    for it in range(train_cfg.iterations):
        sout, stape, outs = renders(phi, ws, codes)
        g_static = np.zeros_like(sout)
        g_ws, g_bs = [], []
        for j, (img, ttape, _) in enumerate(outs):
            a, at = ops[j]
            resid = a @ img - ys[j]
            loss = float(np.dot(resid.astype(np.float64), resid))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"node {j}: non-finite loss at iteration {it}", traces[j])
            g_img = 2.0 * (at @ resid)
            if train_cfg.log_every and it % train_cfg.log_every == 0:
                traces[j].append(TraceRow(it, loss, *quality(img.reshape(side, side), truths[j])))
            g_static[:, 0] += g_img
            if wild.freeze_transients:
                continue
            gw, gin = siren_backward(SirenParams(model.trans_arch, ws[j]), ttape, g_img,
                                     input_grad=True)
            g_ws.append(gw)
            g_bs.append(gin[:, : wild.transient_dim].sum(axis=0))
            g_static[:, 1:] += gin[:, wild.transient_dim :]
        g_phi = siren_backward(SirenParams(model.static_arch, phi), stape, g_static)
        phi, s_phi = adam_step(s_phi, phi, g_phi, train_cfg.lr)
        if not wild.freeze_transients:
            for j in range(J):
                ws[j], s_w[j] = adam_step(s_w[j], ws[j], g_ws[j], train_cfg.lr)
                codes[j], s_b[j] = adam_step(s_b[j], codes[j], g_bs[j], train_cfg.lr)
        if on_step is not None:
            on_step(it, phi, ws, codes)

    sout, _, outs = renders(phi, ws, codes, keep=False)
    results = []
    for j, (img, _, _) in enumerate(outs):
        a, _ = ops[j]
        resid = a @ img - ys[j]
        img2 = img.reshape(side, side)
        traces[j].append(TraceRow(train_cfg.iterations, float(np.dot(resid.astype(np.float64), resid)),
                                  *quality(img2, truths[j])))
        results.append(ReconResult(ImageGrid(img2.astype(np.float64), grid.spacing),
                                   ws[j], traces[j]))
    static_img = ImageGrid(sout[:, 0].reshape(side, side).astype(np.float64), grid.spacing)
    return WildResult(phi, list(zip(ws, codes)), results, static_img)
