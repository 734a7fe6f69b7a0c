"""Bayesian joint reconstruction by variational EM.

Every node ``j`` keeps a diagonal Gaussian posterior ``q(w_j) = N(mu_j, rho_j)``
over its INR weights, with ``rho_j = softplus(pi_j)``.  All nodes share a
diagonal Gaussian prior ``N(omega, sigma)``.  Each round runs ``T`` Adam steps
per node on

    ||A F_w(C) - y||^2 + beta * KL(q(w_j) || N(omega, sigma)),   w ~ q(w_j)

(one reparameterized sample per step), then sets the prior to its
closed-form optimum given all posteriors.  Nodes never read each other; the
prior is the only coupling.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import GridSpec, ImageGrid, ProjectionGeometry, Sinogram
from .inr import (
    AdamState,
    FourierEmbedding,
    SirenArch,
    SirenParams,
    adam_step,
    embed,
    load_embedding,
    load_weights,
    save_embedding,
    save_weights,
    siren_forward,
)
from .single import (
    DataTerm,
    ReconResult,
    TraceRow,
    TrainConfig,
    TrainingDiverged,
    build_network,
    quality,
)

logger = logging.getLogger(__name__)

__all__ = [
    "BayesConfig",
    "LatentPrior",
    "VariationalNode",
    "BayesResult",
    "ElboRow",
    "softplus",
    "inverse_softplus",
    "kl_diag_gauss",
    "sample_weights",
    "e_step",
    "m_step",
    "ordered_mean",
    "train_inr_bayes",
    "adapt_with_frozen_prior",
    "posterior_uncertainty",
    "save_prior",
    "load_prior",
]


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def ordered_mean(arrays) -> np.ndarray:
    """Element-wise mean whose result does not depend on the input order.

    Values are sorted along the node axis before summation, so any
    permutation of ``arrays`` gives bit-identical output.
    """
    stack = np.stack(list(arrays), axis=0)
    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


@dataclass(frozen=True)
class BayesConfig:
    em_rounds: int = 20
    e_steps: int = 100
    kl_weight: float = 1e-6
    lr: float = 1e-3
    seed: int = 0
    sigma_floor: float = 1e-12
    init_variance: float = 1e-6
    prior_mean0: float = 0.0
    prior_variance0: float = 1.0
    shared_init: bool = True
    log_every: int = 25

    def __post_init__(self):
        if self.em_rounds < 1 or self.e_steps < 1:
            raise ValueError("em_rounds and e_steps must be >= 1")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    @property
    def iterations(self) -> int:
        return self.em_rounds * self.e_steps


@dataclass
class LatentPrior:
    omega: np.ndarray
    sigma: np.ndarray
    arch: SirenArch | None = None
    embedding: FourierEmbedding | None = None

    def __post_init__(self):
        if self.omega.shape != self.sigma.shape:
            raise ValueError("omega and sigma lengths differ")
        if not np.all(self.sigma > 0):
            raise ValueError("prior variance must be positive")


@dataclass
class VariationalNode:
    mu: np.ndarray
    pi: np.ndarray
    adam_mu: AdamState
    adam_pi: AdamState
    node_id: int = 0

    @classmethod
    def create(cls, mu: np.ndarray, init_variance: float, node_id: int = 0):
        mu = np.array(mu)
        pi = np.full_like(mu, inverse_softplus(init_variance))
        return cls(mu, pi, AdamState.zeros(mu.size, mu.dtype), AdamState.zeros(mu.size, mu.dtype),
                   node_id)

    @property
    def rho(self) -> np.ndarray:
        return softplus(self.pi)


class ElboRow(NamedTuple):
    round: int
    elbo: float  # -(data + beta * kl), the objective EM maximizes
    data: float  # sum over nodes of the round's mean sampled data loss
    kl: float  # sum over nodes of the round's mean KL to the current prior


@dataclass
class BayesResult:
    results: list[ReconResult]
    prior: LatentPrior
    elbo_trace: list[ElboRow]
    nodes: list[VariationalNode]
    diverged: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def kl_diag_gauss(q_mean, q_var, p_mean, p_var):
    """``KL(N(q_mean, q_var) || N(p_mean, p_var))`` for diagonal Gaussians.

    Returns ``(kl, d kl / d q_mean, d kl / d q_var)``; arguments are variances.
    """
    q_mean = np.asarray(q_mean, dtype=np.float64)
    q_var = np.asarray(q_var, dtype=np.float64)
    p_mean = np.asarray(p_mean, dtype=np.float64)
    p_var = np.asarray(p_var, dtype=np.float64)
    if np.any(q_var <= 0) or np.any(p_var <= 0):
        raise ValueError("variances must be positive")
    diff = q_mean - p_mean
    terms = 0.5 * (np.log(p_var) - np.log(q_var) + (q_var + diff * diff) / p_var - 1.0)
    return float(terms.sum()), diff / p_var, 0.5 * (1.0 / p_var - 1.0 / q_var)


def sample_weights(node: VariationalNode, rng: np.random.Generator):
    """Reparameterized draw ``mu + sqrt(softplus(pi)) * eps``; returns ``(w, eps)``."""
    eps = rng.standard_normal(node.mu.size).astype(node.mu.dtype)
    return node.mu + np.sqrt(softplus(node.pi)) * eps, eps


def _node_gradients(node, prior, term, beta, rng):
    w, eps = sample_weights(node, rng)
    data, g_w, _ = term.evaluate(w)
    if not math.isfinite(data):
        raise TrainingDiverged(f"node {node.node_id}: non-finite data loss")
    pi = node.pi.astype(np.float64)
    rho = softplus(pi)
    kl, gk_mu, _ = kl_diag_gauss(node.mu, rho, prior.omega, prior.sigma)
    dsp = _sigmoid(pi)
    g_mu = g_w + beta * gk_mu
    # d/dpi of the sampled data term and of beta * KL, through rho = softplus(pi)
    g_pi = g_w * eps * (0.5 * dsp / np.sqrt(rho)) + beta * 0.5 * (dsp / prior.sigma - dsp / rho)
    dt = node.mu.dtype
    return data, kl, g_mu.astype(dt), g_pi.astype(dt)


def e_step(node: VariationalNode, prior: LatentPrior, term: DataTerm, beta: float,
           steps: int, lr: float, rng: np.random.Generator, freeze_pi: bool = False,
           truth: ImageGrid | None = None, offset: int = 0, log_every: int = 25,
           on_step=None, losses: list | None = None):
    """``steps`` Adam updates of ``(mu, pi)`` against a fixed prior.

    ``term`` bundles the node's sinogram, geometry and network.  Returns the
    updated node and trace rows ``(iteration, sampled data loss, psnr, ssim)``
    with quality measured on the posterior mean.  If ``losses`` is a list, the
    sampled data loss and KL of every step are appended to it as pairs.
    """
    rows = []
    mu, pi = node.mu, node.pi
    adam_mu, adam_pi = node.adam_mu, node.adam_pi
    for t in range(steps):
        cur = replace(node, mu=mu, pi=pi)
        data, kl, g_mu, g_pi = _node_gradients(cur, prior, term, beta, rng)
        if losses is not None:
            losses.append((data, kl))
        it = offset + t
        if log_every and it % log_every == 0:
            q = quality(term.render(mu), truth) if truth is not None else (None, None)
            rows.append(TraceRow(it, data, *q))
        mu, adam_mu = adam_step(adam_mu, mu, g_mu, lr)
        if not freeze_pi:
            pi, adam_pi = adam_step(adam_pi, pi, g_pi, lr)
        if on_step is not None:
            on_step(it, mu, pi)
    return replace(node, mu=mu, pi=pi, adam_mu=adam_mu, adam_pi=adam_pi), rows


def m_step(nodes, sigma_floor: float = 1e-12, arch=None, embedding=None) -> LatentPrior:
    """Closed-form prior update: ``omega`` is the mean of the posterior means,
    ``sigma`` the mean of ``rho_j + (mu_j - omega)^2``, floored at ``sigma_floor``."""
    nodes = list(nodes)
    if not nodes:
        raise ValueError("m_step needs at least one node")
    mus = [n.mu.astype(np.float64) for n in nodes]
    omega = ordered_mean(mus)
    sigma = ordered_mean([softplus(n.pi.astype(np.float64)) + (m - omega) ** 2
                          for n, m in zip(nodes, mus)])
    return LatentPrior(omega, np.maximum(sigma, sigma_floor), arch, embedding)


def _elbo_row(r, per_node, beta) -> ElboRow:
    # Monte Carlo estimate: each node's E-step draws averaged over the round
    data = float(sum(np.mean([d for d, _ in steps]) for steps in per_node))
    kl = float(sum(np.mean([k for _, k in steps]) for steps in per_node))
    return ElboRow(r, -(data + beta * kl), data, kl)


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------


def train_inr_bayes(sinos, geoms, cfg: BayesConfig, grid: GridSpec, net=None,
                    truths=None, dtype: str = "float32") -> BayesResult:
    """Joint reconstruction of ``len(sinos)`` objects.

    Final images are rendered from the posterior means.  A node whose loss
    becomes non-finite is dropped from later rounds and listed in
    ``BayesResult.diverged``.
    """
    net = net if net is not None else TrainConfig().net
    dt = np.dtype(dtype)
    emb, arch, w0 = build_network(net, cfg.seed)
    J = len(sinos)
    if J < 1:
        raise ValueError("need at least one node")
    truths = truths if truths is not None else [None] * J
    terms = [DataTerm(arch, emb, g, s, grid, dt) for s, g in zip(sinos, geoms)]
    node_rngs = [np.random.default_rng([cfg.seed, 3, j]) for j in range(J)]
    nodes = []
    for j in range(J):
        init = w0 if (cfg.shared_init or j == 0) else build_network(net, cfg.seed + 7919 * j)[2]
        nodes.append(VariationalNode.create(init.astype(dt), cfg.init_variance, j))
    prior = LatentPrior(np.full(arch.size, cfg.prior_mean0), np.full(arch.size, cfg.prior_variance0),
                        arch, emb)
    traces = [[] for _ in range(J)]
    alive = list(range(J))
    diverged = []
    elbo = []
    for r in range(cfg.em_rounds):
        per_node = []
        for j in list(alive):
            steps = []
            try:
                nodes[j], rows = e_step(nodes[j], prior, terms[j], cfg.kl_weight, cfg.e_steps,
                                        cfg.lr, node_rngs[j], truth=truths[j],
                                        offset=r * cfg.e_steps, log_every=cfg.log_every,
                                        losses=steps)
            except TrainingDiverged as exc:
                logger.error("round %d: %s; node dropped", r, exc)
                alive.remove(j)
                diverged.append(j)
                continue
            traces[j].extend(rows)
            per_node.append(steps)
        if not alive:
            raise TrainingDiverged("all nodes diverged")
        prior = m_step([nodes[j] for j in alive], cfg.sigma_floor, arch, emb)
        elbo.append(_elbo_row(r, per_node, cfg.kl_weight))
    results = []
    for j in range(J):
        img = terms[j].render(nodes[j].mu)
        final = TraceRow(cfg.iterations, terms[j].loss(nodes[j].mu), *quality(img, truths[j]))
        results.append(ReconResult(ImageGrid(img.astype(np.float64), grid.spacing),
                                   nodes[j].mu, traces[j] + [final], j in diverged))
    return BayesResult(results, prior, elbo, nodes, diverged)


def adapt_with_frozen_prior(sino: Sinogram, geom: ProjectionGeometry, prior: LatentPrior,
                            cfg: BayesConfig, grid: GridSpec, iterations: int | None = None,
                            truth: ImageGrid | None = None, dtype: str = "float32",
                            on_step=None) -> ReconResult:
    """Reconstruct a new object starting from ``mu = omega``, with the learned
    prior held fixed as the KL target throughout."""
    if prior.arch is None or prior.embedding is None:
        raise ValueError("prior carries no architecture/embedding")
    dt = np.dtype(dtype)
    iterations = iterations or cfg.iterations
    term = DataTerm(prior.arch, prior.embedding, geom, sino, grid, dt)
    node = VariationalNode.create(prior.omega.astype(dt), cfg.init_variance)
    rng = np.random.default_rng([cfg.seed, 4])
    node, rows = e_step(node, prior, term, cfg.kl_weight, iterations, cfg.lr, rng,
                        truth=truth, log_every=cfg.log_every, on_step=on_step)
    img = term.render(node.mu)
    rows.append(TraceRow(iterations, term.loss(node.mu), *quality(img, truth)))
    return ReconResult(ImageGrid(img.astype(np.float64), grid.spacing), node.mu, rows)


def posterior_uncertainty(node: VariationalNode, arch: SirenArch, embedding: FourierEmbedding,
                          grid: GridSpec, n_samples: int = 10,
                          rng: np.random.Generator | None = None):
    """Pixelwise mean and unbiased variance of ``n_samples`` posterior renders."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    rng = rng or np.random.default_rng(0)
    feats = embed(grid.coordinates(), embedding, np.float64)
    renders = []
    for _ in range(n_samples):
        w, _ = sample_weights(node, rng)
        out, _ = siren_forward(SirenParams(arch, w.astype(np.float64)), feats, keep_tape=False)
        renders.append(out.reshape(grid.side, grid.side))
    stack = np.stack(renders)
    return (ImageGrid(stack.mean(axis=0), grid.spacing),
            ImageGrid(stack.var(axis=0, ddof=1), grid.spacing))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_prior(prior: LatentPrior, directory) -> Path:
    """Writes ``omega.bin``, ``sigma.bin`` (weight files) and ``embedding.bin``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_weights(prior.arch, prior.omega, d / "omega.bin")
    save_weights(prior.arch, prior.sigma, d / "sigma.bin")
    save_embedding(prior.embedding, d / "embedding.bin")
    return d


def load_prior(directory) -> LatentPrior:
    d = Path(directory)
    arch, omega = load_weights(d / "omega.bin")
    arch2, sigma = load_weights(d / "sigma.bin")
    if arch != arch2:
        raise ValueError(f"{d}: omega and sigma architectures differ")
    return LatentPrior(omega.astype(np.float64), sigma.astype(np.float64), arch,
                       load_embedding(d / "embedding.bin"))
