"""Experiment runner: config parsing, dispatch, artifact and report writing."""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .baselines import MetaConfig, WildConfig, train_fedavg, train_inrwild, train_maml_first_order
from .bayes import BayesConfig, adapt_with_frozen_prior, save_prior, train_inr_bayes
from .classical import FbpFilter, fbp, sirt
from .geometry import GridSpec, ImageGrid, ProjectionGeometry, forward_project, save_sinogram
from .metrics import aggregate, psnr, ssim
from .phantoms import (
    NoiseSpec,
    PhantomFamilySpec,
    apply_poisson_noise,
    disk_phantom,
    load_grayscale,
    make_phantom_family,
    save_grayscale,
)
from .single import NetSpec, ReconResult, TrainConfig, TrainingDiverged, train_single_inr, write_trace_csv

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunReport",
    "METHODS",
    "SWEEP_AXES",
    "OUTPUT_ENV",
    "load_config",
    "parse_config",
    "run_experiment",
    "run_sweep",
]

METHODS = ("fbp", "sirt", "single-inr", "fedavg", "maml", "inrwild", "inr-bayes", "bayes-adapt")
SWEEP_AXES = ("angles", "nodes", "beta", "iterations")
OUTPUT_ENV = "JOINTINR_OUTPUT_DIR"


class ConfigError(ValueError):
    """A config problem; the message starts with the offending field path."""


# ---------------------------------------------------------------------------
# Config blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetBlock:
    kind: str = "family"  # family | disk | images
    side: int = 64
    count: int = 10
    jitter: float = 0.1
    seed: int | None = None  # defaults to run.seed
    directory: str | None = None
    holdout: int = 1  # held-out members for bayes-adapt


@dataclass(frozen=True)
class GeometryBlock:
    angles: int = 20
    arc: float = 180.0
    detectors: int | None = None
    detector_spacing: float | None = None


@dataclass(frozen=True)
class NoiseBlock:
    photon_count: float = 5000.0
    gamma_abs: float = 0.5
    max_attenuation: float | None = 4.0
    seed: int | None = None  # defaults to run.seed


@dataclass(frozen=True)
class RunBlock:
    iterations: int = 2000
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 25
    output: str = "runs/experiment"
    dtype: str = "float32"


# Method parameters accepted per method name, with defaults.
_METHOD_PARAMS: dict[str, dict[str, Any]] = {
    "fbp": {"filter": "ram-lak"},
    "sirt": {"iterations": 500, "nonneg": True},
    "single-inr": {},
    "fedavg": {"inner_steps": 100, "outer_iterations": 10, "adaptation_iterations": 1000},
    "maml": {"inner_steps": 10, "inner_lr": 1e-6, "outer_iterations": 100, "outer_lr": 1e-5,
             "adaptation_iterations": 1000},
    "inrwild": {f.name: f.default for f in dataclasses.fields(WildConfig)},
    "inr-bayes": {"em_rounds": None, "e_steps": 100, "kl_weight": BayesConfig.kl_weight,
                  "init_variance": 1e-6, "sigma_floor": 1e-12, "shared_init": True},
    "bayes-adapt": {"em_rounds": None, "e_steps": 100, "kl_weight": BayesConfig.kl_weight,
                    "init_variance": 1e-6, "sigma_floor": 1e-12, "shared_init": True,
                    "adapt_iterations": None},
}


@dataclass(frozen=True)
class MethodBlock:
    name: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetBlock
    geometry: GeometryBlock
    method: MethodBlock
    net: NetSpec = NetSpec()
    run: RunBlock = RunBlock()
    noise: NoiseBlock | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["method"] = {"name": self.method.name, **self.method.params}
        return d


def _coerce(value, default, path):
    """Check ``value`` against the type of ``default`` (ints may stand in for floats)."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _block(cls, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown field")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kw[key] = _coerce(value, default, f"{path}.{key}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config mapping; errors name the field path."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a mapping")
    unknown = set(raw) - {"dataset", "geometry", "noise", "method", "net", "run"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown block")
    m = raw.get("method")
    if not isinstance(m, dict) or "name" not in m:
        raise ConfigError("method.name: required")
    name = m["name"]
    if name not in METHODS:
        raise ConfigError(f"method.name: unknown method {name!r} (choose from {', '.join(METHODS)})")
    allowed = _METHOD_PARAMS[name]
    params = {}
    for key, value in m.items():
        if key == "name":
            continue
        if key not in allowed:
            raise ConfigError(f"method.{key}: not a parameter of {name}")
        params[key] = _coerce(value, allowed[key], f"method.{key}")
    if name == "fbp":
        try:
            FbpFilter(params.get("filter", "ram-lak"))
        except ValueError:
            raise ConfigError(f"method.filter: unknown filter {params['filter']!r}") from None
    dataset = _block(DatasetBlock, raw.get("dataset"), "dataset")
    if dataset.kind not in ("family", "disk", "images"):
        raise ConfigError(f"dataset.kind: unknown kind {dataset.kind!r}")
    if dataset.kind == "images":
        if not dataset.directory or not Path(dataset.directory).is_dir():
            raise ConfigError(f"dataset.directory: no such directory {dataset.directory!r}")
    if dataset.count < 1:
        raise ConfigError("dataset.count: must be >= 1")
    if name == "bayes-adapt" and not 1 <= dataset.holdout < dataset.count:
        raise ConfigError("dataset.holdout: must leave at least one training member")
    geometry = _block(GeometryBlock, raw.get("geometry"), "geometry")
    if geometry.angles < 1:
        raise ConfigError("geometry.angles: must be >= 1")
    noise = None if raw.get("noise") is None else _block(NoiseBlock, raw["noise"], "noise")
    net = _block(NetSpec, raw.get("net"), "net")
    run = _block(RunBlock, raw.get("run"), "run")
    if run.iterations < 1:
        raise ConfigError("run.iterations: must be >= 1")
    if not run.lr > 0:
        raise ConfigError("run.lr: must be positive")
    return ExperimentConfig(dataset, geometry, MethodBlock(name, params), net, run, noise)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"<root>: {path} is not valid YAML ({exc})") from exc
    return parse_config(raw)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    method: str
    nodes: list[dict]  # node index, psnr, ssim, diverged
    psnr_mean: float
    psnr_se: float
    ssim_mean: float
    ssim_se: float
    wall_time: float
    config: dict
    artifacts: dict
    diverged: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.diverged

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str)

    def to_text(self) -> str:
        lines = [f"method: {self.method}", f"nodes: {len(self.nodes)}"]
        for n in self.nodes:
            flag = "  DIVERGED" if n["diverged"] else ""
            lines.append(f"  node {n['node']:3d}  psnr {n['psnr']:8.3f} dB  ssim {n['ssim']:.4f}{flag}")
        lines.append(f"psnr: {self.psnr_mean:.3f} +/- {self.psnr_se:.3f} dB")
        lines.append(f"ssim: {self.ssim_mean:.4f} +/- {self.ssim_se:.4f}")
        lines.append(f"wall time: {self.wall_time:.1f} s")
        for k, v in self.extra.items():
            lines.append(f"{k}: {v}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _ground_truth(cfg: ExperimentConfig) -> list[ImageGrid]:
    d = cfg.dataset
    seed = cfg.run.seed if d.seed is None else d.seed
    if d.kind == "family":
        return make_phantom_family(PhantomFamilySpec(side=d.side, jitter=d.jitter, count=d.count,
                                                     seed=seed))
    if d.kind == "disk":
        return [disk_phantom(d.side) for _ in range(d.count)]
    files = sorted(p for p in Path(d.directory).iterdir()
                   if p.suffix.lower() in (".png", ".pgm"))[: d.count]
    if not files:
        raise ConfigError(f"dataset.directory: no PNG/PGM images in {d.directory}")
    images = [load_grayscale(p) for p in files]
    if len({im.side for im in images}) != 1:
        raise ConfigError("dataset.directory: images have different sizes")
    return images


def _geometry(cfg: ExperimentConfig, grid: GridSpec) -> ProjectionGeometry:
    g = cfg.geometry
    return ProjectionGeometry.parallel(g.angles, grid, g.arc, g.detectors, g.detector_spacing)


def _sinograms(cfg, truths, geom):
    sinos = []
    for j, t in enumerate(truths):
        s = forward_project(t, geom)
        if cfg.noise is not None:
            n = cfg.noise
            seed = cfg.run.seed if n.seed is None else n.seed
            spec = NoiseSpec(n.photon_count, n.gamma_abs, int(seed) * 1000 + j, n.max_attenuation)
            s = apply_poisson_noise(s, spec)
        sinos.append(s)
    return sinos


def _train_cfg(cfg: ExperimentConfig, iterations=None) -> TrainConfig:
    r = cfg.run
    return TrainConfig(iterations or r.iterations, r.lr, r.seed, r.log_every, cfg.net, r.dtype)


def _bayes_cfg(cfg: ExperimentConfig) -> BayesConfig:
    p = {**_METHOD_PARAMS[cfg.method.name], **cfg.method.params}
    e_steps = p["e_steps"]
    rounds = p["em_rounds"] or max(1, cfg.run.iterations // e_steps)
    return BayesConfig(em_rounds=rounds, e_steps=e_steps, kl_weight=p["kl_weight"], lr=cfg.run.lr,
                       seed=cfg.run.seed, sigma_floor=p["sigma_floor"],
                       init_variance=p["init_variance"], shared_init=p["shared_init"],
                       log_every=cfg.run.log_every)


def _dispatch(cfg: ExperimentConfig, sinos, geom, grid, truths, out: Path):
    """Returns ``(images, traces, diverged, extra, prior_dir, indices)``."""
    name = cfg.method.name
    p = {**_METHOD_PARAMS[name], **cfg.method.params}
    J = len(sinos)
    idx = list(range(J))
    extra: dict = {}
    if name == "fbp":
        return [fbp(s, geom, grid, FbpFilter(p["filter"])) for s in sinos], None, [], extra, None, idx
    if name == "sirt":
        return ([sirt(s, geom, grid, p["iterations"], p["nonneg"]) for s in sinos], None, [], extra,
                None, idx)
    tc = _train_cfg(cfg)
    geoms = [geom] * J
    if name == "single-inr":
        results, diverged = [], []
        for j, (s, t) in enumerate(zip(sinos, truths)):
            try:
                results.append(train_single_inr(s, geom, tc, grid, truth=t))
            except TrainingDiverged as exc:
                logger.error("node %d diverged: %s", j, exc)
                diverged.append(j)
                results.append(ReconResult(ImageGrid(np.zeros((grid.side, grid.side)), grid.spacing), np.zeros(0), exc.trace, True))
        return _unpack(results) + (diverged, extra, None, idx)
    if name in ("fedavg", "maml"):
        mc = MetaConfig(inner_steps=p["inner_steps"], inner_lr=p.get("inner_lr", tc.lr),
                        outer_iterations=p["outer_iterations"], outer_lr=p.get("outer_lr", tc.lr),
                        adaptation_iterations=p["adaptation_iterations"], seed=cfg.run.seed)
        trainer = train_fedavg if name == "fedavg" else train_maml_first_order
        res = trainer(sinos, geoms, mc, tc, grid, truths=truths)
        return _unpack(res.results) + (res.diverged, extra, None, idx)
    if name == "inrwild":
        wild = WildConfig(**{k: p[k] for k in _METHOD_PARAMS["inrwild"]})
        res = train_inrwild(sinos, geoms, wild, tc, grid, truths=truths)
        save_grayscale(res.static_image, out / "static.png")
        return _unpack(res.results) + ([], extra, None, idx)
    bc = _bayes_cfg(cfg)
    if name == "inr-bayes":
        res = train_inr_bayes(sinos, geoms, bc, grid, cfg.net, truths=truths, dtype=cfg.run.dtype)
        prior_dir = save_prior(res.prior, out / "prior")
        _write_elbo(res.elbo_trace, out / "elbo.csv")
        return _unpack(res.results) + (res.diverged, extra, prior_dir, idx)
    # bayes-adapt: learn the prior on the first members, adapt on the held-out ones
    n_train = J - cfg.dataset.holdout
    res = train_inr_bayes(sinos[:n_train], geoms[:n_train], bc, grid, cfg.net,
                          truths=truths[:n_train], dtype=cfg.run.dtype)
    prior_dir = save_prior(res.prior, out / "prior")
    _write_elbo(res.elbo_trace, out / "elbo.csv")
    extra["training_psnr_mean"] = aggregate(r.trace[-1].psnr for r in res.results)[0]
    adapted = [adapt_with_frozen_prior(sinos[j], geom, res.prior, bc, grid,
                                       iterations=p["adapt_iterations"], truth=truths[j],
                                       dtype=cfg.run.dtype)
               for j in range(n_train, J)]
    return _unpack(adapted) + ([], extra, prior_dir, list(range(n_train, J)))


def _unpack(results):
    return [r.image for r in results], [r.trace for r in results]


def _write_elbo(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["round", "elbo", "data", "kl"])
        for r in rows:
            wr.writerow([r.round, repr(r.elbo), repr(r.data), repr(r.kl)])


def _output_dir(cfg: ExperimentConfig, override) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env) / Path(cfg.run.output).name
    return Path(cfg.run.output)


def run_experiment(config, output_dir=None) -> RunReport:
    """Run one experiment from a config path, mapping or parsed config.

    Writes ground truth, sinograms, reconstructions (16-bit PNG plus an 8-bit
    min-max preview), per-node trace CSVs, ``metrics.csv``, the prior where
    applicable and ``report.json`` / ``report.txt``.  The output directory is
    ``output_dir``, else ``$JOINTINR_OUTPUT_DIR/<run.output name>``, else
    ``run.output``.
    """
    if isinstance(config, ExperimentConfig):
        cfg = config
    elif isinstance(config, dict):
        cfg = parse_config(config)
    else:
        cfg = load_config(config)
    out = _output_dir(cfg, output_dir)
    for sub in ("truth", "sinograms", "recon", "traces"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    truths = _ground_truth(cfg)
    grid = truths[0].spec
    geom = _geometry(cfg, grid)
    sinos = _sinograms(cfg, truths, geom)
    for j, (t, s) in enumerate(zip(truths, sinos)):
        save_grayscale(t, out / "truth" / f"node_{j:03d}.png")
        save_sinogram(s, out / "sinograms" / f"node_{j:03d}.sino")
    diverged: list[int] = []
    try:
        images, traces, diverged, extra, prior_dir, idx = _dispatch(cfg, sinos, geom, grid, truths, out)
    except TrainingDiverged as exc:
        logger.error("run failed: %s", exc)
        images, traces, extra, prior_dir = [], None, {"error": str(exc)}, None
        idx, diverged = [], list(range(len(sinos)))
    nodes = []
    artifacts = {"truth": "truth", "sinograms": "sinograms", "recon": "recon",
                 "metrics": "metrics.csv"}
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["node", "psnr", "ssim", "diverged"])
        for k, (j, img) in enumerate(zip(idx, images)):
            p, s = psnr(img, truths[j]), ssim(img, truths[j])
            div = j in diverged
            nodes.append({"node": j, "psnr": p, "ssim": s, "diverged": div})
            wr.writerow([j, repr(p), repr(s), int(div)])
            save_grayscale(img, out / "recon" / f"node_{j:03d}.png")
            v = img.values
            save_grayscale(img, out / "recon" / f"node_{j:03d}_preview.png", bits=8,
                           window=(float(v.min()), float(v.max())))
            if traces is not None:
                write_trace_csv(traces[k], out / "traces" / f"node_{j:03d}.csv")
    if traces is not None:
        artifacts["traces"] = "traces"
    if prior_dir is not None:
        artifacts["prior"] = "prior"
        artifacts["elbo"] = "elbo.csv"
    good = [n for n in nodes if not n["diverged"]]
    pm, pse = aggregate(n["psnr"] for n in good) if good else (math.nan, math.nan)
    sm, sse = aggregate(n["ssim"] for n in good) if good else (math.nan, math.nan)
    report = RunReport(cfg.method.name, nodes, pm, pse, sm, sse, time.perf_counter() - t0,
                       cfg.to_dict(), artifacts, sorted(diverged), extra)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    return report


def _apply_axis(raw: dict, axis: str, value) -> dict:
    raw = copy.deepcopy(raw)
    if axis == "angles":
        raw.setdefault("geometry", {})["angles"] = int(value)
    elif axis == "nodes":
        raw.setdefault("dataset", {})["count"] = int(value)
    elif axis == "beta":
        raw["method"]["kl_weight"] = float(value)
    elif axis == "iterations":
        raw.setdefault("run", {})["iterations"] = int(value)
    else:
        raise ConfigError(f"sweep axis {axis!r} not in {SWEEP_AXES}")
    return raw


def run_sweep(config, axis: str, values, output_dir=None):
    """One run per value of ``axis``; writes ``sweep.csv`` with one row per run.

    A failed point is recorded with ``status`` set to the error and the sweep
    moves on.  Returns ``(reports, csv_path)``; failed points have no report.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis {axis!r} not in {SWEEP_AXES}")
    raw = config if isinstance(config, dict) else yaml.safe_load(Path(config).read_text())
    base = _output_dir(parse_config(raw), output_dir)
    base.mkdir(parents=True, exist_ok=True)
    reports, rows = [], []
    for v in values:
        point = _apply_axis(raw, axis, v)
        try:
            rep = run_experiment(parse_config(point), base / f"{axis}_{v}")
            reports.append(rep)
            status = "ok" if rep.ok else "diverged"
            rows.append([axis, v, rep.method, repr(rep.psnr_mean), repr(rep.psnr_se), status])
        except Exception as exc:  # keep sweeping past a bad point
            logger.error("sweep point %s=%s failed: %s", axis, v, exc)
            rows.append([axis, v, raw["method"]["name"], "nan", "nan", f"error: {exc}"])
    path = base / "sweep.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["axis", "value", "method", "psnr_mean", "psnr_se", "status"])
        wr.writerows(rows)
    return reports, path
