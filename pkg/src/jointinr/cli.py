"""Command-line entry point: ``jointinr run|sweep|render-prior|metrics``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

THREADS_ENV = "JOINTINR_THREADS"


def _limit_threads() -> None:
    # must happen before numpy loads its BLAS
    n = os.environ.get(THREADS_ENV)
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointinr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides config and environment)")
    s = sub.add_parser("sweep", help="repeat an experiment over one axis")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=("angles", "nodes", "beta", "iterations"))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out")
    rp = sub.add_parser("render-prior", help="render the prior mean network")
    rp.add_argument("prior", help="prior directory written by an inr-bayes run")
    rp.add_argument("--out", required=True)
    rp.add_argument("--side", type=int, default=64)
    m = sub.add_parser("metrics", help="PSNR and SSIM of an image against a reference")
    m.add_argument("image")
    m.add_argument("reference")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    from .harness import ConfigError, run_experiment, run_sweep

    try:
        if args.command == "run":
            report = run_experiment(args.config, args.out)
            sys.stdout.write(report.to_text())
            return 0 if report.ok else 2
        if args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            reports, path = run_sweep(args.config, args.axis, values, args.out)
            sys.stdout.write(path.read_text())
            failed = len(values) - sum(r.ok for r in reports)
            return 0 if failed == 0 else 2
        if args.command == "render-prior":
            from .bayes import load_prior
            from .geometry import GridSpec
            from .inr import SirenParams
            from .phantoms import save_grayscale
            from .single import inr_render

            prior = load_prior(args.prior)
            img = inr_render(SirenParams(prior.arch, prior.omega), prior.embedding,
                             GridSpec(args.side))
            save_grayscale(img, args.out)
            print(f"wrote {args.out}")
            return 0
        from .metrics import psnr, ssim
        from .phantoms import load_grayscale

        a, b = load_grayscale(args.image), load_grayscale(args.reference)
        print(f"psnr {psnr(a, b):.4f} dB\nssim {ssim(a, b):.6f}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
