"""Command-line interface: ``fcmfrac <command> [options]``.

Commands
--------
run        solve a configuration and write all artifacts
phantom    write a synthetic specimen (image + sidecar + runnable config)
calibrate  parameter sweep defined by the config's ``sweep`` block
probe      strains at probe points of a finished run
postproc   regenerate postprocessing artifacts from a checkpoint
version    print the package version

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .. import __version__

THREADS_ENV = "FCMFRAC_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("fcmfrac")


def _set_threads(n):
    """Limit BLAS threads.  Must run before numpy is first imported to take full effect."""
    n = n if n is not None else os.environ.get(THREADS_ENV)
    if n is None:
        return
    for var in _THREAD_VARS:
        os.environ[var] = str(int(n))
    try:
        from threadpoolctl import threadpool_limits  # optional

        threadpool_limits(int(n))
    except ImportError:
        pass


def _parser():
    p = argparse.ArgumentParser(prog="fcmfrac", description="Voxel finite cell phase-field fracture simulator.")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--threads", type=int, default=None, help=f"BLAS threads (default: ${THREADS_ENV} or library default)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="solve a configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir", default=None)
    r.add_argument("--resume", action="store_true", help="continue from output-dir/checkpoint.npz")

    ph = sub.add_parser("phantom", help="write a synthetic specimen")
    ph.add_argument("--kind", required=True)
    ph.add_argument("--size", type=int, nargs="+", default=None, help="voxel dims (one number for the sphere)")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--output-dir", required=True)

    c = sub.add_parser("calibrate", help="parameter sweep")
    c.add_argument("--config", required=True)
    c.add_argument("--output-dir", default=None)

    pr = sub.add_parser("probe", help="strains at points of a finished run")
    pr.add_argument("--config", required=True)
    pr.add_argument("--output-dir", default=None)
    pr.add_argument("--point", type=float, nargs=3, action="append", default=None, metavar=("X", "Y", "Z"))
    pr.add_argument("--radius", type=float, default=None)

    pp = sub.add_parser("postproc", help="regenerate artifacts from a checkpoint")
    pp.add_argument("--config", required=True)
    pp.add_argument("--output-dir", default=None)

    sub.add_parser("version", help="print the version")
    return p


def cmd_phantom(args):
    from ..benchmarks import write_phantom

    write_phantom(args.kind, args.output_dir, args.size, args.seed)
    print(f"wrote {args.kind} phantom to {args.output_dir} (image.json, config.yaml)")
    return 0


def cmd_run(args):
    from .config import load_config, require_image
    from .runner import run

    cfg = load_config(args.config)
    require_image(cfg, args.config)
    out = cfg.output_dir(args.output_dir)
    summary = run(cfg, out, resume=args.resume)
    print(f"{summary['termination']}: {summary['n_steps']} steps, failure load "
          f"{summary.get('failure_load_N', float('nan')):.6g} N; artifacts in {out}")
    return 0


def cmd_calibrate(args):
    from ..calibrate import rank, run_sweep, spec_from_config
    from .config import ConfigError, load_config, require_image

    cfg = load_config(args.config)
    require_image(cfg, args.config)
    if cfg.sweep is None:
        raise ConfigError(f"{args.config}: sweep: block required for calibrate")
    out = cfg.output_dir(args.output_dir)
    results = run_sweep(cfg, spec_from_config(cfg), out)
    for r in rank(results):
        print(f"{cfg.sweep.parameter}={r.value:g}  {r.status}  failure_load={r.failure_load:.6g}  "
              f"{cfg.sweep.metric}={r.metric:.6g}")
    return 0 if any(r.status == "ok" for r in results) else 1


def cmd_probe(args):
    from .config import load_config
    from .runner import probe

    cfg = load_config(args.config)
    out = cfg.output_dir(args.output_dir)
    print("name,x,y,z,eps3_ustrain")
    for name, c, e in probe(cfg, out, args.point, args.radius):
        print(f"{name},{c[0]!r},{c[1]!r},{c[2]!r},{e!r}")
    return 0


def cmd_postproc(args):
    from .config import load_config
    from .runner import postprocess

    cfg = load_config(args.config)
    out = cfg.output_dir(args.output_dir)
    summary = postprocess(cfg, out)
    print(f"regenerated artifacts in {out} (failure load {summary.get('failure_load_N', float('nan')):.6g} N)")
    return 0


COMMANDS = {"run": cmd_run, "phantom": cmd_phantom, "calibrate": cmd_calibrate, "probe": cmd_probe,
            "postproc": cmd_postproc}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "version":
        print(f"fcmfrac {__version__}")
        return 0
    _set_threads(args.threads)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    from .config import ConfigError

    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"fcmfrac {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        log.debug("traceback", exc_info=True)
        print(f"fcmfrac {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
