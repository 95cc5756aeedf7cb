"""Command-line entry point.

    sourcerec simulate|krige|mcmc|accuracy|st-demo --config PATH
              [--seed N] [--workers K] [--out DIR]

Exit status is 0 on success, 2 for configuration or input errors and 3 for
numerical failures.  ``SOURCEREC_LOG`` (error, info or debug) sets the log
level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from ..errors import ConfigInvalid, SourcerecError
from . import output
from .commands import COMMANDS, manifest_header
from .config import load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("sourcerec")


def build_parser():
    p = argparse.ArgumentParser(prog="sourcerec", description="Source-term reconstruction with sparse GMRF priors.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--workers", type=int, default=1, help="processes for MCMC chains and sweep sizes")
    p.add_argument("--out", default=None, help="output directory (default: ./out-<command>)")
    return p


def _setup_logging():
    name = os.environ.get("SOURCEREC_LOG", "error").strip().lower()
    level = LEVELS.get(name, logging.ERROR)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("sourcerec %(levelname)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False
    if name not in LEVELS:
        log.error("unknown SOURCEREC_LOG value %r, using 'error'", name)


def run(command, config, seed=None, workers=1, outdir=None):
    """Run one command and write its outputs plus ``manifest.txt``.

    Returns the list of written paths.  Raises package errors unchanged.
    """
    cfg = load_config(config)
    if seed is not None:
        cfg.values["seed"] = int(seed)
    if workers < 1:
        raise ConfigInvalid("must be at least 1", field="--workers")
    outdir = Path(outdir if outdir is not None else f"out-{command}")
    outdir.mkdir(parents=True, exist_ok=True)
    log.info("running %s with seed %d into %s", command, cfg["seed"], outdir)
    files = COMMANDS[command](cfg, outdir, workers)
    manifest = outdir / "manifest.txt"
    lines = [cfg.to_text(manifest_header(command, cfg)).rstrip("\n")]
    for f in files:
        lines.append(f"# output {Path(f).name} sha256={output.sha256(f)}")
    manifest.write_text("\n".join(lines) + "\n")
    return list(files) + [manifest]


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        run(args.command, args.config, args.seed, args.workers, args.out)
    except ConfigInvalid as exc:
        print(f"sourcerec: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"sourcerec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SourcerecError, OSError, ValueError) as exc:
        print(f"sourcerec: input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
