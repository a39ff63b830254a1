"""Command-line entry point for the discrete spatial diffusion engine."""

import argparse
import sys
import uuid
from pathlib import Path
from typing import List, Optional

import torch
from pydantic import ValidationError

from . import __version__
from .cli import commands
from .core.config import configure
from .core.errors import DSDError
from .core.logging import get_logger, set_run_id, setup_logging
from .models.lattice import BoundaryCondition

EPILOG = """\
Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
All randomness derives from --seed through keyed streams, so output does not
depend on --threads. Environment variables are not read; flags only.
"""


def _boundary_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--boundary",
        choices=[b.value for b in BoundaryCondition],
        default=BoundaryCondition.PERIODIC.value,
        help="lattice edge rule (default: periodic)",
    )


def _rate_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rate", type=float, default=None, help="unit jump rate r (default: 120)")


def _schedule_flags(parser: argparse.ArgumentParser, default: str = "logit") -> None:
    group = parser.add_argument_group("schedule")
    group.add_argument(
        "--schedule",
        default=default,
        help="logit | poly | cosine, or a full spec such as 'logit:T=2000,tau1=7.5,tau2=2.5'",
    )
    group.add_argument("--T", type=int, default=None, help="number of observation times")
    group.add_argument("--tau1", type=float, default=None, help="logit schedule tau_1 (default: 7.5)")
    group.add_argument("--tau2", type=float, default=None, help="logit schedule tau_2 (default: 2.5)")
    group.add_argument("--n", type=int, default=None, help="polynomial schedule exponent")


def _sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--eps", type=float, default=None, help="CFL tolerance in (0, 1) (default: 0.15)")
    parser.add_argument("--max-steps", type=int, default=None, help="sampler safety bound")


def build_parser() -> argparse.ArgumentParser:
    """Assemble the ``dsd`` parser with global flags and one subparser per command."""
    parser = argparse.ArgumentParser(
        prog="dsd",
        description="Particle-conserving discrete spatial diffusion on pixel lattices.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ERROR or CRITICAL")
    parser.add_argument("--log-format", choices=["console", "json"], default=None)
    parser.add_argument("--threads", type=int, default=None, help="worker cap for parallel sections")
    parser.add_argument("--kernel-cache", type=Path, default=None, help="directory for kernel dumps")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("kernel", help="compute and dump a transition kernel")
    _boundary_flag(p)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    _rate_flag(p)
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=commands.cmd_kernel)

    p = sub.add_parser("corrupt", help="corrupt an image to observation time t_k")
    p.add_argument("--in", dest="input", type=Path, required=True, help="PGM/PPM input")
    _schedule_flags(p)
    p.add_argument("--k", type=int, required=True, help="observation index, 0 copies the input")
    _rate_flag(p)
    _boundary_flag(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ledger-out", type=Path, default=None, help="particle ledger (.npz)")
    p.set_defaults(handler=commands.cmd_corrupt)

    p = sub.add_parser("calibrate", help="mean SSIM degradation curve of a schedule")
    p.add_argument("--data", type=Path, required=True, help="directory of *.pgm / *.ppm files")
    _schedule_flags(p)
    _rate_flag(p)
    _boundary_flag(p)
    p.add_argument("--samples", type=int, default=None, help="use only the first N images")
    p.add_argument("--data-range", type=float, default=None, help="SSIM dynamic range (default: largest file maxval)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="CSV k,t_k,mean_ssim,stderr")
    p.add_argument("--schedule-out", type=Path, default=None, help="CSV k,t_k")
    p.set_defaults(handler=commands.cmd_calibrate)

    p = sub.add_parser("train", help="train the toy convolutional rate model")
    p.add_argument("--data", type=Path, required=True, help="directory of *.pgm / *.ppm files")
    p.add_argument("--loss", choices=["l1", "likelihood"], default="l1")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    _schedule_flags(p)
    _rate_flag(p)
    _boundary_flag(p)
    p.add_argument("--ckpt-out", type=Path, required=True)
    p.add_argument("--history-out", type=Path, default=None, help="CSV iter,loss")
    p.set_defaults(handler=commands.cmd_train)

    p = sub.add_parser("generate", help="sample images with exact per-channel totals")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt", type=Path, help="trained model checkpoint")
    source.add_argument("--oracle-ledger", type=Path, help="ledger whose origins the oracle reconstructs")
    p.add_argument("--totals", default=None, help="per-channel totals, e.g. 64 or 900,800,700")
    p.add_argument("--totals-from", type=Path, default=None, help="dataset whose totals --quantile picks from")
    p.add_argument("--quantile", type=float, default=0.5, help="quantile of the dataset totals (default: 0.5)")
    p.add_argument("--width", type=int, default=None, help="default: checkpoint training width")
    p.add_argument("--height", type=int, default=None, help="default: checkpoint training height")
    _sampler_flags(p)
    _rate_flag(p)
    _boundary_flag(p)
    p.add_argument("--n", type=int, default=1, help="number of images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--trace", type=Path, default=None, help="per-step CSV trace")
    p.set_defaults(handler=commands.cmd_generate)

    p = sub.add_parser("inpaint", help="regenerate the unmasked region with exact totals")
    p.add_argument("--partial", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True, help="PGM, nonzero pixels are frozen")
    p.add_argument("--region-totals", required=True, help="per-channel totals of the free region")
    p.add_argument("--ckpt", type=Path, required=True)
    _sampler_flags(p)
    _rate_flag(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=commands.cmd_inpaint)

    p = sub.add_parser("metrics", help="porosity, two-point correlation and conservation audit")
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--reference", type=Path, default=None)
    p.add_argument("--max-lag", type=int, default=None)
    p.add_argument("--totals", default=None, help="audit every image against these totals")
    p.add_argument(
        "--binarize",
        choices=["clip", "strict"],
        default="clip",
        help="stacked pixels count as pore (clip) or are rejected (strict)",
    )
    _boundary_flag(p)
    p.add_argument("--out", type=Path, required=True, help="CSV lag,S2")
    p.set_defaults(handler=commands.cmd_metrics)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, configure settings and logging, run the handler and map failures to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "boundary", None) is not None:
        args.boundary = BoundaryCondition(args.boundary)

    try:
        settings = configure(
            log_level=args.log_level,
            log_format=args.log_format,
            threads=args.threads,
            kernel_cache_dir=args.kernel_cache,
        )
    except ValidationError as e:
        parser.print_usage(sys.stderr)
        print(f"dsd: error: {e.errors()[0]['msg']}", file=sys.stderr)
        return 2

    setup_logging()
    set_run_id(uuid.uuid4().hex[:12])
    torch.set_num_threads(settings.threads)
    logger = get_logger(__name__)
    logger.debug("Starting command", command=args.command, version=__version__)

    try:
        return args.handler(args)
    except DSDError as e:
        logger.error("Command failed", command=args.command, error=str(e), error_type=type(e).__name__)
        print(f"dsd: error: {e}", file=sys.stderr)
        return e.exit_code
    except (ValidationError, ValueError) as e:
        logger.error("Invalid arguments", command=args.command, error=str(e))
        print(f"dsd: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        logger.error("I/O failure", command=args.command, error=str(e))
        print(f"dsd: error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
