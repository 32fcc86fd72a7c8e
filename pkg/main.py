import os
import sys
import logging
import json
import argparse
from pathlib import Path

# Add project root to path to ensure modules are found
current_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, current_dir)

from utils.config import get_artifact_root, get_config
from utils.errors import ConfigurationError, FocusError


# Set up logging
def setup_logging(log_level=logging.INFO, log_file=None):
    """Set up logging configuration"""
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    handlers = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=log_level, format=log_format, handlers=handlers, force=True)
    logger = logging.getLogger(__name__)
    logger.info("Logging initialized")
    return logger


# Parse command line arguments
def parse_args(argv=None):
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(description="Object-centric exploration experiments")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run an experiment configuration")
    run.add_argument("--config", type=str, help="Experiment configuration (JSON)")
    run.add_argument("--seed", type=int, default=None, help="Run only this seed")
    run.add_argument("--resume", type=str, default=None, help="Continue the run stored in this directory")
    run.add_argument("--root", type=str, default=None, help="Artifact root (default: $FOCUS_ARTIFACT_ROOT)")
    run.add_argument("--out", type=str, default=None, help="Exact run directory instead of a timestamped one")
    run.add_argument("--set", type=str, nargs="*", default=[], metavar="KEY=VALUE",
                     help="Override dotted configuration keys, values parsed as JSON")

    recon = commands.add_parser("recon", help="Dump reconstructions of a recorded episode")
    recon.add_argument("--ckpt", type=str, required=True, help="Checkpoint file")
    recon.add_argument("--episode", type=str, required=True, help="Episode .npz file from a replay directory")
    recon.add_argument("--out", type=str, required=True, help="Output directory")
    recon.add_argument("--baseline", type=str, default=None, help="Optional checkpoint for a baseline row")
    recon.add_argument("--frames", type=int, default=8, help="Number of timesteps in the grid")

    report = commands.add_parser("report", help="Summary table over several runs")
    report.add_argument("--runs", type=str, nargs="+", required=True, help="Run directories")
    report.add_argument("--out", type=str, required=True, help="Output CSV")

    args = parser.parse_args(argv)
    if args.command == "run" and not (args.config or args.resume):
        parser.error("run needs --config or --resume")
    return args


def log_file_for(args):
    """run.log goes next to the artifacts a command writes"""
    if args.command == "run":
        if args.resume or args.out:
            return Path(args.resume or args.out) / "run.log"
        return (Path(args.root) if args.root else get_artifact_root()) / "run.log"
    if args.command == "recon":
        return Path(args.out) / "run.log"
    return Path(args.out).parent / "run.log"


def apply_overrides(config, assignments):
    """Apply KEY=VALUE pairs to a configuration"""
    for assignment in assignments:
        key, sep, raw = assignment.partition("=")
        if not sep:
            raise ConfigurationError(f"override must look like KEY=VALUE, got {assignment!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        config.set(key, value)


# Main function
def main(argv=None):
    """Main application entry point"""
    args = parse_args(argv)

    # Setup logging
    log_level = logging.DEBUG if args.debug else logging.INFO
    logger = setup_logging(log_level, log_file_for(args))

    try:
        # Torch-heavy imports after logging is configured
        from modules.experiment import build_report, run
        from modules.reports import dump_reconstructions

        if args.command == "run":
            config = get_config(args.config) if args.config else None
            if config is not None:
                apply_overrides(config, args.set)
            run_dir = run(config, seed=args.seed, resume=args.resume, root=args.root, run_dir=args.out)
            logger.info(f"Artifacts written to {run_dir}")
        elif args.command == "recon":
            grid, errors = dump_reconstructions(args.ckpt, args.episode, args.out, args.frames, args.baseline)
            logger.info(f"Reconstructions written to {grid} and {errors}")
        else:
            table = build_report(args.runs)
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            table.to_csv(args.out, index=False)
            logger.info(f"Report written to {args.out}")
    except FocusError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
