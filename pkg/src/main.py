"""
Main entry point for the diffusion toolkit.

Subcommands: gen-data, train, sample, evaluate, conditional, bounds, pipeline.
Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures (with a
one-line diagnostic on stderr).
"""

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
from pydantic import ValidationError

from src.config import Config, load_run_config
from src.diffusion.conditioning import CoordinateMask, GaussianObservation, RSchedule, sample_conditional
from src.diffusion.inference import sample_reverse
from src.errors import DiffusionError, InvalidArgumentError, RunDirectoryLockedError
from src.nodes.bounds_node import bound_table
from src.nodes.data_node import load_run_data
from src.nodes.evaluate_node import evaluate_model, write_report
from src.nodes.train_node import train_run
from src.tools.datasets import generate, load_dataset, save_dataset, split
from src.utils.checkpoint import load_checkpoint
from src.utils.formatters import (
    format_terminal_report,
    load_matrix,
    save_bounds_table,
    save_frames,
    save_matrix,
)

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"


@contextmanager
def run_directory_lock(run_dir: Path) -> Iterator[Path]:
    """Hold ``run_dir/.lock`` for the duration of the block."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunDirectoryLockedError(f"{run_dir} is in use (remove {lock} if no run is active)")
    with os.fdopen(fd, "w") as f:
        f.write(f"{os.getpid()}\n")
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _vector(path: Path) -> np.ndarray:
    values, _ = load_matrix(path)
    return values.ravel()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    dataset = generate(args.kind, args.n, args.seed)
    if args.holdout:
        dataset, holdout = split(dataset, args.holdout, np.random.default_rng(args.seed + 1))
        save_dataset(Path(args.holdout_out), holdout)
        print(f"✅ {holdout.n} holdout rows written to {args.holdout_out}")
    save_dataset(Path(args.out), dataset)
    print(f"✅ {dataset.n} rows of {args.kind} written to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(Path(args.config))
    data = load_dataset(Path(args.data)) if args.data else load_run_data(config)
    if data.diffusion_kind != config.kind:
        raise InvalidArgumentError(f"{data.kind} data cannot be modeled by {config.kind} diffusion")
    with run_directory_lock(config.output_dir) as run_dir:
        model, log = train_run(config, data, run_dir)
    print(f"✅ Training complete: {run_dir / 'final.ckpt'}")
    if log.final_k_bits is not None:
        print(f"   Final minibatch K: {log.final_k_bits:.4f} bits")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(Path(args.ckpt))
    model = checkpoint.model
    rng = np.random.default_rng(args.seed)
    if args.frames:
        samples, frames = sample_reverse(model.spec, model, args.n, rng, keep_intermediate=True)
        save_frames(Path(args.frames), frames)
        print(f"✅ {frames.shape[0]} frames written to {args.frames}")
    else:
        samples = sample_reverse(model.spec, model, args.n, rng)
    save_matrix(Path(args.out), samples, header=f"n={samples.shape[0]} d={samples.shape[1]} source=reverse")
    print(f"✅ {samples.shape[0]} samples written to {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(Path(args.ckpt))
    data = load_dataset(Path(args.data))
    rng = np.random.default_rng(args.seed)
    report = evaluate_model(checkpoint.model, data, rng, n_traj=args.n_traj, max_rows=args.rows,
                            t_subsample=args.t_subsample, labels={"checkpoint": args.ckpt, "data": args.data})
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.ckpt).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = write_report(report, out_dir)
    print(format_terminal_report(report))
    if not report["jensen_ok"]:
        print("⚠️  K exceeds the importance estimate beyond the combined error bars")
    print(f"✅ JSON report saved to: {paths['report_json']}")
    print(f"✅ Markdown report saved to: {paths['report_md']}")
    return 0


def cmd_conditional(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(Path(args.ckpt))
    model = checkpoint.model
    observed = _vector(Path(args.obs))
    if args.mask:
        factor = CoordinateMask(_vector(Path(args.mask)), observed)
    elif args.noise_var is not None:
        factor = GaussianObservation(observed, args.noise_var)
    else:
        raise InvalidArgumentError("conditional needs --mask or --noise-var alongside --obs")
    rng = np.random.default_rng(args.seed)
    samples, ledger = sample_conditional(model.spec, model, factor, RSchedule(args.schedule), rng, n=args.n,
                                         resample=not args.no_resample)
    save_matrix(Path(args.out), samples, header=f"n={samples.shape[0]} d={samples.shape[1]} source=conditional")
    print(f"✅ {samples.shape[0]} conditioned samples written to {args.out}")
    if ledger.resampled_at:
        print(f"   Resampled {len(ledger.resampled_at)} times")
    return 0


def cmd_bounds(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(Path(args.ckpt))
    data = load_dataset(Path(args.data))
    table = bound_table(checkpoint.spec, data.values)
    save_bounds_table(Path(args.out), ((r.t, r.upper, r.lower) for r in table))
    print(f"✅ Entropy bounds for {len(table)} steps written to {args.out}")
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    from src.graph import run_experiment

    config = load_run_config(Path(args.config))
    print(f"""
╔══════════════════════════════════════════════════════════════════════╗
║                                                                      ║
║          DIFFUSION EXPERIMENT PIPELINE                               ║
║                                                                      ║
╚══════════════════════════════════════════════════════════════════════╝

Experiment: {config.name}
Run directory: {config.output_dir}
""")
    with run_directory_lock(config.output_dir) as run_dir:
        final_state = run_experiment(config, run_dir)
    if final_state.get("status") == "diverged":
        raise DiffusionError(final_state.get("error") or "training diverged")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpm",
        description="Diffusion probabilistic models: train, sample, evaluate and condition",
    )
    parser.add_argument("--log-level", default=None, help="Logging level (default from LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate a toy dataset")
    p.add_argument("--kind", required=True, choices=["heartbeat", "swiss_roll"], help="Dataset generator")
    p.add_argument("--n", type=int, required=True, help="Number of rows")
    p.add_argument("--seed", type=int, default=Config.DEFAULT_SEED, help="Random seed")
    p.add_argument("--out", required=True, help="Output dataset file")
    p.add_argument("--holdout", type=int, default=0, help="Rows to split off as holdout")
    p.add_argument("--holdout-out", help="Holdout dataset file (required with --holdout)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="Train a model from a run config")
    p.add_argument("--config", required=True, help="Run config file (key=value)")
    p.add_argument("--data", help="Dataset file (overrides the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="Draw samples from a checkpoint")
    p.add_argument("--ckpt", required=True, help="Checkpoint file")
    p.add_argument("--n", type=int, default=1000, help="Number of samples")
    p.add_argument("--seed", type=int, default=Config.DEFAULT_SEED, help="Random seed")
    p.add_argument("--out", required=True, help="Output samples file")
    p.add_argument("--frames", help="Also write every intermediate state to this file")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="Bound, likelihood estimate and K - L_null on a dataset")
    p.add_argument("--ckpt", required=True, help="Checkpoint file")
    p.add_argument("--data", required=True, help="Dataset file")
    p.add_argument("--n-traj", type=int, default=10, help="Forward trajectories per datum")
    p.add_argument("--rows", type=int, default=100, help="Rows used by the importance estimate")
    p.add_argument("--t-subsample", type=int, default=0, help="t values evaluated by the bound (0 = all)")
    p.add_argument("--seed", type=int, default=Config.DEFAULT_SEED, help="Random seed")
    p.add_argument("--out-dir", help="Directory for the JSON and Markdown reports")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("conditional", help="Sample from the model multiplied by an observation")
    p.add_argument("--ckpt", required=True, help="Checkpoint file")
    p.add_argument("--obs", required=True, help="Observed values (numeric vector file)")
    p.add_argument("--mask", help="0/1 mask of known coordinates (inpainting)")
    p.add_argument("--noise-var", type=float, help="Observation noise variance (denoising)")
    p.add_argument("--schedule", default="constant", choices=["constant", "annealed"], help="r schedule")
    p.add_argument("--no-resample", action="store_true", help="Run the plain normalized chain")
    p.add_argument("--n", type=int, default=100, help="Number of samples")
    p.add_argument("--seed", type=int, default=Config.DEFAULT_SEED, help="Random seed")
    p.add_argument("--out", required=True, help="Output samples file")
    p.set_defaults(func=cmd_conditional)

    p = sub.add_parser("bounds", help="Per-step entropy bounds")
    p.add_argument("--ckpt", required=True, help="Checkpoint file")
    p.add_argument("--data", required=True, help="Dataset file")
    p.add_argument("--out", required=True, help="Output table file")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("pipeline", help="Run data, train, evaluate, bounds and sample in one run directory")
    p.add_argument("--config", required=True, help="Run config file (key=value)")
    p.set_defaults(func=cmd_pipeline)

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "gen-data" and args.holdout and not args.holdout_out:
        parser.print_usage(sys.stderr)
        print("dpm gen-data: error: --holdout needs --holdout-out", file=sys.stderr)
        return 2

    Config.configure_logging(args.log_level)
    try:
        return args.func(args)
    except (DiffusionError, OSError, ValidationError) as exc:
        message = " ".join(str(exc).split())
        print(f"❌ {type(exc).__name__}: {message}", file=sys.stderr)
        logger.debug("command failed", exc_info=True)
        return 1


def main():
    """Main execution function."""
    sys.exit(run())


if __name__ == "__main__":
    main()
