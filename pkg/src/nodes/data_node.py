"""
Node 1: Data

Generates (or reads) the dataset named by the run configuration, splits off
the holdout set and writes both to the run directory.
"""

from pathlib import Path

import numpy as np

from src.config import RunConfig
from src.errors import KindMismatchError
from src.state import ExperimentState
from src.tools.datasets import Dataset, generate, load_dataset, save_dataset, split


def load_run_data(config: RunConfig) -> Dataset:
    """
    Dataset for a run: the configured file, or a fresh draw from the generator.

    Args:
        config: run configuration

    Returns:
        Dataset whose kind matches the configured diffusion
    """
    if config.data_file is not None:
        dataset = load_dataset(config.data_file)
    else:
        dataset = generate(config.dataset, config.n, config.train.seed)
    if dataset.diffusion_kind != config.kind:
        raise KindMismatchError(f"{dataset.kind} data cannot be modeled by {config.kind} diffusion")
    return dataset


def prepare_data(state: ExperimentState) -> ExperimentState:
    """
    Load the data and split off the holdout rows.

    Args:
        state: Current experiment state

    Returns:
        Updated state with train_data and holdout_data
    """
    config = state["config"]
    run_dir = Path(state["run_dir"])

    print(f"\n{'='*60}")
    print("NODE 1: DATA")
    print(f"{'='*60}")

    dataset = load_run_data(config)
    print(f"\n📦 Dataset: {dataset.metadata.get('generator') or config.data_file} "
          f"({dataset.n} x {dataset.dim}, {dataset.kind})")

    rng = np.random.default_rng(config.train.seed + 1)
    train_data, holdout_data = split(dataset, config.holdout, rng)
    if holdout_data.n == 0:
        holdout_data = train_data

    save_dataset(run_dir / "train.txt", train_data)
    save_dataset(run_dir / "holdout.txt", holdout_data)

    state["train_data"] = train_data
    state["holdout_data"] = holdout_data
    state.setdefault("artifacts", {})
    state["artifacts"]["train_data"] = str(run_dir / "train.txt")
    state["artifacts"]["holdout_data"] = str(run_dir / "holdout.txt")

    print("✅ Data ready")
    print(f"   Training rows: {train_data.n}")
    print(f"   Holdout rows: {holdout_data.n}")
    if dataset.factor is not None:
        print(f"   Standardization factor: {dataset.factor:.6f}")

    return state
