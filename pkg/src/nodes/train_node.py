"""
Node 2: Training

Builds the diffusion spec and the reverse model from the run configuration,
trains by gradient ascent on the bound and checkpoints along the way.
"""

from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from src.config import RunConfig
from src.diffusion.approximators import ReverseModel, build_mlp_model, build_rbf_model
from src.diffusion.kernels import DiffusionSpec, make_schedule
from src.diffusion.objective import TrainingLog, train
from src.errors import TrainingDivergedError
from src.state import ExperimentState
from src.tools.datasets import Dataset
from src.utils.checkpoint import Checkpoint, save_checkpoint


def build_spec(config: RunConfig, dim: int) -> DiffusionSpec:
    schedule = make_schedule(config.kind, config.T, beta1=config.beta1, mode=config.schedule)
    return DiffusionSpec(schedule=schedule, dim=dim, equilibrium_rate=config.equilibrium_rate)


def build_model(config: RunConfig, spec: DiffusionSpec, data: np.ndarray) -> ReverseModel:
    """Fresh reverse model; initialization draws come from the training seed."""
    rng = np.random.default_rng(config.train.seed)
    model_config = config.model
    if model_config.architecture == "rbf":
        return build_rbf_model(spec, data, rng, hidden=model_config.rbf_hidden, readout=model_config.readout,
                               bump_count=model_config.bump_count,
                               use_readout_transform=model_config.readout_transform)
    return build_mlp_model(spec, rng, hidden_sizes=model_config.mlp_hidden, readout=model_config.readout,
                           bump_count=model_config.bump_count, use_readout_transform=model_config.readout_transform)


def train_run(config: RunConfig, data: Dataset, run_dir: Path) -> Tuple[ReverseModel, TrainingLog]:
    """
    Train a model for ``config`` on ``data`` and write its artifacts.

    Writes step_<k>.ckpt every checkpoint interval, final.ckpt and
    train_log.csv. On divergence the last good model goes to
    diverged.ckpt before the error propagates.
    """
    run_dir = Path(run_dir)
    spec = build_spec(config, data.dim)
    model = build_model(config, spec, data.values)

    def on_checkpoint(step: int, current: ReverseModel, log: TrainingLog) -> None:
        save_checkpoint(run_dir / f"step_{step}.ckpt",
                        Checkpoint(model=current, step=step, seed=config.train.seed, factor=data.factor))
        log.write(run_dir / "train_log.csv")

    try:
        model, log = train(spec, model, data.values, config.train, on_checkpoint=on_checkpoint)
    except TrainingDivergedError as exc:
        if exc.last_good is not None:
            save_checkpoint(run_dir / "diverged.ckpt",
                            Checkpoint(model=exc.last_good, step=exc.step - 1, seed=config.train.seed,
                                       factor=data.factor))
        if exc.log is not None:
            exc.log.write(run_dir / "train_log.csv")
        raise

    save_checkpoint(run_dir / "final.ckpt",
                    Checkpoint(model=model, step=config.train.steps, seed=config.train.seed, factor=data.factor))
    log.write(run_dir / "train_log.csv")
    return model, log


def train_model(state: ExperimentState) -> ExperimentState:
    """
    Train the reverse model on the training split.

    Args:
        state: Current experiment state

    Returns:
        Updated state with model, training_log and status
    """
    config = state["config"]
    run_dir = Path(state["run_dir"])

    print(f"\n{'='*60}")
    print("NODE 2: TRAINING")
    print(f"{'='*60}")
    print(f"\n🏋️  {config.model.architecture} model, {config.kind} diffusion, T={config.T}, "
          f"{config.train.steps} steps")

    try:
        model, log = train_run(config, state["train_data"], run_dir)
    except TrainingDivergedError as exc:
        print(f"\n❌ Training diverged: {exc}")
        state["status"] = "diverged"
        state["error"] = str(exc)
        state["model"] = exc.last_good
        state["training_log"] = exc.log
        return state

    state["model"] = model
    state["training_log"] = log
    state["status"] = "trained"
    state.setdefault("artifacts", {})
    state["artifacts"]["checkpoint"] = str(run_dir / "final.ckpt")
    state["artifacts"]["training_log"] = str(run_dir / "train_log.csv")

    final: Optional[float] = log.final_k_bits
    print("✅ Training complete")
    if final is not None:
        print(f"   Final minibatch K: {final:.4f} bits")

    return state


def route_after_training(state: ExperimentState) -> str:
    """Stop the workflow after a diverged run."""
    if state.get("status") == "diverged":
        return "__end__"
    return "evaluate"
