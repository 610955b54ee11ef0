"""
Node 5: Samples

Draws from the trained model and compares the draws with held-out data.
"""

from pathlib import Path
from typing import Any, Dict

import numpy as np

from src.diffusion.approximators import ReverseModel
from src.diffusion.inference import energy_distance, energy_distance_null, sample_reverse
from src.nodes.evaluate_node import write_report
from src.state import ExperimentState
from src.tools.datasets import Dataset, is_heartbeat
from src.utils.formatters import save_matrix

NULL_DRAWS = 100


def sample_quality(model: ReverseModel, samples: np.ndarray, reference: Dataset,
                   rng: np.random.Generator) -> Dict[str, Any]:
    """
    Compare samples with reference data.

    Continuous data: energy distance against a resampled data-vs-data null
    (95th percentile). Binary heartbeat data: fraction of exact pulse sequences.
    """
    if model.spec.kind == "binomial":
        return {"exact_heartbeat_fraction": float(np.mean(is_heartbeat(samples)))}
    n = min(samples.shape[0], reference.n // 2)
    if n < 2:
        return {}
    statistic = energy_distance(samples[:n], reference.values[rng.permutation(reference.n)[:n]])
    null = energy_distance_null(reference.values, n, NULL_DRAWS, rng)
    threshold = float(np.quantile(null, 0.95))
    return {"energy_distance": statistic, "null_q95": threshold, "passes": bool(statistic < threshold)}


def draw_samples(state: ExperimentState) -> ExperimentState:
    """
    Sample the trained model and save the draws.

    Args:
        state: Current experiment state

    Returns:
        Updated state with samples
    """
    config = state["config"]
    run_dir = Path(state["run_dir"])
    model = state["model"]

    print(f"\n{'='*60}")
    print("NODE 5: SAMPLES")
    print(f"{'='*60}")

    rng = np.random.default_rng(config.train.seed + 3)
    samples = sample_reverse(model.spec, model, config.sample_count, rng)
    path = run_dir / "samples.txt"
    save_matrix(path, samples, header=f"n={samples.shape[0]} d={samples.shape[1]} source=reverse")
    state["samples"] = samples
    state.setdefault("artifacts", {})["samples"] = str(path)

    quality = sample_quality(model, samples, state["holdout_data"], rng)
    if state.get("report") is not None:
        state["report"]["samples"] = quality
        write_report(state["report"], run_dir)

    print(f"✅ {samples.shape[0]} samples written to {path}")
    for key, value in quality.items():
        print(f"   {key}: {value}")

    return state
