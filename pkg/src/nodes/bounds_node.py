"""
Node 4: Entropy bounds

Tabulates the closed-form bounds on the reverse-step entropy for every t.
"""

from pathlib import Path
from typing import List

import numpy as np

from src.diffusion.inference import EntropyBoundReport, entropy_bounds
from src.diffusion.kernels import DiffusionSpec
from src.errors import InvalidArgumentError, UnsupportedOperationError
from src.state import ExperimentState
from src.utils.formatters import save_bounds_table


def bound_table(spec: DiffusionSpec, data: np.ndarray) -> List[EntropyBoundReport]:
    """Entropy bounds for t = 2..T."""
    return [entropy_bounds(spec, t, data) for t in range(2, spec.T + 1)]


def compute_bounds(state: ExperimentState) -> ExperimentState:
    """
    Compute and save the entropy-bound table.

    Args:
        state: Current experiment state

    Returns:
        Updated state with bounds
    """
    run_dir = Path(state["run_dir"])
    spec = state["model"].spec

    print(f"\n{'='*60}")
    print("NODE 4: ENTROPY BOUNDS")
    print(f"{'='*60}")

    try:
        table = bound_table(spec, state["train_data"].values)
    except (UnsupportedOperationError, InvalidArgumentError) as exc:
        print(f"\n⚠️  Skipped: {exc}")
        state["bounds"] = []
        return state

    path = run_dir / "entropy_bounds.txt"
    save_bounds_table(path, ((r.t, r.upper, r.lower) for r in table))
    state["bounds"] = [{"t": r.t, "upper": r.upper, "lower": r.lower} for r in table]
    state.setdefault("artifacts", {})["entropy_bounds"] = str(path)

    widest = max(table, key=lambda r: r.gap) if table else None
    print(f"✅ {len(table)} steps tabulated")
    if widest is not None:
        print(f"   Widest gap: {widest.gap:.4f} nats at t={widest.t}")

    return state
