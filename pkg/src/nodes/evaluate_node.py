"""
Node 3: Evaluation

Scores held-out data under the trained model: the lower bound K with its
breakdown, the importance-sampled log likelihood, and K - L_null, all
reported in bits.
"""

import math
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from src.config import Config
from src.diffusion.approximators import ReverseModel
from src.diffusion.inference import estimate_batch_log_likelihood
from src.diffusion.objective import bound_terms, null_baseline
from src.errors import InvalidArgumentError, KindMismatchError
from src.state import ExperimentState
from src.tools.datasets import Dataset
from src.utils.formatters import format_terminal_report, save_json_report, save_markdown_report

# violations smaller than this many combined standard errors are noise
JENSEN_SIGMAS = 3.0


def evaluate_model(model: ReverseModel, data: Dataset, rng: np.random.Generator, n_traj: int = 10,
                   max_rows: int = 100, t_subsample: int = 0,
                   labels: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    """
    Build the evaluation report for a model on a dataset.

    Args:
        model: trained reverse model (its spec is the diffusion evaluated)
        data: evaluation data
        rng: explicit random generator
        n_traj: forward trajectories per datum for the importance estimate
        max_rows: rows used for the importance estimate (K uses every row)
        t_subsample: t values evaluated by the bound (0 = all)
        labels: checkpoint / data names for the report header

    Returns:
        Report dictionary (see utils.formatters)
    """
    spec = model.spec
    if data.diffusion_kind != spec.kind:
        raise KindMismatchError(f"checkpoint holds a {spec.kind} model, data is {data.kind}")
    if data.dim != spec.dim:
        raise InvalidArgumentError(f"checkpoint expects dimension {spec.dim}, data has {data.dim}")

    bound = bound_terms(spec, model, data.values, rng, t_subsample=t_subsample)
    null_bits = null_baseline(spec, data.values)
    rows = data.values[:max_rows]
    likelihood = estimate_batch_log_likelihood(spec, model, rows, n_traj, rng)
    mean_bits = Config.bits(likelihood.mean)
    stderr_bits = Config.bits(likelihood.stderr)

    combined = math.hypot(bound.stderr_bits, stderr_bits)
    jensen_gap = bound.total_bits - mean_bits
    report: Dict[str, Any] = {
        **(labels or {}),
        "kind": spec.kind,
        "T": spec.T,
        "dim": spec.dim,
        "n": data.n,
        "bound": bound.as_dict(),
        "importance": {
            "mean_bits": mean_bits,
            "stderr_bits": stderr_bits,
            "mean_nats": likelihood.mean,
            "stderr_nats": likelihood.stderr,
            "n_traj": n_traj,
            "rows": int(rows.shape[0]),
        },
        "null_bits": null_bits,
        "k_minus_null_bits": bound.total_bits - null_bits,
        "jensen_gap_bits": jensen_gap,
        "jensen_ok": bool(jensen_gap <= JENSEN_SIGMAS * combined),
    }
    return report


def write_report(report: Dict[str, Any], out_dir: Path) -> Dict[str, str]:
    """Write the JSON and Markdown renderings; returns their paths."""
    out_dir = Path(out_dir)
    json_path = out_dir / "evaluation.json"
    md_path = out_dir / "evaluation.md"
    save_json_report(report, json_path)
    save_markdown_report(report, md_path)
    return {"report_json": str(json_path), "report_md": str(md_path)}


def evaluate_run(state: ExperimentState) -> ExperimentState:
    """
    Evaluate the trained model on the holdout split.

    Args:
        state: Current experiment state

    Returns:
        Updated state with report
    """
    config = state["config"]
    run_dir = Path(state["run_dir"])

    print(f"\n{'='*60}")
    print("NODE 3: EVALUATION")
    print(f"{'='*60}")

    rng = np.random.default_rng(config.train.seed + 2)
    report = evaluate_model(state["model"], state["holdout_data"], rng, n_traj=config.eval_trajectories,
                            max_rows=config.eval_rows,
                            labels={"checkpoint": str(run_dir / "final.ckpt"), "data": "holdout"})
    state["report"] = report
    state.setdefault("artifacts", {}).update(write_report(report, run_dir))

    print(format_terminal_report(report))
    if not report["jensen_ok"]:
        print("⚠️  K exceeds the importance estimate beyond the combined error bars")

    return state
