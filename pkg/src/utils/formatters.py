"""
Output formatting: numeric text matrices and evaluation reports.

Matrices are whitespace separated with 17 significant digits and '#' header
lines. Reports come in three renderings: terminal text, JSON and Markdown.
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, Tuple

import numpy as np

from src.errors import InvalidArgumentError


def save_matrix(path: Path, values: np.ndarray, header: str = "") -> None:
    """
    Write a matrix as numeric text.

    Args:
        path: output file
        values: 1-D or 2-D array (a vector becomes one column)
        header: single header line, written after '# '
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    np.savetxt(path, values, fmt="%.17g", header=header, comments="# ")


def load_matrix(path: Path) -> Tuple[np.ndarray, str]:
    """Read a numeric text matrix; returns (2-D values, header text without '#')."""
    path = Path(path)
    header_lines = []
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                break
            header_lines.append(line[1:].strip())
    try:
        values = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise InvalidArgumentError(f"{path}: not a numeric matrix ({exc})") from exc
    return values, " ".join(header_lines)


def save_frames(path: Path, frames: np.ndarray) -> None:
    """Trajectory frames [T + 1, n, d] as rows 'k x_1 .. x_d', k = 0 for x_T."""
    frames = np.asarray(frames, dtype=np.float64)
    K, n, d = frames.shape
    index = np.repeat(np.arange(K, dtype=np.float64), n)[:, None]
    save_matrix(path, np.hstack([index, frames.reshape(K * n, d)]),
                header=f"frames={K} n={n} d={d} first_column=frame (0 is x_T)")


def _fmt_bits(value: Any, stderr: Any = None) -> str:
    if value is None:
        return "N/A"
    if stderr is None or not np.isfinite(stderr):
        return f"{value:.4f} bits"
    return f"{value:.4f} ± {stderr:.4f} bits"


def format_terminal_report(report: Dict[str, Any]) -> str:
    """
    Format an evaluation report for terminal display.

    Args:
        report: dictionary built by the evaluate stage

    Returns:
        Formatted string for terminal output
    """
    bound = report.get("bound", {})
    importance = report.get("importance") or {}

    output = f"""
{'='*70}
EVALUATION REPORT
{'='*70}

Checkpoint: {report.get('checkpoint', 'N/A')}
Data: {report.get('data', 'N/A')} ({report.get('n', 0)} rows, d={report.get('dim', 'N/A')})
Diffusion: {report.get('kind', 'N/A')}, T={report.get('T', 'N/A')}
Evaluated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}

{'='*70}
LOWER BOUND K
{'='*70}

K: {_fmt_bits(bound.get('total_bits'), bound.get('stderr_bits'))}
  KL sum:              {bound.get('kl_sum_nats', float('nan')):.6f} nats
  H_q(x_T | x_0):      {bound.get('entropy_T_nats', float('nan')):.6f} nats
  H_q(x_1 | x_0):      {bound.get('entropy_1_nats', float('nan')):.6f} nats
  cross entropy to pi: {bound.get('cross_entropy_T_nats', float('nan')):.6f} nats
  edge term:           {bound.get('edge_term_nats', float('nan')):.6f} nats

L_null: {_fmt_bits(report.get('null_bits'))}
K - L_null: {_fmt_bits(report.get('k_minus_null_bits'))}
"""

    if importance:
        output += f"""
{'='*70}
IMPORTANCE-SAMPLED LOG LIKELIHOOD
{'='*70}

Estimate: {_fmt_bits(importance.get('mean_bits'), importance.get('stderr_bits'))}
Trajectories per datum: {importance.get('n_traj')}
Jensen ordering K <= estimate: {'OK' if report.get('jensen_ok') else 'VIOLATED'}
"""

    output += f"\n{'='*70}\n"
    return output


def save_json_report(report: Dict[str, Any], filepath: Path) -> None:
    """Save an evaluation report as JSON."""
    document = {"generated": datetime.now().isoformat(), **report}
    with open(filepath, "w") as f:
        json.dump(document, f, indent=2, default=str)


def save_markdown_report(report: Dict[str, Any], filepath: Path) -> None:
    """Save an evaluation report as Markdown."""
    bound = report.get("bound", {})
    importance = report.get("importance") or {}

    md_content = f"""# Evaluation Report: {report.get('checkpoint', 'N/A')}

**Date:** {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}

## Summary

- **Data:** {report.get('data', 'N/A')} ({report.get('n', 0)} rows)
- **Diffusion:** {report.get('kind', 'N/A')}, T={report.get('T', 'N/A')}
- **K:** {_fmt_bits(bound.get('total_bits'), bound.get('stderr_bits'))}
- **K - L_null:** {_fmt_bits(report.get('k_minus_null_bits'))}

## Bound Breakdown (nats per datum)

| Term | Value |
|---|---|
| KL sum | {bound.get('kl_sum_nats', float('nan')):.6f} |
| H_q(x_T given x_0) | {bound.get('entropy_T_nats', float('nan')):.6f} |
| H_q(x_1 given x_0) | {bound.get('entropy_1_nats', float('nan')):.6f} |
| Cross entropy to pi | {bound.get('cross_entropy_T_nats', float('nan')):.6f} |
| Edge term | {bound.get('edge_term_nats', float('nan')):.6f} |
"""

    if importance:
        md_content += f"""
## Importance-Sampled Log Likelihood

**Estimate:** {_fmt_bits(importance.get('mean_bits'), importance.get('stderr_bits'))}
**Trajectories per datum:** {importance.get('n_traj')}
**Jensen ordering:** {'holds' if report.get('jensen_ok') else 'violated beyond error bars'}
"""

    with open(filepath, "w") as f:
        f.write(md_content)


def save_bounds_table(path: Path, rows: Iterable[Tuple[int, float, float]]) -> None:
    """Entropy bounds as a matrix with columns t, upper, lower (nats)."""
    table = np.array([[t, upper, lower] for t, upper, lower in rows], dtype=np.float64).reshape(-1, 3)
    save_matrix(path, table, header="t upper_nats lower_nats")
