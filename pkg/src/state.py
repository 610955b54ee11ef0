"""
State management for the experiment workflow.

This module defines the state schema that flows through all nodes of the
experiment graph.
"""

from typing import Any, Dict, List, Optional

from typing_extensions import TypedDict

from src.config import RunConfig
from src.diffusion.approximators import ReverseModel
from src.diffusion.objective import TrainingLog
from src.tools.datasets import Dataset


class ExperimentState(TypedDict, total=False):
    """
    State object that flows through the experiment graph.

    Each node reads from and writes to this state as the run progresses
    through the workflow.
    """

    # Input
    config: RunConfig
    run_dir: str

    # Node 1: Data
    train_data: Optional[Dataset]
    holdout_data: Optional[Dataset]

    # Node 2: Training
    model: Optional[ReverseModel]
    training_log: Optional[TrainingLog]
    status: str  # "running", "trained" or "diverged"

    # Node 3: Evaluation
    report: Optional[Dict[str, Any]]

    # Node 4: Entropy bounds
    bounds: Optional[List[Dict[str, float]]]

    # Node 5: Samples
    samples: Optional[Any]

    # Metadata
    artifacts: Dict[str, str]
    error: Optional[str]
