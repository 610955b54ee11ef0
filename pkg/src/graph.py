"""
LangGraph workflow for a diffusion experiment.

This module defines the graph structure connecting the experiment stages:
data -> train -> evaluate -> bounds -> sample, ending early when training
diverges.
"""

from pathlib import Path

from langgraph.graph import END, StateGraph

from src.config import RunConfig
from src.nodes.bounds_node import compute_bounds
from src.nodes.data_node import prepare_data
from src.nodes.evaluate_node import evaluate_run
from src.nodes.sample_node import draw_samples
from src.nodes.train_node import route_after_training, train_model
from src.state import ExperimentState


def create_experiment_graph():
    """
    Create the experiment workflow graph.

    Returns:
        Compiled LangGraph StateGraph
    """
    workflow = StateGraph(ExperimentState)

    workflow.add_node("data", prepare_data)
    workflow.add_node("train", train_model)
    workflow.add_node("evaluate", evaluate_run)
    workflow.add_node("bounds", compute_bounds)
    workflow.add_node("sample", draw_samples)

    workflow.set_entry_point("data")
    workflow.add_edge("data", "train")

    # A diverged run has nothing worth evaluating
    workflow.add_conditional_edges(
        "train",
        route_after_training,
        {
            "evaluate": "evaluate",
            "__end__": END,
        },
    )

    workflow.add_edge("evaluate", "bounds")
    workflow.add_edge("bounds", "sample")
    workflow.add_edge("sample", END)

    return workflow.compile()


def run_experiment(config: RunConfig, run_dir: Path) -> ExperimentState:
    """
    Run every stage of an experiment in one run directory.

    Args:
        config: run configuration
        run_dir: existing directory receiving all artifacts

    Returns:
        Final experiment state
    """
    app = create_experiment_graph()

    initial_state = ExperimentState(
        config=config,
        run_dir=str(run_dir),
        train_data=None,
        holdout_data=None,
        model=None,
        training_log=None,
        status="running",
        report=None,
        bounds=None,
        samples=None,
        artifacts={},
        error=None,
    )

    return app.invoke(initial_state)
