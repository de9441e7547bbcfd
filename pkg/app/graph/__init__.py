from .state import PipelineState
from .nodes import (
    emit_node,
    error_handler_node,
    fit_node,
    ingest_node,
    project_node,
    stage_error,
    summarize_node,
    validate_node,
)
from .build import build_graph, check_error

__all__ = [
    "PipelineState",
    "ingest_node",
    "fit_node",
    "project_node",
    "summarize_node",
    "validate_node",
    "emit_node",
    "error_handler_node",
    "stage_error",
    "build_graph",
    "check_error",
]
