"""可觀測性模塊：結構化日誌、追蹤、度量指標收集"""

from .logging import setup_logging, get_logger, set_run_context, stage_context
from .tracing import setup_tracing, trace_stage
from .metrics import registry, track_stage_metrics, write_metrics, get_metrics

__all__ = [
    "setup_logging",
    "get_logger",
    "set_run_context",
    "stage_context",
    "setup_tracing",
    "trace_stage",
    "registry",
    "track_stage_metrics",
    "write_metrics",
    "get_metrics",
]
