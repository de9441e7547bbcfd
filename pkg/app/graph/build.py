from __future__ import annotations

from langgraph.graph import END, START, StateGraph

from src.services.export_service import ArtifactWriter

from .nodes import (
    emit_node,
    error_handler_node,
    fit_node,
    ingest_node,
    project_node,
    summarize_node,
    validate_node,
)
from .state import PipelineState


def check_error(state: PipelineState) -> str:
    """檢查狀態中是否有錯誤"""
    if state.error:
        return "error_handler"
    return "continue"


def after_summarize(state: PipelineState) -> str:
    if state.error:
        return "error_handler"
    return "validate" if state.validating else "emit"


def build_graph(*, writer: ArtifactWriter):
    """
    組成估計管線：ingest → fit → project → summarize → (validate) → emit。
    任何階段失敗時經由條件邊進入 error_handler。

    writer 由外部注入，負責追蹤與清除輸出檔案。
    批次執行不保存 checkpoint。
    """
    graph = StateGraph(PipelineState)

    graph.add_node("ingest", ingest_node)
    graph.add_node("fit", fit_node)
    graph.add_node("project", project_node)
    graph.add_node("summarize", summarize_node)
    graph.add_node("validate", validate_node)
    graph.add_node("emit", lambda s: emit_node(s, writer=writer))
    graph.add_node("error_handler", lambda s: error_handler_node(s, writer=writer))

    graph.add_edge(START, "ingest")
    for stage, nxt in (("ingest", "fit"), ("fit", "project"), ("project", "summarize"), ("validate", "emit")):
        graph.add_conditional_edges(
            stage,
            check_error,
            {
                "continue": nxt,
                "error_handler": "error_handler",
            },
        )
    graph.add_conditional_edges(
        "summarize",
        after_summarize,
        {
            "validate": "validate",
            "emit": "emit",
            "error_handler": "error_handler",
        },
    )
    graph.add_conditional_edges(
        "emit",
        check_error,
        {
            "continue": END,
            "error_handler": "error_handler",
        },
    )
    graph.add_edge("error_handler", END)

    return graph.compile()
