"""
可觀測性測試

測試重點：
1. 日誌上下文在離開階段後恢復
2. JSON 日誌包含執行 ID 與階段
3. 階段耗時與錯誤指標
"""
import json

import pytest
from loguru import logger

from app.observability import get_metrics, set_run_context, setup_logging, stage_context, track_stage_metrics
from app.observability.logging import run_context
from app.observability.tracing import trace_stage


class TestLoggingContext:
    """日誌上下文"""

    def test_stage_context_restores(self):
        set_run_context(run_id="abc123")
        with stage_context(stage="fit", country="AAA"):
            assert run_context.get()["stage"] == "fit"
            assert run_context.get()["run_id"] == "abc123"
        assert "stage" not in run_context.get()

    def test_json_record(self, tmp_path):
        path = tmp_path / "log.jsonl"
        setup_logging(level="INFO", json_logs=True, log_file=str(path))
        try:
            set_run_context(run_id="run42")
            with stage_context(stage="ingest"):
                logger.info("Rows parsed", rows=3)
            logger.complete()
        finally:
            setup_logging(level="WARNING")
        record = json.loads(path.read_text().strip().splitlines()[-1])
        assert record["run_id"] == "run42"
        assert record["stage"] == "ingest"
        assert record["extra"]["rows"] == 3


class TestStageMetrics:
    """階段指標"""

    def test_duration_and_errors(self):
        @track_stage_metrics("unit_test_stage")
        def failing():
            raise ValueError("boom")

        @track_stage_metrics("unit_test_stage")
        def ok():
            return 1

        assert ok() == 1
        with pytest.raises(ValueError):
            failing()
        text = get_metrics()
        assert 'b3_stage_duration_seconds_count{stage="unit_test_stage"} 2.0' in text
        assert 'b3_stage_errors_total{error_type="ValueError",stage="unit_test_stage"} 1.0' in text

    def test_trace_stage_passes_result(self):
        @trace_stage("unit_test_stage")
        def node(state):
            return {"error": None, "value": state}

        assert node("x") == {"error": None, "value": "x"}
