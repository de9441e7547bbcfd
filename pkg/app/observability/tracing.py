"""追蹤配置模塊

使用 OpenTelemetry 為每個管線階段建立 span；未初始化時使用 no-op tracer
"""

import os
import time
from functools import wraps
from typing import Any, Mapping, Optional

from opentelemetry import trace
from opentelemetry.sdk.resources import SERVICE_NAME, SERVICE_VERSION, Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import ConsoleSpanExporter, SimpleSpanProcessor
from opentelemetry.trace import Status, StatusCode

SERVICE = "b3-estimation"

# 全局 tracer 實例
tracer: Optional[trace.Tracer] = None


def setup_tracing(
    service_name: str = SERVICE,
    service_version: str = "1.0.0",
    console_export: bool = False,
) -> None:
    """配置追蹤

    Args:
        service_name: 服務名稱
        service_version: 服務版本
        console_export: 是否輸出 span 到控制台（開發調試用）
    """
    global tracer

    resource = Resource.create({
        SERVICE_NAME: service_name,
        SERVICE_VERSION: service_version,
        "deployment.environment": os.getenv("ENVIRONMENT", "development"),
    })
    provider = TracerProvider(resource=resource)
    if console_export:
        provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter()))
    trace.set_tracer_provider(provider)

    tracer = trace.get_tracer(service_name, service_version)


def get_tracer() -> trace.Tracer:
    """獲取 tracer 實例"""
    if tracer is None:
        return trace.get_tracer(SERVICE)
    return tracer


def _state_attributes(state: Any) -> Mapping[str, Any]:
    config = getattr(state, "config", None)
    attrs = {"run.id": getattr(state, "run_id", "unknown")}
    if config is not None:
        attrs["run.mode"] = config.mode.value
    return attrs


def trace_stage(stage: str):
    """裝飾器：為管線節點添加追蹤

    使用範例：
        @trace_stage("fit")
        def fit_node(state):
            return {...}
    """
    def decorator(func):
        @wraps(func)
        def wrapper(state, *args, **kwargs):
            with get_tracer().start_as_current_span(
                f"b3.stage.{stage}",
                attributes={"stage.name": stage, **_state_attributes(state)},
            ) as span:
                start_time = time.perf_counter()
                try:
                    result = func(state, *args, **kwargs)
                    span.set_attribute("stage.execution_time_ms", (time.perf_counter() - start_time) * 1000)
                    if isinstance(result, dict) and result.get("error") is not None:
                        span.set_status(Status(StatusCode.ERROR, str(result["error"])))
                    else:
                        span.set_status(Status(StatusCode.OK))
                    return result
                except Exception as e:
                    span.record_exception(e)
                    span.set_status(Status(StatusCode.ERROR, f"Stage {stage} failed: {e}"))
                    span.set_attribute("error.type", type(e).__name__)
                    raise

        return wrapper
    return decorator
