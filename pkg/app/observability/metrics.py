"""度量指標收集模塊

使用 prometheus-client 收集估計管線的效能與收斂指標。
批次作業不啟動 HTTP 服務器，改以 textfile 格式寫出（node_exporter textfile collector）。
"""

import time
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Mapping, Union

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, Info
from prometheus_client import generate_latest, write_to_textfile

# 自定義註冊表，隔離預設的 process/platform 指標
registry = CollectorRegistry()

# === 管線階段指標 ===
stage_duration = Histogram(
    "b3_stage_duration_seconds",
    "Duration of pipeline stages in seconds",
    ["stage"],
    buckets=(0.1, 0.5, 1.0, 5.0, 10.0, 30.0, 60.0, 300.0, 900.0, 1800.0, 3600.0),
    registry=registry,
)

stage_error_counter = Counter(
    "b3_stage_errors_total",
    "Total number of errors in pipeline stages",
    ["stage", "error_type"],
    registry=registry,
)

# === 資料匯入指標 ===
rows_rejected_counter = Counter(
    "b3_rows_rejected_total",
    "Observation rows rejected during ingestion",
    ["reason"],
    registry=registry,
)

observations_gauge = Gauge(
    "b3_observations",
    "Observations entering the model",
    registry=registry,
)

# === 抽樣器指標 ===
acceptance_rate = Gauge(
    "b3_sampler_acceptance_rate",
    "Mean post-burn-in acceptance rate per block type",
    ["block"],
    registry=registry,
)

retained_draws = Gauge(
    "b3_sampler_retained_draws",
    "Retained draws per chain",
    ["mode"],
    registry=registry,
)

rhat_max = Gauge(
    "b3_rhat_max",
    "Largest Gelman-Rubin statistic over reported parameters",
    registry=registry,
)

# === 系統資訊 ===
run_info = Info(
    "b3_run",
    "B3 estimation run information",
    registry=registry,
)


def set_run_info(**labels: Any) -> None:
    run_info.info({k: str(v) for k, v in labels.items()})


def record_acceptance(rates: Mapping[str, float]) -> None:
    for block, rate in rates.items():
        acceptance_rate.labels(block=block).set(rate)


def track_stage_metrics(stage: str):
    """裝飾器：追蹤管線階段耗時與錯誤

    使用範例：
        @track_stage_metrics("fit")
        def fit_node(state):
            return {...}
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            except Exception as e:
                stage_error_counter.labels(stage=stage, error_type=type(e).__name__).inc()
                raise
            finally:
                stage_duration.labels(stage=stage).observe(time.perf_counter() - start_time)

        return wrapper
    return decorator


def get_metrics() -> str:
    """獲取當前的 Prometheus 指標（Prometheus 文字格式）"""
    return generate_latest(registry).decode("utf-8")


def write_metrics(path: Union[str, Path]) -> None:
    """將指標寫出為 textfile"""
    write_to_textfile(str(path), registry)
