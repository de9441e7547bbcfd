"""結構化日誌配置模塊

使用 loguru 實現結構化日誌，包含執行 ID、管線階段、國家代碼等上下文資訊
"""

import sys
import json
import uuid
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Any, Dict, Iterator, Optional

from loguru import logger

# 使用 ContextVar 存儲執行級別的上下文
run_context: ContextVar[Dict[str, Any]] = ContextVar("run_context", default={})

_CONTEXT_KEYS = ("run_id", "stage", "country")


def serialize_record(record: Dict[str, Any]) -> str:
    """將日誌記錄序列化為 JSON 格式"""
    log_entry = {
        "timestamp": record["time"].isoformat(),
        "level": record["level"].name,
        "message": record["message"],
        "module": record["name"],
        "function": record["function"],
        "line": record["line"],
    }

    ctx = run_context.get()
    for key in _CONTEXT_KEYS:
        if ctx.get(key) is not None:
            log_entry[key] = ctx[key]

    extra = {k: v for k, v in record["extra"].items() if k not in ("serialized", *_CONTEXT_KEYS)}
    if extra:
        log_entry["extra"] = extra

    if record.get("exception"):
        exc = record["exception"]
        log_entry["exception"] = {
            "type": exc.type.__name__ if exc.type else None,
            "value": str(exc.value),
        }

    return json.dumps(log_entry, ensure_ascii=False, default=str)


def _patch_record(record: Dict[str, Any]) -> None:
    ctx = run_context.get()
    for key in _CONTEXT_KEYS:
        record["extra"][key] = ctx.get(key, "-")
    record["extra"]["serialized"] = serialize_record(record)


def setup_logging(
    level: str = "INFO",
    json_logs: bool = False,
    log_file: Optional[str] = None,
) -> None:
    """配置結構化日誌

    Args:
        level: 日誌級別 (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        json_logs: 是否使用 JSON 格式輸出（批次作業收集用）
        log_file: 日誌文件路徑（可選）
    """
    logger.remove()
    logger.configure(patcher=_patch_record)

    if json_logs:
        format_string = "{extra[serialized]}\n"
    else:
        format_string = (
            "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | "
            "<level>{level: <8}</level> | "
            "<cyan>{extra[run_id]}</cyan> | "
            "<cyan>{extra[stage]}</cyan> | "
            "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> | "
            "<level>{message}</level>\n"
        )

    # 日誌輸出到 stderr，stdout 保留給 CLI 摘要
    logger.add(sys.stderr, format=format_string, level=level, colorize=not json_logs)

    if log_file:
        logger.add(
            log_file,
            format=format_string,
            level=level,
            rotation="100 MB",
            retention="7 days",
            compression="zip",
            colorize=False,
        )

    logger.debug("Logging configured", level=level, json_logs=json_logs, log_file=log_file)


def get_logger(name: Optional[str] = None):
    """獲取配置好的 logger 實例

    Args:
        name: logger 名稱（通常使用 __name__）
    """
    if name:
        return logger.bind(module=name)
    return logger


def new_run_id() -> str:
    return uuid.uuid4().hex[:12]


def set_run_context(**kwargs) -> None:
    """設定執行級別的上下文資訊（run_id, stage, country）"""
    ctx = dict(run_context.get())
    ctx.update(kwargs)
    run_context.set(ctx)


@contextmanager
def stage_context(**kwargs) -> Iterator[None]:
    """暫時綁定上下文，離開時恢復原有上下文

    使用範例：
        with stage_context(stage="fit"):
            logger.info("Sampling started")
    """
    token = run_context.set({**run_context.get(), **kwargs})
    try:
        yield
    finally:
        run_context.reset(token)
