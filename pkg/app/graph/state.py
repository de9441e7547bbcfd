from __future__ import annotations

from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from src.config import ModelConfig
from src.models.schemas import Observation, RowRejection, RunConfig, RunMode
from src.services.estimation_service import FitResult
from src.services.validation_service import ValidationReport


class PipelineState(BaseModel):
    """Estimation pipeline state shared by the graph nodes"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    # 輸入
    config: RunConfig
    estimation: ModelConfig = Field(default_factory=ModelConfig, description="TOML 模型設定")
    run_id: str = Field(default="-", description="Run ID for tracking")

    # 匯入階段
    observations: List[Observation] = Field(default_factory=list)
    rejections: List[RowRejection] = Field(default_factory=list)
    training: List[Observation] = Field(default_factory=list, description="驗證模式的訓練資料")
    test: List[Observation] = Field(default_factory=list, description="驗證模式的留出資料")

    # 擬合與投影
    fit: Optional[FitResult] = None
    train_fit: Optional[FitResult] = None
    pooling_weight: float = 0.5
    projected: Dict[str, np.ndarray] = Field(default_factory=dict)

    # 彙整
    estimates: Optional[pd.DataFrame] = None
    bias_table: Optional[pd.DataFrame] = None
    report: Optional[ValidationReport] = None

    # 控制/觀測
    artifacts: List[str] = Field(default_factory=list)
    error: Optional[str] = Field(default=None, description="stage_error(stage, cause)")
    failed_stage: Optional[str] = None
    exit_code: int = 0
    metrics: Dict[str, Any] = Field(default_factory=dict)

    @property
    def validating(self) -> bool:
        return self.config.mode in (RunMode.VALIDATE, RunMode.W_SWEEP)
