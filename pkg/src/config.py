from __future__ import annotations

import datetime as _dt
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.models.schemas import SourceType
from src.services.exceptions import ConfigError

DEFAULT_MODEL_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "model.toml"


class Settings(BaseSettings):
    """執行環境設定（環境變數 B3_* 或 .env）"""

    # Logging
    log_level: str = "INFO"
    json_logs: bool = False
    log_file: Optional[str] = None

    # Observability
    metrics_file: Optional[str] = None
    tracing_console: bool = False

    # Sampler defaults
    rhat_threshold: float = 1.1
    jobs: int = 1
    seed: int = 0

    config_path: Path = DEFAULT_MODEL_CONFIG

    model_config = SettingsConfigDict(env_prefix="B3_", env_file=".env", case_sensitive=False, extra="ignore")


settings = Settings()


# ==== 模型設定（TOML） ====

class SplineConfig(BaseModel):
    interval: float = Field(default=2.5, gt=0)
    # 未設定時為「今年 + 2」
    projection_end_year: Optional[float] = None

    def resolve_projection_end(self) -> float:
        if self.projection_end_year is not None:
            return self.projection_end_year
        return float(_dt.date.today().year + 2)


class VrConfig(BaseModel):
    floor_sd: float = Field(default=0.025, gt=0)
    svr_sd: float = Field(default=0.1, gt=0)
    cv_threshold: float = Field(default=0.10, gt=0)
    # 是否在匯入時合併單年 VR 觀測值
    aggregate: bool = False


class UnreportedSeConfig(BaseModel):
    census_indirect: float = Field(default=0.025, gt=0)
    other: float = Field(default=0.1, gt=0)

    def for_type(self, source_type: SourceType) -> float:
        if source_type == SourceType.CENSUS_INDIRECT:
            return self.census_indirect
        return self.other


class PriorConfig(BaseModel):
    """Prior constants of the hierarchical model"""

    lambda0_exp_range: Tuple[float, float] = (1.0, 1000.0)
    lambda1_per_year_range: Tuple[float, float] = (-0.25, 0.2)
    chi_mean: float = -3.0
    chi_second: float = 10.0
    # N(-3, 10) 的第二個參數視為變異數；設為 false 則視為標準差
    chi_second_is_variance: bool = True
    phi_upper: float = Field(default=5.0, gt=0)
    mu0_default_mean: float = 0.0
    mu0_default_sd: float = Field(default=0.15, gt=0)
    mu0_mean: Dict[SourceType, float] = Field(default_factory=lambda: {SourceType.DHS_DIRECT: -0.0123})
    mu0_sd: Dict[SourceType, float] = Field(default_factory=lambda: {SourceType.DHS_DIRECT: 0.00556})
    mu1_sd: float = Field(default=0.02, gt=0)
    omega_upper: float = Field(default=0.5, gt=0)
    nu_range: Tuple[float, float] = (2.0, 30.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "PriorConfig":
        for name in ("lambda0_exp_range", "lambda1_per_year_range", "nu_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be increasing")
        if self.lambda0_exp_range[0] <= 0:
            raise ValueError("lambda0_exp_range must be positive")
        return self

    @property
    def chi_sd(self) -> float:
        return math.sqrt(self.chi_second) if self.chi_second_is_variance else self.chi_second

    def mu0_prior(self, source_type: SourceType) -> Tuple[float, float]:
        return (
            self.mu0_mean.get(source_type, self.mu0_default_mean),
            self.mu0_sd.get(source_type, self.mu0_default_sd),
        )


class IncompleteVrCountry(BaseModel):
    min_completeness: Optional[float] = Field(default=None, gt=0, le=1)


class IncompleteVrConfig(BaseModel):
    countries: Dict[str, IncompleteVrCountry] = Field(default_factory=dict)
    trend_year: float = 1990
    trend_window: Tuple[float, float] = (1991, 1996)
    bound_from_year: float = 2005

    def is_flagged(self, country_code: str) -> bool:
        return country_code in self.countries


class ModelConfig(BaseModel):
    spline: SplineConfig = Field(default_factory=SplineConfig)
    pooling_weight: float = Field(default=0.5, ge=0, le=1)
    vr: VrConfig = Field(default_factory=VrConfig)
    unreported_se: UnreportedSeConfig = Field(default_factory=UnreportedSeConfig)
    priors: PriorConfig = Field(default_factory=PriorConfig)
    incomplete_vr: IncompleteVrConfig = Field(default_factory=IncompleteVrConfig)
    conflict_periods: Dict[str, List[Tuple[float, float]]] = Field(default_factory=dict)
    fixed_smoothing_sd: Dict[str, float] = Field(default_factory=dict)
    # 國家別調整（不完整 VR、衝突期間、固定平滑度）是否也用於全球模型
    adjustments_in_global: bool = False

    @field_validator("conflict_periods")
    @classmethod
    def _periods_ordered(cls, v: Dict[str, List[Tuple[float, float]]]) -> Dict[str, List[Tuple[float, float]]]:
        for country, periods in v.items():
            for start, end in periods:
                if not start < end:
                    raise ValueError(f"conflict period for {country} must have start < end")
        return v

    @field_validator("fixed_smoothing_sd")
    @classmethod
    def _positive_sd(cls, v: Dict[str, float]) -> Dict[str, float]:
        if any(sd <= 0 for sd in v.values()):
            raise ValueError("fixed smoothing sd must be positive")
        return v


def load_model_config(path: Optional[Union[str, Path]] = None) -> ModelConfig:
    """讀取並驗證 TOML 模型設定；path 為 None 時回傳預設值"""
    if path is None:
        return ModelConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"model config not found: {path}")
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
        return ModelConfig.model_validate(raw)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid model config {path}: {e}") from e
