from __future__ import annotations

import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator


# ==== 資料來源分類 ====

class SourceType(str, Enum):
    """資料來源類型 d"""
    VR = "vr"
    DHS_DIRECT = "dhs_direct"
    OTHER_DHS_DIRECT = "other_dhs_direct"
    MICS_INDIRECT = "mics_indirect"
    CENSUS_INDIRECT = "census_indirect"
    OTHERS_DIRECT = "others_direct"
    OTHERS_INDIRECT = "others_indirect"
    HOUSEHOLD_DEATHS = "household_deaths"
    LIFE_TABLE = "life_table"


class SourceSubtype(str, Enum):
    """細分來源類型 d'（區分是否有回報抽樣誤差）"""
    VR = "vr"
    DHS_DIRECT_SE = "dhs_direct_se"
    DHS_DIRECT_NO_SE = "dhs_direct_no_se"
    OTHER_DHS_DIRECT_SE = "other_dhs_direct_se"
    OTHER_DHS_DIRECT_NO_SE = "other_dhs_direct_no_se"
    MICS_INDIRECT_SE = "mics_indirect_se"
    MICS_INDIRECT_NO_SE = "mics_indirect_no_se"
    CENSUS_INDIRECT = "census_indirect"
    OTHERS_DIRECT = "others_direct"
    OTHERS_INDIRECT = "others_indirect"
    HOUSEHOLD_DEATHS = "household_deaths"
    LIFE_TABLE = "life_table"


class VrStatus(str, Enum):
    NOT_VR = "not_vr"
    COMPLETE = "complete"
    INCOMPLETE = "incomplete"


class VrReporting(str, Enum):
    """VR 觀測值的抽樣誤差計算方式"""
    REGISTRATION = "registration"
    SAMPLE_REGISTRATION = "sample_registration"


# 每個系列可能有多個觀測值的來源類型（D^(repeated)）
REPEATED_SOURCE_TYPES = frozenset({
    SourceType.DHS_DIRECT,
    SourceType.OTHER_DHS_DIRECT,
    SourceType.MICS_INDIRECT,
    SourceType.CENSUS_INDIRECT,
    SourceType.OTHERS_DIRECT,
    SourceType.OTHERS_INDIRECT,
})

# 誤差項為常態分布的來源類型，其他非 VR 類型使用 t 分布
NORMAL_ERROR_SOURCE_TYPES = frozenset({
    SourceType.DHS_DIRECT,
    SourceType.OTHER_DHS_DIRECT,
})

# 需依是否有回報標準誤細分的來源類型
_SE_SPLIT = {
    SourceType.DHS_DIRECT: (SourceSubtype.DHS_DIRECT_SE, SourceSubtype.DHS_DIRECT_NO_SE),
    SourceType.OTHER_DHS_DIRECT: (SourceSubtype.OTHER_DHS_DIRECT_SE, SourceSubtype.OTHER_DHS_DIRECT_NO_SE),
    SourceType.MICS_INDIRECT: (SourceSubtype.MICS_INDIRECT_SE, SourceSubtype.MICS_INDIRECT_NO_SE),
}

SOURCE_LABELS: Dict[SourceType, str] = {
    SourceType.VR: "VR (including SVR)",
    SourceType.DHS_DIRECT: "DHS Direct",
    SourceType.OTHER_DHS_DIRECT: "Other DHS Direct",
    SourceType.MICS_INDIRECT: "MICS Indirect",
    SourceType.CENSUS_INDIRECT: "Census Indirect",
    SourceType.OTHERS_DIRECT: "Others Direct",
    SourceType.OTHERS_INDIRECT: "Others Indirect",
    SourceType.HOUSEHOLD_DEATHS: "Others Household Deaths",
    SourceType.LIFE_TABLE: "Others Life Table",
}


def subtype_for(source_type: SourceType, has_reported_se: bool) -> SourceSubtype:
    """Map a source type to its subtype d'"""
    if source_type in _SE_SPLIT:
        with_se, without_se = _SE_SPLIT[source_type]
        return with_se if has_reported_se else without_se
    return SourceSubtype(source_type.value)


def parent_type(subtype: SourceSubtype) -> SourceType:
    for parent, pair in _SE_SPLIT.items():
        if subtype in pair:
            return parent
    return SourceType(subtype.value)


# ==== 觀測資料 ====

class Observation(BaseModel):
    """One U5MR data point with its series/source metadata"""

    model_config = ConfigDict(frozen=True)

    country_code: str = Field(..., min_length=1)
    ref_year: float = Field(..., description="參考期間中點（小數年）")
    u5mr: float = Field(..., gt=0, description="每千名活產的五歲以下死亡數")
    series_id: str = Field(..., min_length=1)
    source_type: SourceType
    sample_vr: bool = Field(default=False, description="SVR（抽樣登記系統）")
    survey_year: Optional[float] = None
    reported_se: Optional[float] = Field(default=None, gt=0, description="log 尺度標準誤")
    vr_status: VrStatus = VrStatus.NOT_VR
    births: Optional[float] = Field(default=None, gt=0)
    deaths: Optional[float] = Field(default=None, ge=0)

    @computed_field
    @property
    def log_u5mr(self) -> float:
        return math.log(self.u5mr)

    @property
    def retrospective_period(self) -> Optional[float]:
        """z_i = survey_year - ref_year"""
        if self.survey_year is None:
            return None
        return self.survey_year - self.ref_year

    @property
    def collection_year(self) -> float:
        """資料蒐集年份；VR 視為於參考年度回報"""
        if self.survey_year is not None:
            return self.survey_year
        return self.ref_year

    @model_validator(mode="after")
    def _check_invariants(self) -> "Observation":
        if self.survey_year is not None and self.survey_year < self.ref_year:
            raise ValueError("survey_year precedes ref_year")
        if self.vr_status != VrStatus.NOT_VR and self.source_type != SourceType.VR:
            raise ValueError("vr_status set on a non-VR source")
        if self.sample_vr and self.source_type != SourceType.VR:
            raise ValueError("sample_vr set on a non-VR source")
        return self


class SeriesMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    series_id: str
    country_code: str
    source_type: SourceType
    source_subtype: SourceSubtype
    n_obs: int = 0

    @computed_field
    @property
    def repeated(self) -> bool:
        return self.source_type in REPEATED_SOURCE_TYPES

    @model_validator(mode="after")
    def _check_subtype(self) -> "SeriesMeta":
        if parent_type(self.source_subtype) != self.source_type:
            raise ValueError(
                f"subtype {self.source_subtype.value} inconsistent with {self.source_type.value}"
            )
        return self


class RowRejection(BaseModel):
    row: int
    reason: str


class ParseResult(BaseModel):
    observations: List[Observation] = Field(default_factory=list)
    series: List[SeriesMeta] = Field(default_factory=list)
    rejections: List[RowRejection] = Field(default_factory=list)


class IncompleteVrSelection(BaseModel):
    """Trend and bound observations selected from incomplete VR data"""

    model_config = ConfigDict(frozen=True)

    country_code: str
    trend_obs: Tuple[int, ...] = ()
    bound_obs: Tuple[int, ...] = ()
    min_completeness: Dict[int, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self) -> "IncompleteVrSelection":
        if len(self.trend_obs) > 2:
            raise ValueError("at most two trend observations per country")
        if set(self.trend_obs) & set(self.bound_obs):
            raise ValueError("trend and bound observations must be disjoint")
        for idx, m in self.min_completeness.items():
            if idx not in self.bound_obs:
                raise ValueError(f"completeness given for non-bound observation {idx}")
            if not 0 < m <= 1:
                raise ValueError("min_completeness must lie in (0, 1]")
        return self


class BoundConstraint(BaseModel):
    """VR-based lower (and optional upper) bound on log(U5MR)"""

    model_config = ConfigDict(frozen=True)

    country_code: str
    year: float
    y: float = Field(..., description="不完整 VR 觀測值的 log(U5MR)")
    v: float = Field(..., gt=0)
    min_completeness: Optional[float] = Field(default=None, gt=0, le=1)

    @property
    def upper_offset(self) -> Optional[float]:
        """U - L = -log(m)"""
        if self.min_completeness is None:
            return None
        return -math.log(self.min_completeness)

    def upper(self, lower: float) -> Optional[float]:
        offset = self.upper_offset
        return None if offset is None else lower + offset


# ==== 模型參數 ====

class GlobalParams(BaseModel):
    """Global (starred) hyperparameters shared across countries"""

    chi: float
    phi_sigma: float = Field(..., ge=0)
    mu0: Dict[SourceType, float] = Field(default_factory=dict)
    phi0: Dict[SourceType, float] = Field(default_factory=dict)
    mu1: Dict[SourceType, float] = Field(default_factory=dict)
    phi1: Dict[SourceType, float] = Field(default_factory=dict)
    omega: Dict[SourceSubtype, float] = Field(default_factory=dict)
    nu: Optional[float] = Field(default=None, ge=2, le=30)
    # 全球係數變化分布（投影用）
    change_median: Optional[float] = None
    change_variance: Optional[float] = Field(default=None, gt=0)

    @field_validator("phi0", "phi1")
    @classmethod
    def _nonnegative(cls, v: Dict[SourceType, float]) -> Dict[SourceType, float]:
        if any(x < 0 for x in v.values()):
            raise ValueError("between-series sd must be nonnegative")
        return v

    @field_validator("omega")
    @classmethod
    def _omega_range(cls, v: Dict[SourceSubtype, float]) -> Dict[SourceSubtype, float]:
        if any(not 0 <= x <= 0.5 for x in v.values()):
            raise ValueError("omega must lie in [0, 0.5]")
        return v


class CountryParams(BaseModel):
    lambda0: float
    lambda1: float
    eps: List[float]
    sigma: float = Field(..., gt=0)
    theta_vr: Optional[float] = Field(default=None, gt=0, lt=1)


class SeriesParams(BaseModel):
    beta0: float = 0.0
    beta1: float = 0.0


# ==== 執行設定 ====

class SamplerConfig(BaseModel):
    n_chains: int = Field(default=6, ge=1)
    n_iter: int = Field(default=50000, ge=1)
    burn_in: int = Field(default=10000, ge=0)
    thin: int = Field(default=20, ge=1)
    seed: int = 0
    adapt_window: Optional[int] = Field(default=None, ge=0, description="預設等於 burn_in")
    jobs: int = Field(default=1, ge=1)
    progress: bool = False

    @model_validator(mode="after")
    def _check(self) -> "SamplerConfig":
        if self.burn_in >= self.n_iter:
            raise ValueError("burn_in must be smaller than n_iter")
        if self.adapt_window is not None and self.adapt_window > self.burn_in:
            raise ValueError("adaptation must end before burn-in ends")
        return self

    @property
    def adaptation_iterations(self) -> int:
        return self.burn_in if self.adapt_window is None else self.adapt_window

    @property
    def retained_per_chain(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    @classmethod
    def for_global(cls, **overrides) -> "SamplerConfig":
        return cls(**{"n_iter": 50000, "burn_in": 10000, "thin": 20, **overrides})

    @classmethod
    def for_country(cls, **overrides) -> "SamplerConfig":
        return cls(**{"n_iter": 35000, "burn_in": 10000, "thin": 20, **overrides})


class ValidationConfig(BaseModel):
    cutoff_year: float = 2006
    n_sets: int = Field(default=100, ge=1)
    x: float = Field(default=0.1, gt=0, lt=1, description="區間分數的顯著水準")
    high_mortality_threshold: float = 40.0
    seed: int = 0
    w_sweep: List[float] = Field(default_factory=lambda: [round(0.1 * i, 1) for i in range(7)])
    arr_years: Tuple[float, float] = (1990, 2005)
    estimate_years: Tuple[float, ...] = (2000, 2005)

    @field_validator("w_sweep")
    @classmethod
    def _weights(cls, v: List[float]) -> List[float]:
        if any(not 0 <= w <= 1 for w in v):
            raise ValueError("pooling weights must lie in [0, 1]")
        return v


class RunMode(str, Enum):
    GLOBAL = "global"
    COUNTRY = "country"
    VALIDATE = "validate"
    W_SWEEP = "w-sweep"


class RunConfig(BaseModel):
    mode: RunMode = RunMode.GLOBAL
    data_path: Path
    config_path: Optional[Path] = None
    births_path: Optional[Path] = None
    hyperparameters_path: Optional[Path] = None
    out_dir: Path = Path("output")
    sampler: SamplerConfig = Field(default_factory=SamplerConfig.for_global)
    validation: ValidationConfig = Field(default_factory=ValidationConfig)
    pooling_weight: Optional[float] = Field(default=None, ge=0, le=1)
    projection_end_year: Optional[float] = None
    countries: Optional[List[str]] = None
    strict: bool = False
    write_traces: bool = True
    plots: bool = True
    metrics_file: Optional[Path] = None

    @model_validator(mode="after")
    def _check_mode(self) -> "RunConfig":
        if self.mode == RunMode.COUNTRY and self.hyperparameters_path is None:
            raise ValueError("country mode requires a hyperparameter file")
        return self
