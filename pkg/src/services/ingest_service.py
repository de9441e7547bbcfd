"""
Observation ingestion: CSV parsing, VR stochastic errors and incomplete-VR selection
"""
from __future__ import annotations

import math
import re
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import pandas as pd
from pydantic import ValidationError

from app.observability.logging import get_logger
from app.observability.metrics import rows_rejected_counter
from src.config import IncompleteVrConfig
from src.models.schemas import (
    REPEATED_SOURCE_TYPES,
    IncompleteVrSelection,
    Observation,
    ParseResult,
    RowRejection,
    SeriesMeta,
    SourceType,
    VrStatus,
    subtype_for,
)
from src.services.exceptions import DataError, SchemaError

logger = get_logger(__name__)

COLUMNS = [
    "country_code",
    "series_id",
    "source_type",
    "ref_year",
    "u5mr",
    "survey_year",
    "reported_se",
    "vr_status",
    "births",
    "deaths",
]
REQUIRED_COLUMNS = {"country_code", "series_id", "source_type", "ref_year", "u5mr"}

BIRTHS_COLUMNS = ["country_code", "year", "births"]

SVR_LABEL = "svr"

# 標籤正規化後對應到 (來源類型, 是否為 SVR)
_SOURCE_ALIASES: Dict[str, Tuple[SourceType, bool]] = {
    **{t.value: (t, False) for t in SourceType},
    SVR_LABEL: (SourceType.VR, True),
    "sample_vr": (SourceType.VR, True),
    "vr_including_svr": (SourceType.VR, False),
    "others_household_deaths": (SourceType.HOUSEHOLD_DEATHS, False),
    "others_life_table": (SourceType.LIFE_TABLE, False),
}


class _RowRejected(Exception):
    pass


def _normalize_label(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", label.strip().lower()).strip("_")


def parse_source_label(label: str) -> Tuple[SourceType, bool]:
    """Map a CSV source label to (source type, sample VR flag)"""
    key = _normalize_label(label)
    if key not in _SOURCE_ALIASES:
        raise _RowRejected(f"unknown source_type label '{label}'")
    return _SOURCE_ALIASES[key]


def source_label(obs: Observation) -> str:
    return SVR_LABEL if obs.sample_vr else obs.source_type.value


def _parse_float(raw: str, field: str, required: bool = False) -> Optional[float]:
    text = raw.strip()
    if not text:
        if required:
            raise _RowRejected(f"missing {field}")
        return None
    try:
        value = float(text)
    except ValueError:
        raise _RowRejected(f"malformed numeric value in {field}: '{raw}'") from None
    if not math.isfinite(value):
        raise _RowRejected(f"malformed numeric value in {field}: '{raw}'")
    return value


def _parse_vr_status(raw: str, source_type: SourceType) -> VrStatus:
    text = _normalize_label(raw)
    if not text:
        return VrStatus.COMPLETE if source_type == SourceType.VR else VrStatus.NOT_VR
    try:
        return VrStatus(text)
    except ValueError:
        raise _RowRejected(f"unknown vr_status label '{raw}'") from None


def _read_table(path: Union[str, Path], required: Sequence[str], allowed: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"cannot read {path}: {e}") from e

    header = [c.strip() for c in frame.columns]
    frame.columns = header
    missing = set(required) - set(header)
    unknown = set(header) - set(allowed)
    if missing or unknown:
        raise SchemaError(
            f"header of {path.name} does not match schema "
            f"(missing={sorted(missing)}, unknown={sorted(unknown)})"
        )
    for col in allowed:
        if col not in frame.columns:
            frame[col] = ""
    return frame


def parse_observations(path: Union[str, Path], cv_threshold: Optional[float] = None) -> ParseResult:
    """讀取觀測值 CSV

    每一列成為一個 Observation，或是帶有列號與原因的拒絕紀錄。
    列號以 1 起算且不含標題列。

    Args:
        path: observations.csv 路徑
        cv_threshold: 若提供，匯入後以此門檻合併單年 VR 觀測值

    Raises:
        DataError: 檔案不存在
        SchemaError: 標題列與文件化的欄位不符
    """
    frame = _read_table(path, REQUIRED_COLUMNS, COLUMNS)

    observations: List[Observation] = []
    rejections: List[RowRejection] = []
    seen_keys: set = set()
    series_identity: Dict[str, Tuple[str, SourceType]] = {}

    for row_number, record in enumerate(frame.to_dict(orient="records"), start=1):
        try:
            source_type, sample_vr = parse_source_label(record["source_type"])
            ref_year = _parse_float(record["ref_year"], "ref_year", required=True)
            u5mr = _parse_float(record["u5mr"], "u5mr", required=True)
            if u5mr <= 0:
                raise _RowRejected("nonpositive rate")
            survey_year = _parse_float(record["survey_year"], "survey_year")
            reported_se = _parse_float(record["reported_se"], "reported_se")
            births = _parse_float(record["births"], "births")
            deaths = _parse_float(record["deaths"], "deaths")
            vr_status = _parse_vr_status(record["vr_status"], source_type)

            country = record["country_code"].strip()
            series_id = record["series_id"].strip()

            if survey_year is not None and survey_year < ref_year:
                raise _RowRejected("survey_year precedes ref_year")
            if survey_year is None and source_type in REPEATED_SOURCE_TYPES:
                raise _RowRejected("missing survey_year for repeated source type")

            identity = series_identity.get(series_id, (country, source_type))
            if identity != (country, source_type):
                raise _RowRejected(f"series {series_id} mixes countries or source types")

            key = (series_id, ref_year)
            if key in seen_keys:
                raise _RowRejected("duplicate (series_id, ref_year)")

            obs = Observation(
                country_code=country,
                series_id=series_id,
                source_type=source_type,
                sample_vr=sample_vr,
                ref_year=ref_year,
                u5mr=u5mr,
                survey_year=survey_year,
                reported_se=reported_se,
                vr_status=vr_status,
                births=births,
                deaths=deaths,
            )
        except _RowRejected as e:
            rejections.append(RowRejection(row=row_number, reason=str(e)))
            continue
        except ValidationError as e:
            reason = "; ".join(err["msg"] for err in e.errors())
            rejections.append(RowRejection(row=row_number, reason=reason))
            continue

        series_identity.setdefault(series_id, (country, source_type))
        seen_keys.add(key)
        observations.append(obs)

    for rejection in rejections:
        reason = rejection.reason.split(":")[0].split(" '")[0]
        rows_rejected_counter.labels(reason=reason).inc()
        logger.warning("Row rejected", row=rejection.row, reason=rejection.reason)

    if cv_threshold is not None:
        observations = aggregate_vr_periods(observations, cv_threshold).observations

    series = group_series(observations)
    logger.info(
        "Observations parsed",
        path=str(path),
        observations=len(observations),
        series=len(series),
        rejected=len(rejections),
    )
    return ParseResult(observations=observations, series=series, rejections=rejections)


def group_series(observations: Sequence[Observation]) -> List[SeriesMeta]:
    """依 series_id 分組，子類型取決於系列是否回報標準誤"""
    grouped: "OrderedDict[str, List[Observation]]" = OrderedDict()
    for obs in observations:
        grouped.setdefault(obs.series_id, []).append(obs)

    series = []
    for series_id, members in grouped.items():
        first = members[0]
        has_se = any(o.reported_se is not None for o in members)
        series.append(
            SeriesMeta(
                series_id=series_id,
                country_code=first.country_code,
                source_type=first.source_type,
                source_subtype=subtype_for(first.source_type, has_se),
                n_obs=len(members),
            )
        )
    return series


def write_observations(observations: Sequence[Observation], path: Union[str, Path]) -> None:
    """以匯入格式寫出觀測值（repr 浮點數，可無損重新匯入）"""

    def fmt(value: Optional[float]) -> str:
        return "" if value is None else repr(float(value))

    rows = [
        {
            "country_code": o.country_code,
            "series_id": o.series_id,
            "source_type": source_label(o),
            "ref_year": fmt(o.ref_year),
            "u5mr": fmt(o.u5mr),
            "survey_year": fmt(o.survey_year),
            "reported_se": fmt(o.reported_se),
            "vr_status": o.vr_status.value,
            "births": fmt(o.births),
            "deaths": fmt(o.deaths),
        }
        for o in observations
    ]
    pd.DataFrame(rows, columns=COLUMNS).to_csv(path, index=False, lineterminator="\n")


def parse_births_table(path: Union[str, Path]) -> Dict[Tuple[str, int], float]:
    """讀取出生數表 (country_code, year, births)"""
    frame = _read_table(path, BIRTHS_COLUMNS, BIRTHS_COLUMNS)
    table: Dict[Tuple[str, int], float] = {}
    for row_number, record in enumerate(frame.to_dict(orient="records"), start=1):
        try:
            year = _parse_float(record["year"], "year", required=True)
            births = _parse_float(record["births"], "births", required=True)
        except _RowRejected as e:
            raise DataError(f"births table row {row_number}: {e}") from None
        if births <= 0:
            raise DataError(f"births table row {row_number}: nonpositive births")
        table[(record["country_code"].strip(), int(math.floor(year)))] = births
    return table


def attach_births(
    observations: Sequence[Observation], births: Dict[Tuple[str, int], float]
) -> List[Observation]:
    """為缺少出生數的 VR 觀測值補上出生數表中的值"""
    out = []
    for obs in observations:
        key = (obs.country_code, int(math.floor(obs.ref_year)))
        if obs.source_type == SourceType.VR and obs.births is None and key in births:
            obs = obs.model_copy(update={"births": births[key]})
        out.append(obs)
    return out


def vr_stochastic_sd(
    births: Optional[float],
    u5mr: float,
    *,
    sample_vr: bool = False,
    reported_se: Optional[float] = None,
    floor: float = 0.025,
    svr_sd: float = 0.1,
) -> float:
    """VR 觀測值在 log 尺度的隨機誤差標準差 v_i

    以 Poisson 近似與 delta method：v = 1/sqrt(E[deaths])，E[deaths] = births·u5mr/1000，
    並以 floor 為下限。SVR 沒有出生數時使用 svr_sd。
    """
    if reported_se is not None:
        return max(reported_se, floor)
    if births is None:
        if sample_vr:
            return svr_sd
        raise DataError("complete VR observation has neither births nor a reported SE")
    if births <= 0:
        raise DataError("births must be positive")
    expected_deaths = births * u5mr / 1000.0
    return max(1.0 / math.sqrt(expected_deaths), floor)


class VrAggregation(NamedTuple):
    observations: List[Observation]
    residual_flagged: List[int]


def _deaths(obs: Observation) -> float:
    if obs.deaths is not None:
        return obs.deaths
    return obs.births * obs.u5mr / 1000.0


def aggregate_vr_periods(observations: Sequence[Observation], cv_threshold: float = 0.10) -> VrAggregation:
    """合併小國的單年 VR 觀測值，直到變異係數 1/sqrt(deaths) ≤ 門檻

    在每個系列內由左至右貪婪合併；年份不連續（間隔超過一年）時結束當前期間。
    仍高於門檻的期間（通常是尾端）會被標記。
    非 VR 或沒有出生數的觀測值原樣保留。
    """
    passthrough: List[Observation] = []
    by_series: "OrderedDict[str, List[Observation]]" = OrderedDict()
    for obs in observations:
        if obs.source_type == SourceType.VR and obs.births is not None:
            by_series.setdefault(obs.series_id, []).append(obs)
        else:
            passthrough.append(obs)

    merged: List[Observation] = []
    flagged: List[int] = []

    def close(group: List[Observation]) -> None:
        deaths = sum(_deaths(o) for o in group)
        births = sum(o.births for o in group)
        cv = math.inf if deaths <= 0 else 1.0 / math.sqrt(deaths)
        if len(group) == 1:
            merged.append(group[0])
        else:
            first = group[0]
            merged.append(
                first.model_copy(
                    update={
                        "ref_year": (group[0].ref_year + group[-1].ref_year) / 2.0,
                        "u5mr": 1000.0 * deaths / births,
                        "births": births,
                        "deaths": deaths,
                    }
                )
            )
        if cv > cv_threshold:
            flagged.append(len(merged) - 1)

    for series_id, members in by_series.items():
        members = sorted(members, key=lambda o: o.ref_year)
        group: List[Observation] = []
        group_deaths = 0.0
        for obs in members:
            if group and obs.ref_year - group[-1].ref_year > 1.0:
                close(group)
                group, group_deaths = [], 0.0
            group.append(obs)
            group_deaths += _deaths(obs)
            if group_deaths > 0 and 1.0 / math.sqrt(group_deaths) <= cv_threshold:
                close(group)
                group, group_deaths = [], 0.0
        if group:
            close(group)

    if flagged:
        logger.warning("VR periods above CV threshold after merging", count=len(flagged), threshold=cv_threshold)
    return VrAggregation(observations=passthrough + merged, residual_flagged=flagged)


def select_incomplete_vr(
    observations: Sequence[Observation],
    config: IncompleteVrConfig,
    country_code: str,
) -> IncompleteVrSelection:
    """選取不完整 VR 的趨勢觀測值與界限觀測值

    索引指向傳入序列中的位置。
    - 趨勢：1990 年的觀測值（多個時取期間中點最接近 1990.0 者）及 1991–1995 年最大值
    - 界限：2005 年起最近一筆不完整 VR 觀測值，m 取自設定
    """
    if not config.is_flagged(country_code):
        return IncompleteVrSelection(country_code=country_code)

    candidates = [
        (i, o)
        for i, o in enumerate(observations)
        if o.country_code == country_code
        and o.source_type == SourceType.VR
        and o.vr_status == VrStatus.INCOMPLETE
    ]

    trend: List[int] = []
    base = [(i, o) for i, o in candidates if config.trend_year <= o.ref_year < config.trend_year + 1]
    if base:
        trend.append(min(base, key=lambda p: (abs(p[1].ref_year - config.trend_year), p[0]))[0])
    lo, hi = config.trend_window
    window = [(i, o) for i, o in candidates if lo <= o.ref_year < hi]
    if window:
        trend.append(max(window, key=lambda p: (p[1].u5mr, -p[0]))[0])

    if not trend:
        logger.warning("Incomplete-VR country has no VR data in the trend window", country=country_code)

    bound: Tuple[int, ...] = ()
    completeness: Dict[int, float] = {}
    recent = [(i, o) for i, o in candidates if o.ref_year >= config.bound_from_year and i not in trend]
    if recent:
        idx = max(recent, key=lambda p: (p[1].ref_year, p[0]))[0]
        bound = (idx,)
        m = config.countries[country_code].min_completeness
        if m is not None:
            completeness[idx] = m

    return IncompleteVrSelection(
        country_code=country_code,
        trend_obs=tuple(sorted(trend)),
        bound_obs=bound,
        min_completeness=completeness,
    )
