"""
Out-of-sample validation: training split, left-out predictive distributions and error tables
"""
from __future__ import annotations

from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.observability.logging import get_logger
from src.models.schemas import (
    REPEATED_SOURCE_TYPES,
    Observation,
    SourceSubtype,
    SourceType,
    ValidationConfig,
)
from src.services.diagnostics_service import posterior_summary
from src.services.estimation_service import FitResult
from src.services.exceptions import BasisError, ModelError, ProjectionError, ValidationHarnessError
from src.services.ingest_service import group_series
from src.services.model_service import Z_CENTRE, Branch, route, sampling_sd
from src.services.projection_service import Trajectory, trajectory

logger = get_logger(__name__)

MEASURES = ("ME", "MAE", "MRE", "MARE", "score")


class LeftoutPrediction(NamedTuple):
    observation: Observation
    draws: np.ndarray
    median: float
    lower: float
    upper: float


class Coverage(NamedTuple):
    inside: float
    below: float
    above: float
    n: int

    @property
    def pct_below(self) -> float:
        return 100.0 * self.below

    @property
    def pct_above(self) -> float:
        return 100.0 * self.above


class ArrSummary(NamedTuple):
    median: float
    lower: float
    upper: float
    draws: np.ndarray


class ValidationReport(BaseModel):
    """Per-W validation tables"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    leftout: pd.DataFrame
    estimates: pd.DataFrame
    countries: Dict[str, List[str]] = Field(default_factory=dict, description="各期間納入的國家")
    n_sets: int = 0

    def summary_text(self) -> str:
        lines = [f"validation sets: {self.n_sets}"]
        for period, codes in sorted(self.countries.items()):
            lines.append(f"countries {period}: {len(codes)}")
        lines.append("")
        lines.append("left-out observations")
        lines.append(self.leftout.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        lines.append("")
        lines.append("estimates")
        lines.append(self.estimates.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        return "\n".join(lines) + "\n"


# ==== 資料切分 ====

def split_training(
    observations: Sequence[Observation], cutoff: float = 2006
) -> Tuple[List[Observation], List[Observation]]:
    """依蒐集年份切分訓練與測試資料

    調查的所有回溯資料點共用同一蒐集年份，因此整個調查一起被移出；
    VR 每個資料點以其參考年度作為蒐集年份。
    """
    training: List[Observation] = []
    test: List[Observation] = []
    for obs in observations:
        (test if obs.collection_year >= cutoff else training).append(obs)
    logger.info("Training split", cutoff=cutoff, training=len(training), test=len(test))
    return training, test


# ==== 評分 ====

def interval_score(lower, upper, value, x: float = 0.1):
    """負向導向的區間分數（log 尺度）

    n = log(r/l) + (2/x)(log l - log u)·1[u < l] + (2/x)(log u - log r)·1[u > r]

    Raises:
        ValidationHarnessError: 任一界限或觀測值非正
    """
    if not 0.0 < x < 1.0:
        raise ValidationHarnessError("significance level x must lie in (0, 1)")
    l, r, u = (np.asarray(a, dtype=float) for a in (lower, upper, value))
    if np.any(l <= 0) or np.any(r <= 0) or np.any(u <= 0):
        raise ValidationHarnessError("interval score needs positive bounds and values")
    if np.any(l > r):
        raise ValidationHarnessError("interval lower bound exceeds upper bound")
    ll, lr, lu = np.log(l), np.log(r), np.log(u)
    score = (lr - ll) + (2.0 / x) * (ll - lu) * (u < l) + (2.0 / x) * (lu - lr) * (u > r)
    return float(score) if score.ndim == 0 else score


def interval_score_linear(lower, upper, value, x: float = 0.1):
    """Interval score on the natural scale, for quantities that may be negative (ARR)"""
    if not 0.0 < x < 1.0:
        raise ValidationHarnessError("significance level x must lie in (0, 1)")
    l, r, u = (np.asarray(a, dtype=float) for a in (lower, upper, value))
    score = (r - l) + (2.0 / x) * (l - u) * (u < l) + (2.0 / x) * (u - r) * (u > r)
    return float(score) if score.ndim == 0 else score


def coverage(values, lower, upper) -> Coverage:
    """閉區間覆蓋率，另回報低於與高於區間的比例"""
    u, l, r = (np.asarray(a, dtype=float).ravel() for a in (values, lower, upper))
    n = u.size
    if n == 0:
        return Coverage(inside=float("nan"), below=float("nan"), above=float("nan"), n=0)
    below = int(np.sum(u < l))
    above = int(np.sum(u > r))
    inside = n - below - above
    return Coverage(inside=inside / n, below=below / n, above=above / n, n=n)


# ==== 年降低率 ====

def annual_rate_of_reduction(start, end, t1: float, t2: float) -> np.ndarray:
    """ARR = 100·log(Λ(t1)/Λ(t2))/(t2 - t1)，逐抽樣計算"""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    if t2 <= t1:
        raise ValidationHarnessError("ARR needs t2 > t1")
    if np.any(start <= 0) or np.any(end <= 0):
        raise ValidationHarnessError("ARR needs positive mortality estimates")
    return 100.0 * np.log(start / end) / (t2 - t1)


def arr(traj: Trajectory, t1: float = 1990, t2: float = 2005) -> ArrSummary:
    years = list(np.asarray(traj.years, dtype=float))
    try:
        i1, i2 = years.index(float(t1)), years.index(float(t2))
    except ValueError as e:
        raise ValidationHarnessError(f"trajectory does not cover {t1}-{t2}") from e
    draws = annual_rate_of_reduction(traj.draws[:, i1], traj.draws[:, i2], t1, t2)
    q = posterior_summary(draws, (0.05, 0.5, 0.95))
    return ArrSummary(median=float(q[0.5]), lower=float(q[0.05]), upper=float(q[0.95]), draws=draws)


# ==== 預測分布 ====

def _hyper(result: FitResult, name: str) -> np.ndarray:
    try:
        return result.hyper_draws(name)
    except KeyError as e:
        raise ValidationHarnessError(f"hyperparameter {name} is not available from the training fit") from e


def predictive_leftout(
    result: FitResult,
    obs: Observation,
    subtype: SourceSubtype,
    alpha: np.ndarray,
    rng: np.random.Generator,
) -> LeftoutPrediction:
    """留出觀測值的後驗預測分布

    alpha 為訓練資料擬合並投影後的係數 (draws, P)。訓練資料中出現過的系列
    沿用其 β 抽樣，未出現的系列由 N(μ0, φ0²)、N(μ1, φ1²) 重新抽取。

    Raises:
        ValidationHarnessError: 國家不在訓練擬合中，或來源類型缺少超參數
    """
    model = result.model
    try:
        block = model.block(obs.country_code)
    except ModelError as e:
        raise ValidationHarnessError(str(e)) from e
    n = alpha.shape[0]

    B = block.basis.design([obs.ref_year], projection=True)
    psi = alpha @ B[0, : alpha.shape[1]]
    v = sampling_sd(obs, model.config)
    branch = route(obs)
    if branch == Branch.COMPLETE_VR:
        log_draws = psi + v * rng.standard_normal(n)
    elif branch in (Branch.NORMAL, Branch.T):
        d = obs.source_type.value
        if obs.source_type in REPEATED_SOURCE_TYPES:
            z = (obs.retrospective_period or 0.0) - Z_CENTRE
            if f"beta0[{obs.series_id}]" in result.sample:
                beta0 = result.sample.flat(f"beta0[{obs.series_id}]")
                beta1 = result.sample.flat(f"beta1[{obs.series_id}]")
            else:
                beta0 = _hyper(result, f"mu0[{d}]") + _hyper(result, f"phi0[{d}]") * rng.standard_normal(n)
                beta1 = _hyper(result, f"mu1[{d}]") + _hyper(result, f"phi1[{d}]") * rng.standard_normal(n)
            phi = beta0 + beta1 * z
        else:
            phi = _hyper(result, f"mu0[{d}]")
        scale = np.hypot(_hyper(result, f"omega[{subtype.value}]"), v)
        if branch == Branch.T:
            noise = rng.standard_t(_hyper(result, "nu"))
        else:
            noise = rng.standard_normal(n)
        log_draws = psi + phi + scale * noise
    else:
        raise ValidationHarnessError(f"observation in series {obs.series_id} has no predictive distribution")

    draws = np.exp(log_draws)
    q = posterior_summary(draws, (0.05, 0.5, 0.95))
    return LeftoutPrediction(
        observation=obs,
        draws=draws,
        median=float(q[0.5]),
        lower=float(q[0.05]),
        upper=float(q[0.95]),
    )


def _canonical(observations: Iterable[Observation]) -> List[Observation]:
    return sorted(observations, key=lambda o: (o.ref_year, o.series_id))


def predict_test_set(
    result: FitResult,
    test: Sequence[Observation],
    subtypes: Mapping[str, SourceSubtype],
    W: float,
    seed: int,
) -> Dict[Observation, LeftoutPrediction]:
    """預測每個可預測的留出觀測值；不在訓練國家或基底範圍外者略過"""
    projected = result.project(W, seed)
    fitted = set(result.model.country_codes)
    by_country: Dict[str, List[Observation]] = {}
    for obs in test:
        by_country.setdefault(obs.country_code, []).append(obs)

    out: Dict[Observation, LeftoutPrediction] = {}
    skipped = 0
    for ci, code in enumerate(sorted(by_country)):
        if code not in fitted:
            skipped += len(by_country[code])
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, ci, 3]))
        for obs in _canonical(by_country[code]):
            if obs.source_type == SourceType.VR and route(obs) == Branch.EXCLUDED:
                skipped += 1
                continue
            try:
                out[obs] = predictive_leftout(result, obs, subtypes[obs.series_id], projected[code], rng)
            except BasisError:
                logger.debug("Left-out observation outside the training basis", country=code, year=obs.ref_year)
                skipped += 1
            except ValidationHarnessError as e:
                logger.warning(
                    "Left-out observation cannot be predicted from the training fit",
                    series=obs.series_id,
                    source_type=obs.source_type.value,
                    reason=str(e),
                )
                skipped += 1
    if skipped:
        logger.info("Left-out observations without a prediction", count=skipped)
    return out


# ==== 驗證集合 ====

def sample_validation_sets(
    pools: Mapping[str, Sequence[Observation]],
    n_sets: int,
    seed: int,
) -> List[Dict[str, Observation]]:
    """每個集合在每個國家隨機抽取一個留出觀測值"""
    if n_sets < 1:
        raise ValidationHarnessError("n_sets must be at least 1")
    countries = []
    for code in sorted(pools):
        if not pools[code]:
            logger.warning("Country has no left-out observations in the period", country=code)
            continue
        countries.append(code)
    canonical = {code: _canonical(pools[code]) for code in countries}

    rng = np.random.default_rng(seed)
    sets = []
    for _ in range(n_sets):
        sets.append({code: canonical[code][int(rng.integers(len(canonical[code])))] for code in countries})
    return sets


def leftout_measures(predictions: Sequence[LeftoutPrediction], x: float = 0.1) -> Dict[str, float]:
    """一個集合內的誤差、相對誤差、區間分數與覆蓋率"""
    u = np.array([p.observation.u5mr for p in predictions], dtype=float)
    med = np.array([p.median for p in predictions], dtype=float)
    lo = np.array([p.lower for p in predictions], dtype=float)
    hi = np.array([p.upper for p in predictions], dtype=float)
    e = u - med
    rel = e / u * 100.0
    score = interval_score(lo, hi, u, x)
    cov = coverage(u, lo, hi)
    out = {"pct_below": cov.pct_below, "pct_above": cov.pct_above}
    for stat, fn in (("median", np.median), ("mean", np.mean)):
        out[f"{stat}:ME"] = float(fn(e))
        out[f"{stat}:MAE"] = float(fn(np.abs(e)))
        out[f"{stat}:MRE"] = float(fn(rel))
        out[f"{stat}:MARE"] = float(fn(np.abs(rel)))
        out[f"{stat}:score"] = float(fn(score))
    return out


def _summarize_sets(per_set: pd.DataFrame, **keys) -> List[dict]:
    rows = []
    for stat in ("median", "mean"):
        row = dict(keys, statistic=stat)
        for m in MEASURES:
            col = per_set[f"{stat}:{m}"]
            row[m] = float(col.median())
            row[f"{m}_sd"] = float(col.std(ddof=1)) if len(col) > 1 else 0.0
        for m in ("pct_below", "pct_above"):
            row[m] = float(per_set[m].median())
            row[f"{m}_sd"] = float(per_set[m].std(ddof=1)) if len(per_set) > 1 else 0.0
        row["pct_inside"] = 100.0 - row["pct_below"] - row["pct_above"]
        rows.append(row)
    return rows


# ==== 估計值誤差 ====

def high_mortality_countries(
    trajectories: Mapping[str, Trajectory], threshold: float = 40.0, year: float = 1990
) -> List[str]:
    """Countries whose median U5MR in `year` is at least `threshold`"""
    out = []
    for code in sorted(trajectories):
        traj = trajectories[code]
        hit = np.flatnonzero(np.asarray(traj.years, dtype=float) == float(year))
        if hit.size and traj.median[hit[0]] >= threshold:
            out.append(code)
    return out


def estimate_errors(
    full: Mapping[str, Trajectory],
    training: Mapping[str, Trajectory],
    years: Sequence[float] = (2000, 2005),
    arr_years: Tuple[float, float] = (1990, 2005),
    x: float = 0.1,
    countries: Optional[Iterable[str]] = None,
) -> pd.DataFrame:
    """全資料（更新）估計值與訓練資料估計值之差

    e = Λ̂ - Λ̃，相對誤差 e/Λ̂·100；覆蓋率與區間分數以訓練資料的 90% 區間
    對照更新後的中位數。
    """
    codes = sorted(set(full) & set(training) if countries is None else set(countries) & set(full) & set(training))
    rows = []
    for code in codes:
        f, t = full[code], training[code]
        f_years = list(np.asarray(f.years, dtype=float))
        t_years = list(np.asarray(t.years, dtype=float))
        for year in years:
            if float(year) not in f_years or float(year) not in t_years:
                continue
            i, j = f_years.index(float(year)), t_years.index(float(year))
            updated = float(f.median[i])
            lo, hi = float(t.lower[j]), float(t.upper[j])
            e = updated - float(t.median[j])
            rows.append({
                "country": code,
                "quantity": f"u5mr_{int(year)}",
                "updated": updated,
                "training": float(t.median[j]),
                "lower90": lo,
                "upper90": hi,
                "error": e,
                "relative_error": e / updated * 100.0,
                "below": updated < lo,
                "above": updated > hi,
                "score": interval_score(lo, hi, updated, x),
            })
        try:
            a_full = arr(f, *arr_years)
            a_train = arr(t, *arr_years)
        except ValidationHarnessError:
            continue
        e = a_full.median - a_train.median
        rows.append({
            "country": code,
            "quantity": f"arr_{int(arr_years[0])}_{int(arr_years[1])}",
            "updated": a_full.median,
            "training": a_train.median,
            "lower90": a_train.lower,
            "upper90": a_train.upper,
            "error": e,
            "relative_error": float("nan"),
            "below": a_full.median < a_train.lower,
            "above": a_full.median > a_train.upper,
            "score": interval_score_linear(a_train.lower, a_train.upper, a_full.median, x),
        })
    return pd.DataFrame(
        rows,
        columns=["country", "quantity", "updated", "training", "lower90", "upper90",
                 "error", "relative_error", "below", "above", "score"],
    )


def summarize_estimate_errors(errors: pd.DataFrame, **keys) -> List[dict]:
    rows = []
    for quantity, group in errors.groupby("quantity", sort=True):
        e = group["error"].to_numpy(dtype=float)
        rel = group["relative_error"].to_numpy(dtype=float)
        score = group["score"].to_numpy(dtype=float)
        n = len(group)
        pct_below = 100.0 * float(group["below"].sum()) / n
        pct_above = 100.0 * float(group["above"].sum()) / n
        for stat, fn in (("median", np.median), ("mean", np.mean)):
            has_rel = not np.all(np.isnan(rel))
            rows.append(dict(
                keys,
                quantity=quantity,
                statistic=stat,
                n_countries=n,
                ME=float(fn(e)),
                MAE=float(fn(np.abs(e))),
                MRE=float(fn(rel)) if has_rel else float("nan"),
                MARE=float(fn(np.abs(rel))) if has_rel else float("nan"),
                score=float(fn(score)),
                pct_below=pct_below,
                pct_above=pct_above,
                pct_inside=100.0 - pct_below - pct_above,
            ))
    return rows


# ==== 主流程 ====

def country_trajectories(result: FitResult, W: float, seed: int, years: Sequence[float]) -> Dict[str, Trajectory]:
    out = {}
    for code, alpha in result.project(W, seed).items():
        basis = result.model.block(code).basis
        lo, hi = basis.span
        wanted = [y for y in years if lo - 1e-9 <= y <= hi + 1e-9]
        if not wanted:
            continue
        try:
            out[code] = trajectory(alpha, basis, wanted)
        except ProjectionError:
            logger.debug("Trajectory outside basis span", country=code)
    return out


def run_validation(
    training: FitResult,
    full: FitResult,
    test: Sequence[Observation],
    all_observations: Sequence[Observation],
    config: ValidationConfig,
    weights: Sequence[float],
    seed: int = 0,
) -> ValidationReport:
    """對每個 W 計算留出觀測值與估計值的驗證表

    納入國家：1990 年 U5MR 中位數（全資料）至少為門檻，且訓練與測試資料皆有觀測值。
    """
    subtypes = {m.series_id: m.source_subtype for m in group_series(all_observations)}
    split_year = int(config.cutoff_year) - 1
    wanted_years = sorted({*config.estimate_years, *config.arr_years, 1990})
    leftout_rows: List[dict] = []
    estimate_rows: List[dict] = []
    countries: Dict[str, List[str]] = {}

    for W in weights:
        full_traj = country_trajectories(full, W, seed, wanted_years)
        train_traj = country_trajectories(training, W, seed, wanted_years)
        high = set(high_mortality_countries(full_traj, config.high_mortality_threshold))
        predictions = predict_test_set(training, test, subtypes, W, seed)
        eligible = sorted({o.country_code for o in predictions} & high)

        for period, keep in (
            (f"<={split_year}", lambda o: o.ref_year <= split_year),
            (f">{split_year}", lambda o: o.ref_year > split_year),
        ):
            pools = {code: [o for o in predictions if o.country_code == code and keep(o)] for code in eligible}
            pools = {code: obs for code, obs in pools.items() if obs}
            countries[period] = sorted(pools)
            if not pools:
                logger.warning("No left-out observations in period", period=period, W=W)
                continue
            sets = sample_validation_sets(pools, config.n_sets, config.seed)
            per_set = pd.DataFrame(
                [leftout_measures([predictions[o] for o in s.values()], config.x) for s in sets]
            )
            for row in _summarize_sets(per_set, W=W, period=period):
                row["n_countries"] = len(pools)
                leftout_rows.append(row)

        errors = estimate_errors(
            full_traj,
            train_traj,
            config.estimate_years,
            config.arr_years,
            config.x,
            countries=eligible,
        )
        if not errors.empty:
            estimate_rows.extend(summarize_estimate_errors(errors, W=W))
        logger.info("Validation computed", W=W, countries=len(eligible), predictions=len(predictions))

    if not leftout_rows and not estimate_rows:
        raise ValidationHarnessError("no country qualifies for validation")
    leftout_cols = ["W", "period", "statistic", "n_countries"]
    for m in (*MEASURES, "pct_below", "pct_above"):
        leftout_cols += [m, f"{m}_sd"]
    leftout_cols.append("pct_inside")
    estimate_cols = ["W", "quantity", "statistic", "n_countries", *MEASURES, "pct_below", "pct_above", "pct_inside"]
    return ValidationReport(
        leftout=pd.DataFrame(leftout_rows, columns=leftout_cols),
        estimates=pd.DataFrame(estimate_rows, columns=estimate_cols),
        countries=countries,
        n_sets=config.n_sets,
    )
