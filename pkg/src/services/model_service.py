"""
B3 model assembly: spline process priors, hierarchical smoothing and the multi-source data model
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln

from app.observability.logging import get_logger
from src.config import ModelConfig, PriorConfig
from src.models.schemas import (
    NORMAL_ERROR_SOURCE_TYPES,
    REPEATED_SOURCE_TYPES,
    BoundConstraint,
    CountryParams,
    GlobalParams,
    Observation,
    SeriesMeta,
    SeriesParams,
    SourceSubtype,
    SourceType,
    VrStatus,
)
from src.services.basis_service import SplineBasis, make_basis, merge_conflict_splines
from src.services.exceptions import BasisError, DataError, ModelError, RoutingError
from src.services.ingest_service import group_series, select_incomplete_vr, vr_stochastic_sd

logger = get_logger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
# 偏差模型中回溯期間的中心（年）
Z_CENTRE = 10.0

TYPES: Tuple[SourceType, ...] = tuple(SourceType)
SUBTYPES: Tuple[SourceSubtype, ...] = tuple(SourceSubtype)
TYPE_INDEX = {t: i for i, t in enumerate(TYPES)}
SUBTYPE_INDEX = {t: i for i, t in enumerate(SUBTYPES)}


class Branch(IntEnum):
    """Likelihood branch of one observation"""
    COMPLETE_VR = 0
    VR_TREND = 1
    NORMAL = 2
    T = 3
    # 以下不進入概似函數
    BOUND = 4
    EXCLUDED = 5


# ==== 機率密度 ====

def normal_logpdf(x, mean, sd):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (x - mean) / sd
        return -0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z


def t_logpdf(x, loc, scale, nu):
    """Location-scale Student t: scale multiplies the standard t variate"""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (x - loc) / scale
        return (
            gammaln((nu + 1.0) / 2.0)
            - gammaln(nu / 2.0)
            - 0.5 * np.log(nu * math.pi)
            - np.log(scale)
            - (nu + 1.0) / 2.0 * np.log1p(z * z / nu)
        )


def uniform_logpdf(x, lo: float, hi: float):
    x = np.asarray(x, dtype=float)
    return np.where((x > lo) & (x < hi), -math.log(hi - lo), -np.inf)


def lambda0_logprior(lambda0, priors: PriorConfig):
    """exp(λ0) ~ U(a, b)，含 Jacobian：log p(λ0) = λ0 - log(b - a)"""
    a, b = priors.lambda0_exp_range
    lambda0 = np.asarray(lambda0, dtype=float)
    inside = (lambda0 > math.log(a)) & (lambda0 < math.log(b))
    return np.where(inside, lambda0 - math.log(b - a), -np.inf)


def lambda1_logprior(lambda1, priors: PriorConfig, interval: float):
    """λ1 / I ~ U(lo, hi)"""
    lo, hi = priors.lambda1_per_year_range
    return uniform_logpdf(lambda1, lo * interval, hi * interval)


# ==== 單一觀測值 ====

def route(obs: Observation, *, trend: bool = False, bound: bool = False) -> Branch:
    """依 (vr_status, source_type) 將觀測值分配到唯一的分支

    Raises:
        RoutingError: VR 來源但 vr_status 為 not_vr，或非 VR 來源帶有 VR 狀態
    """
    if obs.source_type == SourceType.VR:
        if obs.vr_status == VrStatus.COMPLETE:
            return Branch.COMPLETE_VR
        if obs.vr_status == VrStatus.INCOMPLETE:
            if trend:
                return Branch.VR_TREND
            return Branch.BOUND if bound else Branch.EXCLUDED
        raise RoutingError(f"VR observation in series {obs.series_id} has vr_status not_vr")
    if obs.vr_status != VrStatus.NOT_VR:
        raise RoutingError(f"non-VR observation in series {obs.series_id} has a VR status")
    if obs.source_type in NORMAL_ERROR_SOURCE_TYPES:
        return Branch.NORMAL
    return Branch.T


def bias_mean(
    series: Optional[SeriesParams],
    z: float,
    source_type: SourceType,
    mu0: Optional[float] = None,
) -> float:
    """Φ_i = β0 + β1·(z - 10)；非重複來源類型 Φ_i = μ0_d"""
    if z < 0:
        raise ModelError("retrospective period must be nonnegative")
    if source_type not in REPEATED_SOURCE_TYPES:
        if mu0 is None:
            raise ModelError(f"mu0 required for non-repeated source type {source_type.value}")
        return mu0
    if series is None:
        raise ModelError(f"series parameters required for {source_type.value}")
    return series.beta0 + series.beta1 * (z - Z_CENTRE)


def obs_scale(omega: float, v: float) -> float:
    """Ω = sqrt(ω² + v²)"""
    if omega < 0 or v < 0:
        raise ModelError("omega and v must be nonnegative")
    return math.hypot(omega, v)


def sampling_sd(obs: Observation, config: ModelConfig) -> float:
    """觀測值的抽樣標準差 v_i；未回報時使用預設值（在模型組裝時套用）"""
    if obs.source_type == SourceType.VR:
        try:
            return vr_stochastic_sd(
                obs.births,
                obs.u5mr,
                sample_vr=obs.sample_vr,
                reported_se=obs.reported_se,
                floor=config.vr.floor_sd,
                svr_sd=config.vr.svr_sd,
            )
        except DataError:
            if obs.vr_status == VrStatus.INCOMPLETE:
                return config.unreported_se.other
            raise
    if obs.reported_se is not None:
        return obs.reported_se
    return config.unreported_se.for_type(obs.source_type)


def log_likelihood(
    obs: Observation,
    psi: float,
    *,
    v: float,
    branch: Branch,
    globals_: Optional[GlobalParams] = None,
    series: Optional[SeriesParams] = None,
    source_subtype: Optional[SourceSubtype] = None,
    theta_vr: Optional[float] = None,
) -> float:
    """log p(y_i | Ψ)，依分支計算 δ_i = y_i - Ψ 的密度"""
    delta = obs.log_u5mr - psi
    if branch == Branch.COMPLETE_VR:
        return float(normal_logpdf(delta, 0.0, v))
    if branch == Branch.VR_TREND:
        if theta_vr is None:
            raise ModelError("theta_vr required for incomplete-VR trend observations")
        return float(normal_logpdf(delta, math.log(theta_vr), v))
    if branch in (Branch.BOUND, Branch.EXCLUDED):
        raise RoutingError(f"branch {branch.name} has no likelihood")

    if globals_ is None or source_subtype is None:
        raise ModelError("global parameters and subtype required for non-VR observations")
    mean = bias_mean(
        series,
        obs.retrospective_period or 0.0,
        obs.source_type,
        globals_.mu0.get(obs.source_type),
    )
    scale = obs_scale(globals_.omega.get(source_subtype, 0.0), v)
    if branch == Branch.NORMAL:
        return float(normal_logpdf(delta, mean, scale))
    if globals_.nu is None:
        raise ModelError("nu required for t-distributed observations")
    return float(t_logpdf(delta, mean, scale, globals_.nu))


def bound_indicator(
    psi_at_bounds: Sequence[float],
    constraints: Sequence[BoundConstraint],
    lower: Sequence[float],
) -> bool:
    """Ψ_c(t) ∈ (L, U) for every constraint; constraints without m check only L"""
    for psi, constraint, L in zip(psi_at_bounds, constraints, lower):
        if not psi > L:
            return False
        upper = constraint.upper(L)
        if upper is not None and not psi < upper:
            return False
    return True


def log_prior(
    globals_: GlobalParams,
    countries: Mapping[str, CountryParams],
    series: Mapping[str, Tuple[SeriesParams, SourceType]],
    priors: PriorConfig,
    interval: float = 2.5,
    hierarchical: Optional[Mapping[str, bool]] = None,
) -> float:
    """所有先驗分布的 log 密度總和；支撐外回傳 -inf"""
    phi_hi = priors.phi_upper
    total = float(normal_logpdf(globals_.chi, priors.chi_mean, priors.chi_sd))
    total += float(uniform_logpdf(globals_.phi_sigma, 0.0, phi_hi))
    for d, mu0 in globals_.mu0.items():
        m, s = priors.mu0_prior(d)
        total += float(normal_logpdf(mu0, m, s))
    for d, value in globals_.mu1.items():
        total += float(normal_logpdf(value, 0.0, priors.mu1_sd))
    for values in (globals_.phi0, globals_.phi1):
        for value in values.values():
            total += float(uniform_logpdf(value, 0.0, phi_hi))
    for value in globals_.omega.values():
        total += float(uniform_logpdf(value, 0.0, priors.omega_upper))
    if globals_.nu is not None:
        total += float(uniform_logpdf(globals_.nu, *priors.nu_range))

    for code, c in countries.items():
        total += float(lambda0_logprior(c.lambda0, priors))
        total += float(lambda1_logprior(c.lambda1, priors, interval))
        total += float(np.sum(normal_logpdf(np.asarray(c.eps), 0.0, c.sigma)))
        if hierarchical is None or hierarchical.get(code, True):
            total += float(normal_logpdf(math.log(c.sigma), globals_.chi, globals_.phi_sigma))
        if c.theta_vr is not None:
            total += float(uniform_logpdf(c.theta_vr, 0.0, 1.0))

    for sid, (params, d) in series.items():
        if d not in globals_.phi0 or d not in globals_.mu0:
            raise ModelError(f"no hyperparameters for source type {d.value} of series {sid}")
        total += float(normal_logpdf(params.beta0, globals_.mu0[d], globals_.phi0[d]))
        total += float(normal_logpdf(params.beta1, globals_.mu1[d], globals_.phi1[d]))

    return total if math.isfinite(total) else -math.inf


# ==== 模型組裝 ====

@dataclass(eq=False)
class CountryBlock:
    """Per-country design for the joint (λ0, λ1, ε) block"""

    code: str
    index: int
    basis: SplineBasis
    obs_slice: slice
    # Ψ(obs) = X @ x，x = (λ0, λ1, ε)
    X: np.ndarray
    # 界限年份的設計矩陣
    Xb: np.ndarray
    bound_idx: np.ndarray
    fixed_sigma: Optional[float] = None
    has_theta: bool = False
    # 繪圖用：該國所有觀測值（含排除者）及其分支與 v
    all_obs: List[Observation] = field(default_factory=list)
    all_branches: List[Branch] = field(default_factory=list)
    all_v: List[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def hierarchical(self) -> bool:
        return self.fixed_sigma is None

    def free_alpha(self, x: np.ndarray) -> np.ndarray:
        b = self.basis
        centred = b.positions - b.K / 2.0
        return x[..., :1] + x[..., 1:2] * centred + x[..., 2:] @ b.A.T

    def alpha(self, x: np.ndarray) -> np.ndarray:
        return self.basis.expand(self.free_alpha(x))


def _alpha_map(basis: SplineBasis) -> np.ndarray:
    """Matrix M with free α = M @ (λ0, λ1, ε)"""
    centred = basis.positions - basis.K / 2.0
    return np.column_stack([np.ones(basis.n_free), centred, basis.A])


@dataclass
class ModelState:
    """One chain's current parameter values"""

    chi: float
    phi_sigma: float
    mu0: np.ndarray
    phi0: np.ndarray
    mu1: np.ndarray
    phi1: np.ndarray
    omega: np.ndarray
    nu: float
    x: List[np.ndarray]
    log_sigma: np.ndarray
    theta: np.ndarray
    L: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray
    psi: np.ndarray


class B3Model:
    """Assembled joint posterior over all countries

    觀測值依國家排序並連續存放，因此每個國家的觀測值對應一個 slice。
    """

    def __init__(
        self,
        countries: List[CountryBlock],
        observations: List[Observation],
        series: List[SeriesMeta],
        *,
        y: np.ndarray,
        v: np.ndarray,
        branch: np.ndarray,
        country: np.ndarray,
        series_idx: np.ndarray,
        type_idx: np.ndarray,
        subtype_idx: np.ndarray,
        zc: np.ndarray,
        bounds: List[BoundConstraint],
        bound_country: np.ndarray,
        config: ModelConfig,
        fixed_globals: Optional[GlobalParams] = None,
        use_likelihood: bool = True,
    ):
        self.countries = countries
        self.observations = observations
        self.series = series
        self.y = y
        self.v = v
        self.branch = branch
        self.country = country
        self.series_idx = series_idx
        self.type_idx = type_idx
        self.subtype_idx = subtype_idx
        self.zc = zc
        self.bounds = bounds
        self.bound_country = bound_country
        self.config = config
        self.priors = config.priors
        self.interval = config.spline.interval
        self.fixed_globals = fixed_globals
        self.use_likelihood = use_likelihood

        self.bound_y = np.array([b.y for b in bounds], dtype=float)
        self.bound_v = np.array([b.v for b in bounds], dtype=float)
        self.bound_offset = np.array(
            [np.inf if b.upper_offset is None else b.upper_offset for b in bounds], dtype=float
        )

        nonvr = (branch == Branch.NORMAL) | (branch == Branch.T)
        self.nonvr_mask = nonvr
        self.trend_mask = branch == Branch.VR_TREND
        self.t_mask = branch == Branch.T
        self.series_type = np.array([TYPE_INDEX[s.source_type] for s in series], dtype=int)
        self.active_types = sorted({int(t) for t in type_idx[nonvr]})
        self.repeated_types = sorted({int(t) for t in self.series_type})
        self.active_subtypes = sorted({int(t) for t in subtype_idx[nonvr]})
        self.has_t = bool(self.t_mask.any())

        self.obs_by_type = {t: np.flatnonzero(nonvr & (type_idx == t)) for t in self.active_types}
        self.obs_by_subtype = {s: np.flatnonzero(nonvr & (subtype_idx == s)) for s in self.active_subtypes}
        self.series_by_type = {t: np.flatnonzero(self.series_type == t) for t in self.repeated_types}
        self.series_obs = np.flatnonzero(series_idx >= 0)
        self.t_obs = np.flatnonzero(self.t_mask)
        self.trend_obs = np.flatnonzero(self.trend_mask)
        self.nonrep_obs = np.flatnonzero(nonvr & (series_idx < 0))

        self.theta_countries = np.array([c.index for c in countries if c.has_theta], dtype=int)
        self.hier_countries = np.array([c.index for c in countries if c.hierarchical], dtype=int)
        self.q = np.array([c.basis.Q for c in countries], dtype=float)

        if fixed_globals is not None:
            self._check_fixed_globals(fixed_globals)

    # ---- 組裝 ----

    @classmethod
    def assemble(
        cls,
        observations: Sequence[Observation],
        config: ModelConfig,
        *,
        country_mode: bool = False,
        fixed_globals: Optional[GlobalParams] = None,
        projection_end_year: Optional[float] = None,
        use_likelihood: bool = True,
        drop_unfittable: bool = False,
    ) -> "B3Model":
        """由觀測值建立模型

        drop_unfittable 為真時，無法建立基底的國家記錄警告後略過（驗證用的訓練資料）。

        Raises:
            RoutingError: 無法分配分支的觀測值
            BasisError: 國家觀測期間過短
            ModelError: 國家模式缺少固定超參數
        """
        if country_mode and fixed_globals is None:
            raise ModelError("country mode requires fixed global hyperparameters")
        apply_adjustments = country_mode or config.adjustments_in_global
        end_year = projection_end_year or config.spline.resolve_projection_end()

        by_country: Dict[str, List[int]] = {}
        for i, obs in enumerate(observations):
            by_country.setdefault(obs.country_code, []).append(i)

        blocks: List[CountryBlock] = []
        rows: List[Tuple[Observation, Branch, float, int]] = []
        bounds: List[BoundConstraint] = []
        bound_country: List[int] = []

        for code in sorted(by_country):
            c_index = len(blocks)
            idx = by_country[code]
            trend: set = set()
            bound: Dict[int, Optional[float]] = {}
            if apply_adjustments and config.incomplete_vr.is_flagged(code):
                sel = select_incomplete_vr(observations, config.incomplete_vr, code)
                trend = set(sel.trend_obs)
                bound = {i: sel.min_completeness.get(i) for i in sel.bound_obs}

            routed = []
            for i in idx:
                obs = observations[i]
                br = route(obs, trend=i in trend, bound=i in bound)
                routed.append((i, obs, br, sampling_sd(obs, config)))

            used = [r for r in routed if r[2] != Branch.EXCLUDED]
            n_excluded = len(routed) - len(used)
            if n_excluded:
                logger.info("Incomplete VR observations excluded", country=code, count=n_excluded)
            try:
                if not used:
                    raise ModelError(f"country {code} has no observations entering the model")
                years = [r[1].ref_year for r in used]
                basis = make_basis(min(years), max(years), max(end_year, max(years)), config.spline.interval)
                if apply_adjustments and code in config.conflict_periods:
                    basis = basis.with_merges(merge_conflict_splines(basis, config.conflict_periods[code]))
            except (BasisError, ModelError) as e:
                if not drop_unfittable:
                    raise
                logger.warning("Country dropped from model", country=code, reason=str(e))
                continue

            M = _alpha_map(basis)
            lik = [r for r in used if r[2] < Branch.BOUND]
            start = len(rows)
            if lik:
                B = basis.design([r[1].ref_year for r in lik], projection=False)
                X = B @ basis.expand(M.T).T
            else:
                X = np.zeros((0, M.shape[1]))
            for _, obs, br, v in lik:
                rows.append((obs, br, v, c_index))

            bnd = [r for r in used if r[2] == Branch.BOUND]
            b_start = len(bounds)
            for i, obs, _, v in bnd:
                bounds.append(
                    BoundConstraint(
                        country_code=code,
                        year=obs.ref_year,
                        y=obs.log_u5mr,
                        v=v,
                        min_completeness=bound[i],
                    )
                )
                bound_country.append(c_index)
            if bnd:
                Bb = basis.design([r[1].ref_year for r in bnd], projection=False)
                Xb = Bb @ basis.expand(M.T).T
            else:
                Xb = np.zeros((0, M.shape[1]))

            fixed_sigma = config.fixed_smoothing_sd.get(code) if apply_adjustments else None
            blocks.append(
                CountryBlock(
                    code=code,
                    index=c_index,
                    basis=basis,
                    obs_slice=slice(start, len(rows)),
                    X=X,
                    Xb=Xb,
                    bound_idx=np.arange(b_start, len(bounds)),
                    fixed_sigma=fixed_sigma,
                    has_theta=any(r[2] == Branch.VR_TREND for r in lik),
                    all_obs=[r[1] for r in routed],
                    all_branches=[r[2] for r in routed],
                    all_v=[r[3] for r in routed],
                )
            )

        if not blocks:
            raise ModelError("no country could be fitted")

        # 重複來源類型的系列參數 β
        series_list: List[SeriesMeta] = []
        series_pos: Dict[str, int] = {}
        grouped: Dict[str, List[Observation]] = {}
        for obs, br, _, _ in rows:
            if br in (Branch.NORMAL, Branch.T) and obs.source_type in REPEATED_SOURCE_TYPES:
                grouped.setdefault(obs.series_id, []).append(obs)
        for meta in group_series([o for members in grouped.values() for o in members]):
            series_pos[meta.series_id] = len(series_list)
            series_list.append(meta)
        subtype_of = {m.series_id: m.source_subtype for m in group_series([r[0] for r in rows])}

        n = len(rows)
        y = np.array([r[0].log_u5mr for r in rows], dtype=float)
        v = np.array([r[2] for r in rows], dtype=float)
        branch = np.array([int(r[1]) for r in rows], dtype=int)
        country = np.array([r[3] for r in rows], dtype=int)
        series_idx = np.array([series_pos.get(r[0].series_id, -1) if r[1] >= Branch.NORMAL else -1 for r in rows], dtype=int)
        type_idx = np.array([TYPE_INDEX[r[0].source_type] for r in rows], dtype=int)
        subtype_idx = np.array([SUBTYPE_INDEX[subtype_of[r[0].series_id]] for r in rows], dtype=int)
        zc = np.array(
            [(r[0].retrospective_period or 0.0) - Z_CENTRE if r[0].survey_year is not None else 0.0 for r in rows],
            dtype=float,
        )

        logger.info(
            "Model assembled",
            countries=len(blocks),
            observations=n,
            series=len(series_list),
            bounds=len(bounds),
            country_mode=country_mode,
        )
        return cls(
            blocks,
            [r[0] for r in rows],
            series_list,
            y=y,
            v=v,
            branch=branch,
            country=country,
            series_idx=series_idx,
            type_idx=type_idx,
            subtype_idx=subtype_idx,
            zc=zc,
            bounds=bounds,
            bound_country=np.array(bound_country, dtype=int),
            config=config,
            fixed_globals=fixed_globals,
            use_likelihood=use_likelihood,
        )

    def _check_fixed_globals(self, g: GlobalParams) -> None:
        missing = []
        for t in self.active_types:
            d = TYPES[t]
            if d not in g.mu0:
                missing.append(f"mu0[{d.value}]")
        for t in self.repeated_types:
            d = TYPES[t]
            for name, table in (("phi0", g.phi0), ("mu1", g.mu1), ("phi1", g.phi1)):
                if d not in table:
                    missing.append(f"{name}[{d.value}]")
        for s in self.active_subtypes:
            if SUBTYPES[s] not in g.omega:
                missing.append(f"omega[{SUBTYPES[s].value}]")
        if self.has_t and g.nu is None:
            missing.append("nu")
        if missing:
            raise ModelError(f"missing fixed hyperparameters: {', '.join(missing)}")

    # ---- 屬性 ----

    @property
    def country_mode(self) -> bool:
        return self.fixed_globals is not None

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def country_codes(self) -> List[str]:
        return [c.code for c in self.countries]

    def block(self, code: str) -> CountryBlock:
        for c in self.countries:
            if c.code == code:
                return c
        raise ModelError(f"unknown country {code}")

    # ---- 全域參數與狀態轉換 ----

    def state_from_globals(self, g: GlobalParams, state: ModelState) -> None:
        state.chi = g.chi
        state.phi_sigma = g.phi_sigma
        for d, value in g.mu0.items():
            state.mu0[TYPE_INDEX[d]] = value
        for d, value in g.phi0.items():
            state.phi0[TYPE_INDEX[d]] = value
        for d, value in g.mu1.items():
            state.mu1[TYPE_INDEX[d]] = value
        for d, value in g.phi1.items():
            state.phi1[TYPE_INDEX[d]] = value
        for d, value in g.omega.items():
            state.omega[SUBTYPE_INDEX[d]] = value
        if g.nu is not None:
            state.nu = g.nu

    # ---- 概似函數 ----

    def phi_mean(
        self,
        state: ModelState,
        idx: np.ndarray,
        beta0: Optional[np.ndarray] = None,
        beta1: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Bias mean Φ for non-VR observations idx"""
        beta0 = state.beta0 if beta0 is None else beta0
        beta1 = state.beta1 if beta1 is None else beta1
        s = self.series_idx[idx]
        rep = s >= 0
        out = state.mu0[self.type_idx[idx]].copy()
        out[rep] = beta0[s[rep]] + beta1[s[rep]] * self.zc[idx][rep]
        return out

    def obs_loglik(
        self,
        state: ModelState,
        idx: np.ndarray,
        psi: Optional[np.ndarray] = None,
        beta0: Optional[np.ndarray] = None,
        beta1: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Per-observation log-likelihood for observations idx"""
        idx = np.asarray(idx, dtype=int)
        if not self.use_likelihood or idx.size == 0:
            return np.zeros(idx.size)
        if psi is None:
            psi = state.psi[idx]
        br = self.branch[idx]
        resid = self.y[idx] - psi
        v = self.v[idx]
        mean = np.zeros(idx.size)
        scale = v.copy()

        trend = br == Branch.VR_TREND
        if trend.any():
            with np.errstate(divide="ignore"):
                mean[trend] = np.log(state.theta[self.country[idx][trend]])

        nonvr = br >= Branch.NORMAL
        if nonvr.any():
            sub = idx[nonvr]
            mean[nonvr] = self.phi_mean(state, sub, beta0, beta1)
            scale[nonvr] = np.hypot(state.omega[self.subtype_idx[sub]], v[nonvr])

        out = normal_logpdf(resid, mean, scale)
        tb = br == Branch.T
        if tb.any():
            out[tb] = t_logpdf(resid[tb], mean[tb], scale[tb], state.nu)
        return out

    # ---- 先驗（向量化組件） ----

    def country_logprior(self, c: CountryBlock, x: np.ndarray, log_sigma: float) -> float:
        lp = float(lambda0_logprior(x[0], self.priors)) + float(lambda1_logprior(x[1], self.priors, self.interval))
        if not math.isfinite(lp):
            return -math.inf
        return lp + float(np.sum(normal_logpdf(x[2:], 0.0, math.exp(log_sigma))))

    def sigma_logprior(self, state: ModelState, log_sigma: np.ndarray) -> np.ndarray:
        """log N(log σ_c; χ, φ_σ²) for hierarchical countries, 0 otherwise"""
        out = np.zeros_like(log_sigma)
        h = self.hier_countries
        if h.size:
            out[h] = normal_logpdf(log_sigma[h], state.chi, state.phi_sigma)
        return out

    def beta_logprior(self, state: ModelState, beta0: np.ndarray, beta1: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        t = self.series_type
        return (
            normal_logpdf(beta0, state.mu0[t], state.phi0[t]),
            normal_logpdf(beta1, state.mu1[t], state.phi1[t]),
        )

    def global_logprior(self, state: ModelState) -> Dict[str, float]:
        pr = self.priors
        terms = {
            "chi": float(normal_logpdf(state.chi, pr.chi_mean, pr.chi_sd)),
            "phi_sigma": float(uniform_logpdf(state.phi_sigma, 0.0, pr.phi_upper)),
            "nu": float(uniform_logpdf(state.nu, *pr.nu_range)),
        }
        for t in self.active_types:
            m, s = pr.mu0_prior(TYPES[t])
            terms[f"mu0[{TYPES[t].value}]"] = float(normal_logpdf(state.mu0[t], m, s))
        for t in self.repeated_types:
            d = TYPES[t].value
            terms[f"phi0[{d}]"] = float(uniform_logpdf(state.phi0[t], 0.0, pr.phi_upper))
            terms[f"mu1[{d}]"] = float(normal_logpdf(state.mu1[t], 0.0, pr.mu1_sd))
            terms[f"phi1[{d}]"] = float(uniform_logpdf(state.phi1[t], 0.0, pr.phi_upper))
        for s in self.active_subtypes:
            terms[f"omega[{SUBTYPES[s].value}]"] = float(uniform_logpdf(state.omega[s], 0.0, pr.omega_upper))
        return terms

    # ---- 界限 ----

    def bounds_ok(self, c: CountryBlock, x: np.ndarray, L: np.ndarray) -> bool:
        if c.bound_idx.size == 0:
            return True
        psi = c.Xb @ x
        lower = L[c.bound_idx]
        return bool(np.all(psi > lower) and np.all(psi < lower + self.bound_offset[c.bound_idx]))

    def bound_constraints(self, code: str) -> List[BoundConstraint]:
        return [b for b in self.bounds if b.country_code == code]

    # ---- 聯合後驗 ----

    def log_posterior_terms(self, state: ModelState) -> Dict[str, float]:
        """Log posterior split by block, used to locate non-finite terms"""
        terms: Dict[str, float] = {}
        if not self.country_mode:
            terms.update(self.global_logprior(state))
        for c in self.countries:
            x = state.x[c.index]
            lp = self.country_logprior(c, x, state.log_sigma[c.index])
            lp += float(np.sum(self.obs_loglik(state, np.arange(c.obs_slice.start, c.obs_slice.stop), psi=c.X @ x)))
            if not self.bounds_ok(c, x, state.L):
                lp = -math.inf
            if c.has_theta:
                lp += float(uniform_logpdf(state.theta[c.index], 0.0, 1.0))
            terms[f"country[{c.code}]"] = lp
        terms["smoothing"] = float(np.sum(self.sigma_logprior(state, state.log_sigma)))
        if self.bounds:
            terms["bounds"] = float(np.sum(normal_logpdf(state.L, self.bound_y, self.bound_v)))
        if self.series:
            b0, b1 = self.beta_logprior(state, state.beta0, state.beta1)
            terms["series"] = float(np.sum(b0) + np.sum(b1))
        return terms

    def log_posterior(self, state: ModelState) -> float:
        total = sum(self.log_posterior_terms(state).values())
        return total if math.isfinite(total) else -math.inf

    # ---- 參數名稱與輸出 ----

    def global_param_names(self) -> List[str]:
        if self.country_mode:
            return []
        names = ["chi", "phi_sigma"]
        names += [f"mu0[{TYPES[t].value}]" for t in self.active_types]
        for prefix in ("phi0", "mu1", "phi1"):
            names += [f"{prefix}[{TYPES[t].value}]" for t in self.repeated_types]
        names += [f"omega[{SUBTYPES[s].value}]" for s in self.active_subtypes]
        names.append("nu")
        return names

    def param_names(self) -> List[str]:
        names = self.global_param_names()
        for c in self.countries:
            cc = c.code
            names += [f"lambda0[{cc}]", f"lambda1[{cc}]", f"sigma[{cc}]"]
            if c.has_theta:
                names.append(f"theta_vr[{cc}]")
            names += [f"eps[{cc},{q + 1}]" for q in range(c.basis.Q)]
            names += [f"alpha[{cc},{k + 1}]" for k in range(c.basis.K)]
            names += [f"bound_L[{cc},{self.bounds[b].year!r}]" for b in c.bound_idx]
        for s in self.series:
            names += [f"beta0[{s.series_id}]", f"beta1[{s.series_id}]"]
        return names

    def state_vector(self, state: ModelState) -> np.ndarray:
        parts: List[np.ndarray] = []
        if not self.country_mode:
            parts.append(np.array([state.chi, state.phi_sigma]))
            parts.append(state.mu0[self.active_types])
            parts.append(state.phi0[self.repeated_types])
            parts.append(state.mu1[self.repeated_types])
            parts.append(state.phi1[self.repeated_types])
            parts.append(state.omega[self.active_subtypes])
            parts.append(np.array([state.nu]))
        for c in self.countries:
            x = state.x[c.index]
            head = [x[0], x[1], math.exp(state.log_sigma[c.index])]
            if c.has_theta:
                head.append(state.theta[c.index])
            parts.append(np.array(head))
            parts.append(x[2:])
            parts.append(c.alpha(x))
            parts.append(state.L[c.bound_idx])
        for s in range(len(self.series)):
            parts.append(np.array([state.beta0[s], state.beta1[s]]))
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])

    def globals_from_medians(self, medians: Mapping[str, float]) -> GlobalParams:
        """Point values of the starred parameters from posterior medians"""
        if self.country_mode:
            return self.fixed_globals
        try:
            return GlobalParams(
                chi=medians["chi"],
                phi_sigma=medians["phi_sigma"],
                mu0={TYPES[t]: medians[f"mu0[{TYPES[t].value}]"] for t in self.active_types},
                phi0={TYPES[t]: medians[f"phi0[{TYPES[t].value}]"] for t in self.repeated_types},
                mu1={TYPES[t]: medians[f"mu1[{TYPES[t].value}]"] for t in self.repeated_types},
                phi1={TYPES[t]: medians[f"phi1[{TYPES[t].value}]"] for t in self.repeated_types},
                omega={SUBTYPES[s]: medians[f"omega[{SUBTYPES[s].value}]"] for s in self.active_subtypes},
                nu=medians["nu"],
            )
        except KeyError as e:
            raise ModelError(f"incomplete posterior: missing {e.args[0]}") from e

    # ---- 高斯近似（提案分布的前置條件） ----

    def country_precision(self, c: CountryBlock, state: ModelState) -> np.ndarray:
        """Precision of the Gaussian approximation to p(λ0, λ1, ε | rest)"""
        pr = self.priors
        a, b = pr.lambda0_exp_range
        lo, hi = pr.lambda1_per_year_range
        prior_prec = np.concatenate([
            [12.0 / (math.log(b) - math.log(a)) ** 2, 12.0 / ((hi - lo) * self.interval) ** 2],
            np.full(c.basis.Q, math.exp(-2.0 * state.log_sigma[c.index])),
        ])
        H = np.diag(prior_prec)
        if self.use_likelihood and c.X.shape[0]:
            idx = np.arange(c.obs_slice.start, c.obs_slice.stop)
            scale2 = self.v[idx] ** 2
            nonvr = self.branch[idx] >= Branch.NORMAL
            scale2[nonvr] += state.omega[self.subtype_idx[idx][nonvr]] ** 2
            tb = self.branch[idx] == Branch.T
            if state.nu > 2:
                scale2[tb] *= state.nu / (state.nu - 2.0)
            H = H + c.X.T @ (c.X / scale2[:, None])
        return H
