"""
Synthetic data sets drawn from the full generative model
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.observability.logging import get_logger
from src.config import ModelConfig
from src.models.schemas import (
    NORMAL_ERROR_SOURCE_TYPES,
    REPEATED_SOURCE_TYPES,
    GlobalParams,
    Observation,
    SourceType,
    VrStatus,
    subtype_for,
)
from src.services.basis_service import SplineBasis, fitted_log_rate, make_basis, reparam_to_alpha
from src.services.exceptions import DataError
from src.services.ingest_service import vr_stochastic_sd
from src.services.model_service import Z_CENTRE

logger = get_logger(__name__)


class SimulatedCountry(BaseModel):
    """One synthetic country: trend, smoothing and data collection design"""

    code: str
    first_year: float = 1970.0
    last_year: float = 2010.0
    mid_u5mr: float = Field(default=100.0, gt=0, description="觀測期間中點的 U5MR")
    annual_decline: float = Field(default=0.03, description="log 尺度年下降率")
    sigma: float = Field(default=0.1, gt=0)
    survey_type: SourceType = SourceType.DHS_DIRECT
    survey_years: List[float] = Field(default_factory=lambda: [1985.0, 1995.0, 2005.0])
    retrospective_periods: List[float] = Field(default_factory=lambda: [0.5, 3.0, 5.5, 8.0, 10.5, 13.0])
    survey_se: Optional[float] = Field(default=0.08, gt=0)
    single_sources: List[Tuple[SourceType, float]] = Field(default_factory=list, description="(類型, 參考年) 非重複來源")
    vr_years: List[float] = Field(default_factory=list)
    vr_births: float = Field(default=100000.0, gt=0)


def default_truth() -> GlobalParams:
    """Generating hyperparameters close to the prior centres"""
    return GlobalParams(
        chi=-2.3,
        phi_sigma=0.5,
        mu0={t: (-0.0123 if t == SourceType.DHS_DIRECT else 0.0) for t in SourceType if t != SourceType.VR},
        phi0={t: 0.05 for t in REPEATED_SOURCE_TYPES},
        mu1={t: 0.0 for t in REPEATED_SOURCE_TYPES},
        phi1={t: 0.005 for t in REPEATED_SOURCE_TYPES},
        omega={subtype_for(t, se): 0.05 for t in SourceType if t != SourceType.VR for se in (True, False)},
        nu=5.0,
    )


@dataclass
class SimulatedData:
    observations: List[Observation]
    bases: Dict[str, SplineBasis] = field(default_factory=dict)
    alphas: Dict[str, np.ndarray] = field(default_factory=dict)

    def log_rate(self, code: str, years: Sequence[float]) -> np.ndarray:
        return fitted_log_rate(self.alphas[code], self.bases[code], years)


def simulate_dataset(
    countries: Sequence[SimulatedCountry],
    truth: Optional[GlobalParams] = None,
    config: Optional[ModelConfig] = None,
    seed: int = 0,
) -> SimulatedData:
    """依生成模型抽取觀測值

    Ψ_c(t) = Σ b_k(t) α_k，α 由 (λ0, λ1, ε) 重新參數化；調查系列帶有
    β0 + β1(z - 10) 的偏差與 ω 的非抽樣誤差，VR 只有抽樣誤差。
    """
    truth = truth or default_truth()
    config = config or ModelConfig()
    interval = config.spline.interval
    data = SimulatedData(observations=[])

    for ci, country in enumerate(sorted(countries, key=lambda c: c.code)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, ci, 4]))
        basis = make_basis(country.first_year, country.last_year, country.last_year, interval)
        eps = country.sigma * rng.standard_normal(basis.Q)
        alpha = reparam_to_alpha(np.log(country.mid_u5mr), -country.annual_decline * interval, eps, basis)
        data.bases[country.code] = basis
        data.alphas[country.code] = alpha

        def psi(years: Sequence[float]) -> np.ndarray:
            return fitted_log_rate(alpha, basis, years)

        for s_index, survey_year in enumerate(country.survey_years):
            sid = f"{country.code}-{country.survey_type.value}-{s_index + 1}"
            d = country.survey_type
            ref_years = [survey_year - z for z in country.retrospective_periods if survey_year - z >= country.first_year]
            ref_years = [t for t in ref_years if t <= country.last_year]
            if not ref_years:
                continue
            if d in REPEATED_SOURCE_TYPES:
                beta0 = truth.mu0[d] + truth.phi0[d] * rng.standard_normal()
                beta1 = truth.mu1[d] + truth.phi1[d] * rng.standard_normal()
            omega = truth.omega[subtype_for(d, country.survey_se is not None)]
            v = country.survey_se if country.survey_se is not None else config.unreported_se.for_type(d)
            scale = float(np.hypot(omega, v))
            truth_psi = psi(ref_years)
            for t, mean in zip(ref_years, truth_psi):
                z = survey_year - t
                bias = beta0 + beta1 * (z - Z_CENTRE) if d in REPEATED_SOURCE_TYPES else truth.mu0[d]
                noise = rng.standard_normal() if d in NORMAL_ERROR_SOURCE_TYPES else rng.standard_t(truth.nu)
                data.observations.append(
                    Observation(
                        country_code=country.code,
                        ref_year=t,
                        u5mr=float(np.exp(mean + bias + scale * noise)),
                        series_id=sid,
                        source_type=d,
                        survey_year=survey_year,
                        reported_se=country.survey_se,
                    )
                )

        for s_index, (d, t) in enumerate(country.single_sources):
            if d == SourceType.VR or d in REPEATED_SOURCE_TYPES:
                raise DataError(f"single_sources takes non-repeated survey types, got {d.value}")
            v = config.unreported_se.for_type(d)
            scale = float(np.hypot(truth.omega[subtype_for(d, False)], v))
            noise = rng.standard_normal() if d in NORMAL_ERROR_SOURCE_TYPES else rng.standard_t(truth.nu)
            data.observations.append(
                Observation(
                    country_code=country.code,
                    ref_year=t,
                    u5mr=float(np.exp(psi([t])[0] + truth.mu0[d] + scale * noise)),
                    series_id=f"{country.code}-{d.value}-{s_index + 1}",
                    source_type=d,
                    survey_year=t,
                )
            )

        if country.vr_years:
            true_rate = np.exp(psi(country.vr_years))
            for t, rate in zip(country.vr_years, true_rate):
                v = vr_stochastic_sd(
                    country.vr_births, float(rate), sample_vr=False, reported_se=None,
                    floor=config.vr.floor_sd, svr_sd=config.vr.svr_sd,
                )
                u = float(rate * np.exp(v * rng.standard_normal()))
                data.observations.append(
                    Observation(
                        country_code=country.code,
                        ref_year=t,
                        u5mr=u,
                        series_id=f"{country.code}-vr",
                        source_type=SourceType.VR,
                        vr_status=VrStatus.COMPLETE,
                        births=country.vr_births,
                        deaths=country.vr_births * u / 1000.0,
                    )
                )

    logger.info("Synthetic data simulated", countries=len(countries), observations=len(data.observations))
    return data
