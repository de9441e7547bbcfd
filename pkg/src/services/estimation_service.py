"""
Fit orchestration: model assembly, sampling, global change distribution and projections
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.observability.logging import get_logger
from src.config import ModelConfig
from src.models.schemas import NORMAL_ERROR_SOURCE_TYPES, REPEATED_SOURCE_TYPES, GlobalParams, Observation, SamplerConfig
from src.services.diagnostics_service import Diagnostics
from src.services.model_service import SUBTYPES, TYPES, Z_CENTRE, B3Model
from src.services.projection_service import (
    GlobalChangeDist,
    build_global_dist,
    first_difference_medians,
    project_countries,
)
from src.services.sampler_service import PosteriorSample, run_country, run_global

logger = get_logger(__name__)


@dataclass
class FitResult:
    """One fitted model plus its projections per pooling weight"""

    model: B3Model
    sample: PosteriorSample
    diagnostics: Diagnostics
    dist: GlobalChangeDist
    projections: Dict[float, Dict[str, np.ndarray]] = field(default_factory=dict)

    def alpha(self, code: str) -> np.ndarray:
        return self.sample.alpha(code, self.model.block(code).basis.K)

    def sigma(self, code: str) -> np.ndarray:
        return self.sample.flat(f"sigma[{code}]")

    def project(self, W: float, seed: int) -> Dict[str, np.ndarray]:
        """投影所有國家的係數；同一 seed 在不同 W 下共用亂數（結果對 W 連續）"""
        if W not in self.projections:
            codes = self.model.country_codes
            self.projections[W] = project_countries(
                {c: self.alpha(c) for c in codes},
                {c: self.sigma(c) for c in codes},
                {c: self.model.block(c).basis for c in codes},
                self.dist,
                W,
                seed,
            )
        return self.projections[W]

    def hyper_draws(self, name: str) -> np.ndarray:
        """Draws of a global parameter; constant in country mode"""
        if name in self.sample:
            return self.sample.flat(name)
        g = self.model.fixed_globals
        if g is None:
            raise KeyError(name)
        value = _lookup_global(g, name)
        return np.full(self.sample.n_draws, value)

    def global_params(self) -> GlobalParams:
        g = self.model.globals_from_medians(self.sample.medians())
        return g.model_copy(update={"change_median": self.dist.G, "change_variance": self.dist.V})


def _lookup_global(g: GlobalParams, name: str) -> float:
    if name in ("chi", "phi_sigma", "nu"):
        value = getattr(g, name)
    else:
        prefix, key = name[:-1].split("[", 1)
        table = getattr(g, prefix)
        lookup = {k.value: v for k, v in table.items()}
        if key not in lookup:
            raise KeyError(name)
        value = lookup[key]
    if value is None:
        raise KeyError(name)
    return float(value)


def global_change_dist(model: B3Model, sample: PosteriorSample) -> GlobalChangeDist:
    gamma_hat = [first_difference_medians(sample.alpha(c.code, c.basis.K)) for c in model.countries]
    return build_global_dist(np.concatenate(gamma_hat) if gamma_hat else [])


def fit(
    observations: Sequence[Observation],
    model_config: ModelConfig,
    sampler_config: SamplerConfig,
    *,
    fixed_globals: Optional[GlobalParams] = None,
    projection_end_year: Optional[float] = None,
    drop_unfittable: bool = False,
) -> FitResult:
    """組裝模型並抽樣

    國家模式（fixed_globals 已給定）時 G、V 取自超參數檔，不重新估計。
    """
    country_mode = fixed_globals is not None
    model = B3Model.assemble(
        observations,
        model_config,
        country_mode=country_mode,
        fixed_globals=fixed_globals,
        projection_end_year=projection_end_year,
        drop_unfittable=drop_unfittable,
    )
    if country_mode:
        sample, diagnostics = run_country(model, sampler_config)
        if fixed_globals.change_median is not None and fixed_globals.change_variance is not None:
            dist = GlobalChangeDist(G=fixed_globals.change_median, V=fixed_globals.change_variance)
        else:
            logger.warning("Hyperparameter file has no change distribution, estimating from this run")
            dist = global_change_dist(model, sample)
    else:
        sample, diagnostics = run_global(model, sampler_config)
        dist = global_change_dist(model, sample)
    return FitResult(model=model, sample=sample, diagnostics=diagnostics, dist=dist)


def bias_prediction_intervals(
    result: FitResult,
    retrospective_periods: Sequence[float] = (5.0, 15.0),
    true_u5mr: float = 100.0,
    seed: int = 0,
) -> pd.DataFrame:
    """新系列在真實 U5MR 下的預測觀測值

    每個來源類型回報預測的平均觀測 U5MR 及兩種 90% 預測區間：
    只含偏差，以及偏差加上非抽樣誤差。
    """
    model = result.model
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    n = result.sample.n_draws
    log_true = np.log(true_u5mr)
    rows: List[dict] = []

    for t in model.active_types:
        d = TYPES[t]
        subtypes = [SUBTYPES[s] for s in sorted({int(s) for s in model.subtype_idx[model.obs_by_type[t]]})]
        omega = np.mean([result.hyper_draws(f"omega[{s.value}]") for s in subtypes], axis=0)
        nu = None if d in NORMAL_ERROR_SOURCE_TYPES else result.hyper_draws("nu")
        for z in retrospective_periods:
            if d in REPEATED_SOURCE_TYPES:
                beta0 = result.hyper_draws(f"mu0[{d.value}]") + result.hyper_draws(f"phi0[{d.value}]") * rng.standard_normal(n)
                beta1 = result.hyper_draws(f"mu1[{d.value}]") + result.hyper_draws(f"phi1[{d.value}]") * rng.standard_normal(n)
                bias = beta0 + beta1 * (z - Z_CENTRE)
            else:
                bias = result.hyper_draws(f"mu0[{d.value}]")
            noise = rng.standard_normal(n) if nu is None else rng.standard_t(nu)
            with_error = bias + omega * noise
            biased = np.exp(log_true + bias)
            observed = np.exp(log_true + with_error)
            rows.append({
                "source_type": d.value,
                "retrospective_period": z,
                "mean_observed": float(np.mean(observed)),
                "bias_lower90": float(np.quantile(biased, 0.05)),
                "bias_upper90": float(np.quantile(biased, 0.95)),
                "total_lower90": float(np.quantile(observed, 0.05)),
                "total_upper90": float(np.quantile(observed, 0.95)),
            })
    return pd.DataFrame(rows)
