"""
Spline coefficient projection by logarithmic pooling and posterior trajectories
"""
from __future__ import annotations

import math
from typing import Dict, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from app.observability.logging import get_logger
from src.services.basis_service import SplineBasis
from src.services.diagnostics_service import posterior_summary
from src.services.exceptions import BasisError, ProjectionError

logger = get_logger(__name__)


class GlobalChangeDist(BaseModel):
    """Median G and variance V of posterior-median first differences"""

    G: float
    V: float = Field(..., gt=0)
    n_values: int = 0


class PoolStep(NamedTuple):
    Gamma: np.ndarray
    Theta: np.ndarray
    weight: np.ndarray
    gamma: Optional[np.ndarray] = None


class Trajectory(NamedTuple):
    years: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    draws: np.ndarray


def first_difference_medians(alpha: np.ndarray) -> np.ndarray:
    """γ̂_k = median(α_k - α_{k-1}) for observation-period indices k = 2..K-1

    alpha 形狀 (draws, K)。
    """
    alpha = np.asarray(alpha, dtype=float)
    K = alpha.shape[1]
    if K < 3:
        return np.empty(0)
    gamma = np.diff(alpha[:, : K - 1], axis=1)
    return np.median(gamma, axis=0)


def build_global_dist(gamma_hat: Sequence[float]) -> GlobalChangeDist:
    """G = median, V = 樣本變異數（n-1 分母）

    Raises:
        ProjectionError: 少於 2 個值或 V 退化為 0
    """
    values = np.asarray(gamma_hat, dtype=float)
    if values.size < 2:
        raise ProjectionError("global change distribution needs at least 2 first differences")
    V = float(np.var(values, ddof=1))
    if not V > 0:
        raise ProjectionError("degenerate global change distribution (V = 0)")
    G = float(np.median(values))
    logger.info("Global change distribution", G=round(G, 6), V=round(V, 8), n=int(values.size))
    return GlobalChangeDist(G=G, V=V, n_values=int(values.size))


def pool_step(
    prev_gamma,
    prev_theta,
    dist: GlobalChangeDist,
    W: float,
    rng: Optional[np.random.Generator] = None,
) -> PoolStep:
    """一步對數池化

    Γ = W·G + (1-W)·γ_prev，Θ = W·V + (1-W)·Θ_prev，γ_new ~ N(Γ, Θ)。
    weight 為隱含的池化權重 w = W·V / (W·V + (1-W)·Θ_prev)。
    """
    if not 0.0 <= W <= 1.0:
        raise ProjectionError("pooling weight W must lie in [0, 1]")
    prev_gamma = np.asarray(prev_gamma, dtype=float)
    prev_theta = np.asarray(prev_theta, dtype=float)
    if np.any(prev_theta <= 0):
        raise ProjectionError("previous pooled variance must be positive")

    Gamma = W * dist.G + (1.0 - W) * prev_gamma
    Theta = W * dist.V + (1.0 - W) * prev_theta
    weight = W * dist.V / (W * dist.V + (1.0 - W) * prev_theta)
    gamma = None
    if rng is not None:
        gamma = Gamma + np.sqrt(Theta) * rng.standard_normal(Gamma.shape)
    return PoolStep(Gamma=Gamma, Theta=Theta, weight=weight, gamma=gamma)


def theta_closed_form(a: int, W: float, V: float, sigma2: float) -> float:
    """Θ_a = V(1 - (1-W)^a) + (1-W)^a σ²"""
    decay = (1.0 - W) ** a
    return V * (1.0 - decay) + decay * sigma2


_warned_theta_start = False


def project_coefficients(
    alpha: np.ndarray,
    sigma: np.ndarray,
    basis: SplineBasis,
    dist: GlobalChangeDist,
    W: float = 0.5,
    rng: Optional[np.random.Generator] = None,
    through: Optional[int] = None,
) -> np.ndarray:
    """延伸 α 至索引 P（α_K 本身也被投影取代）

    Args:
        alpha: (draws, K) 觀測期間係數
        sigma: (draws,) 平滑標準差 σ_c
        through: 投影到的索引（預設 basis.P）

    Returns:
        (draws, through) 係數
    """
    global _warned_theta_start
    P = basis.P if through is None else through
    K = basis.K
    if P < K:
        raise ProjectionError(f"projection index {P} precedes K = {K}")
    alpha = np.asarray(alpha, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if alpha.shape[1] != K or alpha.shape[0] != sigma.shape[0]:
        raise ProjectionError("alpha/sigma draws do not match the basis")
    if not _warned_theta_start:
        logger.info("Pooling recursion starts from the smoothing variance sigma^2 (not sigma)")
        _warned_theta_start = True
    rng = rng or np.random.default_rng(0)

    out = np.empty((alpha.shape[0], P))
    out[:, : K - 1] = alpha[:, : K - 1]
    gamma = alpha[:, K - 2] - alpha[:, K - 3]
    theta = sigma ** 2
    for k in range(K - 1, P):
        step = pool_step(gamma, theta, dist, W, rng)
        gamma, theta = step.gamma, step.Theta
        out[:, k] = out[:, k - 1] + gamma
    return out


def trajectory(alpha: np.ndarray, basis: SplineBasis, years: Sequence[float]) -> Trajectory:
    """Λ(t) = exp(Σ b_k(t) α_k)，回傳中位數與 90% 區間

    alpha 形狀 (draws, K) 或 (draws, P)。
    """
    alpha = np.asarray(alpha, dtype=float)
    years = np.asarray(years, dtype=float)
    try:
        B = basis.design(years, projection=alpha.shape[1] > basis.K)
    except BasisError as e:
        raise ProjectionError(str(e)) from e
    draws = np.exp(alpha @ B[:, : alpha.shape[1]].T)
    summary = posterior_summary(draws, (0.05, 0.5, 0.95))
    return Trajectory(years=years, median=summary[0.5], lower=summary[0.05], upper=summary[0.95], draws=draws)


def year_grid(basis: SplineBasis) -> np.ndarray:
    """整數年份網格，從第一個觀測年到投影終點"""
    start = math.ceil(basis.first_year)
    end = math.floor(min(basis.projection_end_year, basis.span[1]))
    return np.arange(start, end + 1, dtype=float)


def project_countries(
    alphas: Dict[str, np.ndarray],
    sigmas: Dict[str, np.ndarray],
    bases: Dict[str, SplineBasis],
    dist: GlobalChangeDist,
    W: float,
    seed: int,
) -> Dict[str, np.ndarray]:
    """每個國家使用獨立且固定的亂數串流 (seed, 國家序號)"""
    out = {}
    for i, code in enumerate(sorted(alphas)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i, 1]))
        out[code] = project_coefficients(alphas[code], sigmas[code], bases[code], dist, W, rng)
    return out
