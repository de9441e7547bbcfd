"""
Cubic B-spline bases on equally spaced knots and the second-order difference reparameterization
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import BSpline

from app.observability.logging import get_logger
from src.services.exceptions import BasisError

logger = get_logger(__name__)

DEGREE = 3
# 浮點誤差容忍度（年）
_SPAN_TOL = 1e-9


def difference_matrix(n: int) -> np.ndarray:
    """(n-2) × n 二階差分矩陣，每列為 (1, -2, 1)"""
    if n < 3:
        raise BasisError(f"second differences need at least 3 coefficients, got {n}")
    return np.diff(np.eye(n), n=2, axis=0)


def pseudo_inverse_factor(D: np.ndarray) -> np.ndarray:
    """D'(DD')^{-1}"""
    return np.linalg.solve(D @ D.T, D).T


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """One country's B-spline basis

    樣條 k 以錨點節點 T_k 為中心，支撐區間為 [T_k - 2I, T_k + 2I]。
    coef_map 將 K 個觀測期間樣條對應到自由係數（衝突期間合併後數量減少）。
    """

    interval: float
    anchors: np.ndarray
    K: int
    first_year: float
    last_year: float
    projection_end_year: float
    coef_map: np.ndarray = field(default=None)
    positions: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.coef_map is None:
            object.__setattr__(self, "coef_map", np.arange(self.K))
        if self.positions is None:
            object.__setattr__(self, "positions", np.arange(1, self.K + 1, dtype=float))
        D = difference_matrix(self.n_free)
        object.__setattr__(self, "_D", D)
        object.__setattr__(self, "_A", pseudo_inverse_factor(D))

    # ---- 維度 ----

    @property
    def P(self) -> int:
        return len(self.anchors)

    @property
    def n_free(self) -> int:
        return int(self.coef_map.max()) + 1

    @property
    def Q(self) -> int:
        return self.n_free - 2

    @property
    def D(self) -> np.ndarray:
        return self._D

    @property
    def A(self) -> np.ndarray:
        return self._A

    @property
    def knot_vector(self) -> np.ndarray:
        """完整節點向量 τ_j = T_1 - 2I + jI，j = 0..P+3"""
        return self.anchors[0] - 2 * self.interval + self.interval * np.arange(self.P + 4)

    @property
    def span(self) -> Tuple[float, float]:
        """可求值區間 [T_1 + I, T_P - I]"""
        return float(self.anchors[0] + self.interval), float(self.anchors[-1] - self.interval)

    @property
    def observation_span(self) -> Tuple[float, float]:
        return float(self.anchors[0] + self.interval), float(self.anchors[self.K - 1] - self.interval)

    @property
    def is_merged(self) -> bool:
        return self.n_free < self.K

    # ---- 求值 ----

    def design(self, t, projection: bool = True) -> np.ndarray:
        """Basis matrix, shape (len(t), P) or (len(t), K)"""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.span if projection else self.observation_span
        if np.any(t < lo - _SPAN_TOL) or np.any(t > hi + _SPAN_TOL):
            raise BasisError(f"time outside basis span [{lo}, {hi}]")
        tau = self.knot_vector
        t = np.clip(t, tau[DEGREE], tau[self.P])
        B = BSpline.design_matrix(t, tau, DEGREE).toarray()
        return B if projection else B[:, : self.K]

    def expand(self, free: np.ndarray) -> np.ndarray:
        """Free coefficients (..., n_free) -> spline coefficients (..., K)"""
        return np.asarray(free)[..., self.coef_map]

    def with_merges(self, coef_map: np.ndarray) -> "SplineBasis":
        coef_map = np.asarray(coef_map, dtype=int)
        if coef_map.shape != (self.K,):
            raise BasisError("coefficient map must cover all K splines")
        n_free = int(coef_map.max()) + 1
        positions = np.array([np.mean(np.flatnonzero(coef_map == r) + 1) for r in range(n_free)])
        return replace(self, coef_map=coef_map, positions=positions)


def make_basis(
    first_obs_year: float,
    last_obs_year: float,
    projection_end_year: float,
    interval: float = 2.5,
) -> SplineBasis:
    """建立國家的樣條基底

    T_K = t_n + 1.5·I；左側節點延伸到 first_obs_year 至少落在 T_1 + I，
    右側延伸到 projection_end_year ≤ T_P - I。

    Raises:
        BasisError: 觀測期間短於一個區間 I，或年份順序錯誤
    """
    if interval <= 0:
        raise BasisError("interval must be positive")
    if not first_obs_year < last_obs_year:
        raise BasisError("first_obs_year must precede last_obs_year")
    if last_obs_year - first_obs_year < interval:
        raise BasisError(
            f"observation span {last_obs_year - first_obs_year:.2f} shorter than interval {interval}"
        )
    if projection_end_year < last_obs_year:
        raise BasisError("projection_end_year precedes last_obs_year")

    t_K = last_obs_year + 1.5 * interval
    n_left = math.ceil((t_K - first_obs_year + interval) / interval - 1e-12)
    K = n_left + 1
    n_right = max(math.ceil((projection_end_year + interval - t_K) / interval - 1e-12), 0)
    P = K + n_right

    anchors = t_K + interval * (np.arange(1, P + 1) - K)
    basis = SplineBasis(
        interval=interval,
        anchors=anchors,
        K=K,
        first_year=first_obs_year,
        last_year=last_obs_year,
        projection_end_year=projection_end_year,
    )
    logger.debug("Basis constructed", K=K, P=P, t_K=t_K)
    return basis


def eval_basis(basis: SplineBasis, t: float, projection: bool = False) -> np.ndarray:
    """Basis weights at a single time t: K weights, or P with projection=True"""
    return basis.design([t], projection=projection)[0]


def reparam_to_alpha(lambda0, lambda1, eps, basis: SplineBasis) -> np.ndarray:
    """α_k = λ0 + λ1(k - K/2) + [D'(DD')^{-1} ε]_k

    支援批次輸入：lambda0, lambda1 形狀 (...)，eps 形狀 (..., Q)。
    合併後的自由係數以其原始索引平均值為位置，中心仍為原始 K/2。
    回傳自由係數 (..., n_free)。
    """
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1] != basis.Q:
        raise BasisError(f"eps has length {eps.shape[-1]}, expected Q = {basis.Q}")
    lambda0 = np.asarray(lambda0, dtype=float)[..., None]
    lambda1 = np.asarray(lambda1, dtype=float)[..., None]
    centred = basis.positions - basis.K / 2.0
    return lambda0 + lambda1 * centred + eps @ basis.A.T


def merge_conflict_splines(basis: SplineBasis, periods: Sequence[Tuple[float, float]]) -> np.ndarray:
    """將錨點落在衝突期間內的樣條合併為一個係數

    Returns:
        長度 K 的索引陣列，spline k -> 自由係數編號（滿射）

    Raises:
        BasisError: 期間重疊
    """
    ordered = sorted(periods)
    for (s0, e0), (s1, e1) in zip(ordered, ordered[1:]):
        if s1 <= e0:
            raise BasisError(f"conflict periods overlap: ({s0}, {e0}) and ({s1}, {e1})")

    group = np.full(basis.K, -1)
    for p, (start, end) in enumerate(ordered):
        inside = (basis.anchors[: basis.K] >= start - _SPAN_TOL) & (basis.anchors[: basis.K] <= end + _SPAN_TOL)
        if not inside.any():
            logger.warning("Conflict period contains no anchor knots", start=start, end=end)
        group[inside] = p

    mapping = np.empty(basis.K, dtype=int)
    nxt = -1
    prev_group = None
    for k in range(basis.K):
        g = group[k]
        if g < 0 or g != prev_group:
            nxt += 1
        mapping[k] = nxt
        prev_group = g if g >= 0 else None
    return mapping


def fitted_log_rate(free_alpha: np.ndarray, basis: SplineBasis, years) -> np.ndarray:
    """Ψ(t) = Σ b_k(t) α_k over the observation period; shape (..., len(years))"""
    B = basis.design(years, projection=False)
    return basis.expand(free_alpha) @ B.T
