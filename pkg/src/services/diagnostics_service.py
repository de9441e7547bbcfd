"""
MCMC convergence diagnostics and posterior summaries
"""
from __future__ import annotations

import math
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from app.observability.logging import get_logger
from src.services.exceptions import DiagnosticsError

logger = get_logger(__name__)

DEFAULT_QUANTILES = (0.05, 0.5, 0.95)


class RHat(NamedTuple):
    value: float
    zero_within_variance: bool = False


class Diagnostics(BaseModel):
    """Per-parameter convergence statistics"""

    rhat: Dict[str, float] = Field(default_factory=dict)
    ess: Dict[str, float] = Field(default_factory=dict)
    flagged: List[str] = Field(default_factory=list, description="within-chain variance 為零的參數")
    acceptance: Dict[str, float] = Field(default_factory=dict)
    n_chains: int = 0
    n_draws: int = 0

    @property
    def max_rhat(self) -> float:
        finite = [v for v in self.rhat.values() if math.isfinite(v)]
        return max(finite) if finite else float("nan")

    def failing(self, threshold: float) -> List[str]:
        return sorted(k for k, v in self.rhat.items() if math.isfinite(v) and v > threshold)


def gelman_rubin(chains) -> RHat:
    """Potential scale reduction factor

    chains 形狀 (m, n)：m 條鏈、每條 n 個抽樣。
    W 以 n-1 為分母；V = (n-1)/n·W + B/n；R = sqrt(V/W)。

    Raises:
        DiagnosticsError: 少於 2 條鏈或每條少於 10 個抽樣
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise DiagnosticsError("gelman_rubin needs at least 2 chains")
    m, n = chains.shape
    if n < 10:
        logger.debug("Few draws per chain for R-hat", draws=n)
    if n < 2:
        raise DiagnosticsError("gelman_rubin needs at least 2 draws per chain")

    chain_means = chains.mean(axis=1)
    W = chains.var(axis=1, ddof=1).mean()
    B = n * chain_means.var(ddof=1)
    if W <= 0:
        return RHat(value=1.0 if B <= 0 else float("inf"), zero_within_variance=True)
    var_hat = (n - 1) / n * W + B / n
    return RHat(value=float(math.sqrt(var_hat / W)))


def effective_sample_size(chains) -> float:
    """Multi-chain ESS with Geyer's initial positive sequence truncation"""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim == 1:
        chains = chains[None, :]
    m, n = chains.shape
    if n < 4:
        return float(m * n)

    centred = chains - chains.mean(axis=1, keepdims=True)
    size = 2 ** int(math.ceil(math.log2(2 * n)))
    spectrum = np.fft.rfft(centred, n=size, axis=1)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=1)[:, :n] / n
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    if W <= 0:
        return float("nan")
    B_over_n = chains.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B_over_n
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    # 初始正序列：相鄰兩項和 Γ_k 為正時累加，並強制單調遞減
    total = 0.0
    prev = math.inf
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(m * n)) if m * n > 10 else max(tau, 1e-12)
    return float(m * n / tau)


def posterior_summary(draws, quantiles: Sequence[float] = DEFAULT_QUANTILES, axis: int = 0) -> Dict[float, np.ndarray]:
    """Quantiles of posterior draws (type-7 linear interpolation)"""
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise DiagnosticsError("posterior_summary needs at least one draw")
    values = np.quantile(draws, quantiles, axis=axis, method="linear")
    return {q: values[i] for i, q in enumerate(quantiles)}


def diagnose(
    names: Sequence[str],
    draws: np.ndarray,
    acceptance: Optional[Mapping[str, float]] = None,
    skip_prefixes: Iterable[str] = ("alpha[",),
) -> Diagnostics:
    """R-hat and ESS for every reported parameter

    draws 形狀 (chains, keep, n_params)。
    """
    skip = tuple(skip_prefixes)
    m, n, _ = draws.shape
    report = Diagnostics(n_chains=m, n_draws=n, acceptance=dict(acceptance or {}))
    for j, name in enumerate(names):
        if name.startswith(skip):
            continue
        column = draws[:, :, j]
        report.ess[name] = effective_sample_size(column)
        if m < 2:
            continue
        rh = gelman_rubin(column)
        report.rhat[name] = rh.value
        if rh.zero_within_variance:
            report.flagged.append(name)

    if report.flagged:
        logger.warning("Parameters with zero within-chain variance", count=len(report.flagged))
    if report.rhat:
        logger.info("Convergence diagnostics", max_rhat=round(report.max_rhat, 4), parameters=len(report.rhat))
    return report
