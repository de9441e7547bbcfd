"""
Adaptive Metropolis-within-Gibbs sampler for the B3 posterior
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.stats import truncnorm
from tqdm import tqdm

from app.observability.logging import get_logger
from app.observability.metrics import record_acceptance, retained_draws
from src.models.schemas import SamplerConfig
from src.services.diagnostics_service import Diagnostics, diagnose, posterior_summary
from src.services.exceptions import SamplerError, SamplerInitError
from src.services.model_service import (
    SUBTYPES,
    TYPES,
    B3Model,
    ModelState,
    normal_logpdf,
    uniform_logpdf,
)

logger = get_logger(__name__)

TARGET_SCALAR = 0.44
TARGET_JOINT = 0.234
# 調整期間重新計算高斯近似的間隔（迭代數）
PRECONDITION_EVERY = 200


@dataclass
class PosteriorSample:
    """Retained draws of all chains: draws[chain, draw, parameter]"""

    names: List[str]
    draws: np.ndarray
    acceptance: List[Dict[str, float]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self) -> None:
        self.index = {name: j for j, name in enumerate(self.names)}

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_keep(self) -> int:
        return self.draws.shape[1]

    @property
    def n_draws(self) -> int:
        return self.n_chains * self.n_keep

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def param(self, name: str) -> np.ndarray:
        """(chains, keep)"""
        try:
            return self.draws[:, :, self.index[name]]
        except KeyError:
            raise SamplerError(f"parameter {name} not in posterior sample") from None

    def flat(self, name: str) -> np.ndarray:
        return self.param(name).reshape(-1)

    def columns(self, names: Sequence[str]) -> np.ndarray:
        """(chains·keep, len(names))"""
        idx = [self.index[n] for n in names]
        return self.draws[:, :, idx].reshape(self.n_draws, len(idx))

    def alpha(self, code: str, K: int) -> np.ndarray:
        return self.columns([f"alpha[{code},{k}]" for k in range(1, K + 1)])

    def medians(self) -> Dict[str, float]:
        flat = self.draws.reshape(self.n_draws, -1)
        med = posterior_summary(flat, (0.5,))[0.5]
        return {name: float(med[j]) for j, name in enumerate(self.names)}

    def mean_acceptance(self) -> Dict[str, float]:
        keys = sorted({k for a in self.acceptance for k in a})
        return {k: float(np.mean([a[k] for a in self.acceptance if k in a])) for k in keys}


# ==== 初始化 ====

def initial_state(model: B3Model, rng: np.random.Generator, jitter: bool = True) -> ModelState:
    """起始值：λ0 為觀測平均值的 log，λ1 為最小平方斜率，ε = 0，超參數在先驗中點

    各鏈以亂數擾動起始值。
    """
    pr = model.priors
    j = 1.0 if jitter else 0.0
    n_types, n_sub = len(TYPES), len(SUBTYPES)
    C, S = len(model.countries), len(model.series)
    phi_mid = pr.phi_upper / 2.0

    def spread(mid: float, lo: float, hi: float) -> float:
        return mid + j * (hi - lo) * rng.uniform(-0.2, 0.2)

    state = ModelState(
        chi=pr.chi_mean + j * 0.1 * pr.chi_sd * rng.standard_normal(),
        phi_sigma=spread(phi_mid, 0.0, pr.phi_upper),
        mu0=np.zeros(n_types),
        phi0=np.full(n_types, phi_mid),
        mu1=np.zeros(n_types),
        phi1=np.full(n_types, phi_mid),
        omega=np.full(n_sub, pr.omega_upper / 2.0),
        nu=spread(sum(pr.nu_range) / 2.0, *pr.nu_range),
        x=[],
        log_sigma=np.zeros(C),
        theta=np.full(C, np.nan),
        L=np.zeros(len(model.bounds)),
        beta0=np.zeros(S),
        beta1=np.zeros(S),
        psi=np.zeros(model.n_obs),
    )
    for t in model.active_types:
        m, s = pr.mu0_prior(TYPES[t])
        state.mu0[t] = m + j * 0.1 * s * rng.standard_normal()
    for t in model.repeated_types:
        state.phi0[t] = spread(phi_mid, 0.0, pr.phi_upper)
        state.mu1[t] = j * 0.1 * pr.mu1_sd * rng.standard_normal()
        state.phi1[t] = spread(phi_mid, 0.0, pr.phi_upper)
    for s in model.active_subtypes:
        state.omega[s] = spread(pr.omega_upper / 2.0, 0.0, pr.omega_upper)
    if model.country_mode:
        model.state_from_globals(model.fixed_globals, state)

    a, b = pr.lambda0_exp_range
    lo, hi = pr.lambda1_per_year_range
    I = model.interval
    for c in model.countries:
        idx = np.arange(c.obs_slice.start, c.obs_slice.stop)
        years = np.array([model.observations[i].ref_year for i in idx])
        if idx.size:
            level = math.log(float(np.mean(np.exp(model.y[idx]))))
        else:
            level = float(np.mean(model.bound_y[c.bound_idx]))
        slope = 0.0
        if idx.size >= 2 and np.ptp(years) > 0:
            slope = float(np.polyfit(years, model.y[idx], 1)[0]) * I
        lam0 = float(np.clip(level + j * 0.05 * rng.standard_normal(), math.log(a) + 1e-3, math.log(b) - 1e-3))
        lam1 = float(np.clip(slope + j * 0.01 * rng.standard_normal(), 0.98 * lo * I, 0.98 * hi * I))
        x = np.concatenate([[lam0, lam1], np.zeros(c.basis.Q)])
        state.x.append(x)
        state.psi[c.obs_slice] = c.X @ x
        if c.fixed_sigma is not None:
            state.log_sigma[c.index] = math.log(c.fixed_sigma)
        else:
            state.log_sigma[c.index] = state.chi + j * 0.1 * rng.standard_normal()
        if c.has_theta:
            state.theta[c.index] = 0.5 + j * rng.uniform(-0.2, 0.2)

    for si, meta in enumerate(model.series):
        t = model.series_type[si]
        state.beta0[si] = state.mu0[t] + j * 0.01 * rng.standard_normal()
        state.beta1[si] = state.mu1[t] + j * 0.001 * rng.standard_normal()

    if model.bounds:
        _draw_bounds(model, state, rng)
    return state


def _draw_bounds(model: B3Model, state: ModelState, rng: np.random.Generator) -> None:
    """Gibbs step: L ~ N(y, v²) truncated to (Ψ - (U - L), Ψ)"""
    psi = np.empty(len(model.bounds))
    for c in model.countries:
        if c.bound_idx.size:
            psi[c.bound_idx] = c.Xb @ state.x[c.index]
    y, v = model.bound_y, model.bound_v
    lo = (psi - model.bound_offset - y) / v
    hi = (psi - y) / v
    state.L = truncnorm.rvs(lo, hi, loc=y, scale=v, random_state=rng)
    # 機器精度下確保嚴格不等式
    state.L = np.minimum(state.L, np.nextafter(psi, -np.inf))


# ==== 單條鏈 ====

class _Chain:
    def __init__(self, model: B3Model, config: SamplerConfig, chain_index: int):
        self.model = model
        self.config = config
        self.chain_index = chain_index
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, chain_index]))
        self.state = initial_state(model, self.rng)

        terms = model.log_posterior_terms(self.state)
        bad = [k for k, v in terms.items() if not math.isfinite(v)]
        if bad:
            raise SamplerInitError(
                f"non-finite log posterior at initialization (chain {chain_index}, block {bad[0]})",
                block=bad[0],
            )

        C, S = len(model.countries), len(model.series)
        self.s_country = np.array([2.38 / math.sqrt(c.dim) for c in model.countries])
        self.U: List[np.ndarray] = [np.eye(c.dim) for c in model.countries]
        self._precondition()
        self.s_logsig = np.full(C, 0.5)
        self.s_theta = np.full(C, 0.1)
        self.s_beta0 = np.full(S, 0.05)
        self.s_beta1 = np.full(S, 0.005)
        self.sampled_sigma = np.array([c.fixed_sigma is None for c in model.countries])
        self.globals = [] if model.country_mode else self._global_specs()
        self.s_global = np.array([g[1] for g in self.globals])

        self.acc_sum: Dict[str, float] = {}
        self.acc_n: Dict[str, int] = {}

    # ---- 提案尺度 ----

    def _precondition(self) -> None:
        for c in self.model.countries:
            H = self.model.country_precision(c, self.state)
            try:
                self.U[c.index] = cholesky(H, lower=False)
            except LinAlgError:
                logger.warning("Precision not positive definite, keeping previous proposal", country=c.code)

    def _adapt(self, log_scale: np.ndarray, prob: np.ndarray, target: float, it: int) -> np.ndarray:
        gamma = (it + 1.0) ** -0.6
        return np.clip(log_scale + gamma * (prob - target), -15.0, 5.0)

    def _record(self, block: str, accepted) -> None:
        accepted = np.atleast_1d(accepted)
        if accepted.size == 0:
            return
        self.acc_sum[block] = self.acc_sum.get(block, 0.0) + float(np.sum(accepted))
        self.acc_n[block] = self.acc_n.get(block, 0) + accepted.size

    # ---- 各區塊 ----

    def _country_target(self, c, x: np.ndarray) -> float:
        m, st = self.model, self.state
        lp = m.country_logprior(c, x, st.log_sigma[c.index])
        if not math.isfinite(lp) or not m.bounds_ok(c, x, st.L):
            return -math.inf
        idx = np.arange(c.obs_slice.start, c.obs_slice.stop)
        return lp + float(np.sum(m.obs_loglik(st, idx, psi=c.X @ x)))

    def _update_countries(self, it: int, adapting: bool, recording: bool) -> None:
        st = self.state
        for c in self.model.countries:
            x = st.x[c.index]
            z = self.rng.standard_normal(c.dim)
            log_u = math.log(self.rng.uniform())
            prop = x + self.s_country[c.index] * solve_triangular(self.U[c.index], z, lower=False)
            logr = self._country_target(c, prop) - self._country_target(c, x)
            accept = log_u < logr
            if accept:
                st.x[c.index] = prop
                st.psi[c.obs_slice] = c.X @ prop
            if adapting:
                prob = min(1.0, math.exp(min(logr, 0.0))) if math.isfinite(logr) else 0.0
                self.s_country[c.index] = math.exp(
                    self._adapt(np.log(self.s_country[c.index]), prob, TARGET_JOINT, it)
                )
            if recording:
                self._record("country", accept)

    def _sigma_target(self, log_sigma: np.ndarray) -> np.ndarray:
        m, st = self.model, self.state
        ss = np.array([float(np.sum(x[2:] ** 2)) for x in st.x])
        with np.errstate(over="ignore"):
            out = -m.q * log_sigma - ss / (2.0 * np.exp(2.0 * log_sigma))
        return out + m.sigma_logprior(st, log_sigma)

    def _trend_loglik(self, theta: np.ndarray) -> np.ndarray:
        m, st = self.model, self.state
        out = np.zeros(len(m.countries))
        idx = m.trend_obs
        if idx.size == 0 or not m.use_likelihood:
            return out
        cc = m.country[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = normal_logpdf(m.y[idx] - st.psi[idx], np.log(theta[cc]), m.v[idx])
        return np.bincount(cc, weights=ll, minlength=len(m.countries))

    def _mh_vector(self, current, scale, target: Callable[[np.ndarray], np.ndarray], mask, it, adapting, target_rate):
        z = self.rng.standard_normal(current.size)
        log_u = np.log(self.rng.uniform(size=current.size))
        prop = current + scale * z
        with np.errstate(invalid="ignore"):
            logr = target(prop) - target(current)
        logr = np.where(np.isnan(logr), -np.inf, logr)
        accept = (log_u < logr) & mask
        new = np.where(accept, prop, current)
        if adapting:
            prob = np.exp(np.minimum(logr, 0.0))
            scale = np.where(mask, np.exp(self._adapt(np.log(scale), prob, target_rate, it)), scale)
        return new, scale, accept[mask]

    def _update_sigma(self, it, adapting, recording) -> None:
        st = self.state
        st.log_sigma, self.s_logsig, acc = self._mh_vector(
            st.log_sigma, self.s_logsig, self._sigma_target, self.sampled_sigma, it, adapting, TARGET_SCALAR
        )
        if recording:
            self._record("log_sigma", acc)

    def _update_theta(self, it, adapting, recording) -> None:
        m, st = self.model, self.state
        mask = np.zeros(len(m.countries), dtype=bool)
        mask[m.theta_countries] = True
        if not mask.any():
            return

        def target(theta):
            return self._trend_loglik(theta) + np.where(mask, uniform_logpdf(theta, 0.0, 1.0), 0.0)

        st.theta, self.s_theta, acc = self._mh_vector(st.theta, self.s_theta, target, mask, it, adapting, TARGET_SCALAR)
        if recording:
            self._record("theta_vr", acc)

    def _update_series(self, it, adapting, recording) -> None:
        m, st = self.model, self.state
        S = len(m.series)
        if S == 0:
            return
        idx = m.series_obs
        sidx = m.series_idx[idx]
        mask = np.ones(S, dtype=bool)

        def target0(b0):
            ll = np.bincount(sidx, weights=m.obs_loglik(st, idx, beta0=b0), minlength=S)
            return ll + m.beta_logprior(st, b0, st.beta1)[0]

        st.beta0, self.s_beta0, acc0 = self._mh_vector(st.beta0, self.s_beta0, target0, mask, it, adapting, TARGET_SCALAR)

        def target1(b1):
            ll = np.bincount(sidx, weights=m.obs_loglik(st, idx, beta1=b1), minlength=S)
            return ll + m.beta_logprior(st, st.beta0, b1)[1]

        st.beta1, self.s_beta1, acc1 = self._mh_vector(st.beta1, self.s_beta1, target1, mask, it, adapting, TARGET_SCALAR)
        if recording:
            self._record("beta", np.concatenate([acc0, acc1]))

    # ---- 全域超參數 ----

    def _global_specs(self) -> List[Tuple[Tuple[str, Optional[int]], float, Callable[[float], float], Callable[[], float]]]:
        """(欄位, 起始尺度, 先驗, 相關概似項) for each global scalar"""
        m, st, pr = self.model, self.state, self.model.priors

        def smoothing() -> float:
            return float(np.sum(m.sigma_logprior(st, st.log_sigma)))

        def obs_terms(idx):
            return lambda: float(np.sum(m.obs_loglik(st, idx)))

        def beta_terms(t, which):
            series = m.series_by_type[t]

            def fn() -> float:
                b0, b1 = m.beta_logprior(st, st.beta0, st.beta1)
                return float(np.sum((b0 if which == 0 else b1)[series]))
            return fn

        specs = [
            (("chi", None), 0.3, lambda v: normal_logpdf(v, pr.chi_mean, pr.chi_sd), smoothing),
            (("phi_sigma", None), 0.2, lambda v: uniform_logpdf(v, 0.0, pr.phi_upper), smoothing),
        ]
        for t in m.active_types:
            mean, sd = pr.mu0_prior(TYPES[t])
            lik = beta_terms(t, 0) if t in m.series_by_type else obs_terms(m.obs_by_type[t])
            specs.append(
                (("mu0", t), min(0.05, sd), lambda v, mean=mean, sd=sd: normal_logpdf(v, mean, sd), lik)
            )
        for t in m.repeated_types:
            specs.append((("phi0", t), 0.05, lambda v: uniform_logpdf(v, 0.0, pr.phi_upper), beta_terms(t, 0)))
            specs.append((("mu1", t), 0.005, lambda v: normal_logpdf(v, 0.0, pr.mu1_sd), beta_terms(t, 1)))
            specs.append((("phi1", t), 0.005, lambda v: uniform_logpdf(v, 0.0, pr.phi_upper), beta_terms(t, 1)))
        for s in m.active_subtypes:
            specs.append(
                (("omega", s), 0.02, lambda v: uniform_logpdf(v, 0.0, pr.omega_upper), obs_terms(m.obs_by_subtype[s]))
            )
        specs.append((("nu", None), 3.0, lambda v: uniform_logpdf(v, *pr.nu_range), obs_terms(m.t_obs)))
        return specs

    def _get(self, field_: Tuple[str, Optional[int]]) -> float:
        name, i = field_
        value = getattr(self.state, name)
        return float(value if i is None else value[i])

    def _set(self, field_: Tuple[str, Optional[int]], value: float) -> None:
        name, i = field_
        if i is None:
            setattr(self.state, name, value)
        else:
            getattr(self.state, name)[i] = value

    def _update_globals(self, it, adapting, recording) -> None:
        for g, (field_, _, prior, lik) in enumerate(self.globals):
            z = self.rng.standard_normal()
            log_u = math.log(self.rng.uniform())
            cur_val = self._get(field_)
            cur = float(prior(cur_val)) + lik()
            prop_val = cur_val + self.s_global[g] * z
            prop_prior = float(prior(prop_val))
            self._set(field_, prop_val)
            new = prop_prior + lik() if math.isfinite(prop_prior) else -math.inf
            logr = new - cur
            accept = log_u < logr
            if not accept:
                self._set(field_, cur_val)
            if adapting:
                prob = math.exp(min(logr, 0.0)) if math.isfinite(logr) else 0.0
                self.s_global[g] = math.exp(self._adapt(np.log(self.s_global[g]), prob, TARGET_SCALAR, it))
            if recording:
                self._record("global", accept)

    # ---- 主迴圈 ----

    def run(self) -> Tuple[np.ndarray, Dict[str, float]]:
        cfg, m = self.config, self.model
        n_adapt = cfg.adaptation_iterations
        keep = np.empty((cfg.retained_per_chain, len(m.param_names())))
        k = 0
        iterator = tqdm(
            range(cfg.n_iter),
            desc=f"chain {self.chain_index}",
            disable=not cfg.progress,
            leave=False,
        )
        for it in iterator:
            adapting = it < n_adapt
            recording = it >= cfg.burn_in
            if adapting and it > 0 and it % PRECONDITION_EVERY == 0:
                self._precondition()

            self._update_countries(it, adapting, recording)
            self._update_sigma(it, adapting, recording)
            self._update_theta(it, adapting, recording)
            if m.bounds:
                _draw_bounds(m, self.state, self.rng)
            self._update_series(it, adapting, recording)
            self._update_globals(it, adapting, recording)

            if it == n_adapt - 1:
                logger.debug("Adaptation finished", chain=self.chain_index, iteration=it + 1)
            if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0:
                keep[k] = m.state_vector(self.state)
                k += 1

        acceptance = {b: self.acc_sum[b] / self.acc_n[b] for b in self.acc_sum}
        return keep, acceptance


def _run_chain(model: B3Model, config: SamplerConfig, chain_index: int) -> Tuple[np.ndarray, Dict[str, float]]:
    return _Chain(model, config, chain_index).run()


def run_chains(model: B3Model, config: SamplerConfig) -> PosteriorSample:
    """執行所有鏈；平行與序列執行產生相同的抽樣

    Raises:
        SamplerInitError: 起始點的後驗密度不是有限值
        SamplerError: 任一條鏈發生非預期錯誤
    """
    names = model.param_names()
    logger.info(
        "Sampling started",
        chains=config.n_chains,
        iterations=config.n_iter,
        burn_in=config.burn_in,
        thin=config.thin,
        parameters=len(names),
        jobs=config.jobs,
    )
    jobs = min(config.jobs, config.n_chains)
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_run_chain, model, config, i) for i in range(config.n_chains)]
                results = [f.result() for f in futures]
        else:
            results = [_run_chain(model, config, i) for i in range(config.n_chains)]
    except SamplerError:
        raise
    except Exception as e:
        # 非預期的數值或工作程序錯誤一律視為抽樣失敗
        raise SamplerError(f"chain failed: {type(e).__name__}: {e}") from e

    draws = np.stack([r[0] for r in results])
    sample = PosteriorSample(names=names, draws=draws, acceptance=[r[1] for r in results], seed=config.seed)
    record_acceptance(sample.mean_acceptance())
    logger.info("Sampling finished", retained_per_chain=sample.n_keep, acceptance=sample.mean_acceptance())
    return sample


def run_global(model: B3Model, config: SamplerConfig) -> Tuple[PosteriorSample, Diagnostics]:
    """全球模型：抽樣所有國家、系列與全域超參數"""
    if model.country_mode:
        raise SamplerError("run_global called with a country-mode model")
    sample = run_chains(model, config)
    retained_draws.labels(mode="global").set(sample.n_keep)
    return sample, diagnose(sample.names, sample.draws, sample.mean_acceptance())


def run_country(model: B3Model, config: SamplerConfig) -> Tuple[PosteriorSample, Diagnostics]:
    """國家模式：全域超參數固定為全球模型的後驗中位數，只抽樣國家與系列參數"""
    if not model.country_mode:
        raise SamplerError("run_country requires fixed global hyperparameters")
    sample = run_chains(model, config)
    retained_draws.labels(mode="country").set(sample.n_keep)
    return sample, diagnose(sample.names, sample.draws, sample.mean_acceptance())
