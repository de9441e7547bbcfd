"""
MCMC 抽樣器測試

測試重點：
1. 抽樣數量與可重現性（相同種子、平行與序列執行）
2. 高斯後驗：抽樣平均值與閉合解一致
3. 僅先驗時 ν 的邊際分布為均勻分布
4. 界限限制在所有保留的抽樣中成立
5. 調整期後各區塊的接受率、國家模式與全球模型的一致性
6. 20 國合成資料的超參數還原與收斂
"""
import math

import numpy as np
import pytest
from scipy import stats

from src.config import IncompleteVrConfig, IncompleteVrCountry, ModelConfig, SplineConfig
from src.models.schemas import GlobalParams, SamplerConfig, SourceSubtype, SourceType, VrStatus
from src.services.diagnostics_service import effective_sample_size
from src.services.estimation_service import fit
from src.services.exceptions import SamplerError
from src.services.model_service import B3Model
from src.services.projection_service import trajectory
from src.services.sampler_service import initial_state, run_chains, run_country, run_global
from src.services.simulate_service import default_truth, simulate_dataset

FIXED_GLOBALS = GlobalParams(chi=-2.3, phi_sigma=0.5)


def vr_series(make_obs, code="AAA", start=1990, end=2010, level=40.0, decline=0.03, se=0.05, noise_seed=0):
    rng = np.random.default_rng(noise_seed)
    return [
        make_obs(
            country=code,
            series_id=f"{code}-VR",
            source_type=SourceType.VR,
            ref_year=float(t),
            u5mr=level * math.exp(-decline * (t - start) + rng.normal(0, se)),
            reported_se=se,
        )
        for t in range(start, end + 1)
    ]


class TestSamplerConfig:
    """抽樣設定"""

    def test_retained_draws(self):
        assert SamplerConfig.for_global().retained_per_chain == 2000
        assert SamplerConfig.for_country().retained_per_chain == 1250

    def test_burn_in_must_be_shorter(self):
        with pytest.raises(ValueError):
            SamplerConfig(n_iter=100, burn_in=100)


class TestRunChains:
    """鏈的執行與可重現性"""

    @pytest.fixture
    def model(self, make_obs, model_config):
        return B3Model.assemble(vr_series(make_obs), model_config)

    def test_shapes(self, model, fast_sampler):
        sample = run_chains(model, fast_sampler)
        assert sample.draws.shape == (2, fast_sampler.retained_per_chain, len(model.param_names()))
        assert sample.n_draws == 2 * 20
        assert np.all(np.isfinite(sample.draws))
        assert set(sample.acceptance[0]) >= {"country", "global"}

    def test_same_seed_same_draws(self, model, fast_sampler):
        a = run_chains(model, fast_sampler)
        b = run_chains(model, fast_sampler)
        assert np.array_equal(a.draws, b.draws)

    def test_chains_differ(self, model, fast_sampler):
        sample = run_chains(model, fast_sampler)
        assert not np.array_equal(sample.draws[0], sample.draws[1])

    def test_parallel_equals_serial(self, model, fast_sampler):
        serial = run_chains(model, fast_sampler)
        parallel = run_chains(model, fast_sampler.model_copy(update={"jobs": 2}))
        assert np.array_equal(serial.draws, parallel.draws)

    def test_initial_state_without_jitter(self, model):
        a = initial_state(model, np.random.default_rng(1), jitter=False)
        b = initial_state(model, np.random.default_rng(2), jitter=False)
        assert np.allclose(model.state_vector(a), model.state_vector(b))

    def test_mode_mismatch(self, make_obs, model, model_config, fast_sampler):
        with pytest.raises(SamplerError):
            run_country(model, fast_sampler)
        country_model = B3Model.assemble(
            vr_series(make_obs), model_config, country_mode=True, fixed_globals=FIXED_GLOBALS
        )
        with pytest.raises(SamplerError):
            run_global(country_model, fast_sampler)

    def test_unexpected_chain_failure(self, model, fast_sampler, monkeypatch):
        """鏈內的非預期錯誤轉為 SamplerError（結束代碼 3）"""
        def broken(self):
            raise FloatingPointError("overflow in proposal")

        monkeypatch.setattr("src.services.sampler_service._Chain.run", broken)
        with pytest.raises(SamplerError) as info:
            run_chains(model, fast_sampler)
        assert info.value.exit_code == 3
        assert "FloatingPointError" in str(info.value)

    def test_unknown_parameter(self, model, fast_sampler):
        sample = run_chains(model, fast_sampler)
        assert "chi" in sample
        with pytest.raises(SamplerError):
            sample.param("lambda0[ZZZ]")


@pytest.mark.slow
class TestPosteriorCorrectness:
    """與已知後驗比較"""

    def _country_model(self, make_obs, sigma):
        config = ModelConfig(spline=SplineConfig(projection_end_year=2012), fixed_smoothing_sd={"AAA": sigma})
        model = B3Model.assemble(vr_series(make_obs), config, country_mode=True, fixed_globals=FIXED_GLOBALS)
        assert model.countries[0].fixed_sigma == sigma
        return model

    def test_gaussian_posterior_mean(self, make_obs):
        """固定 σ 時 (λ0, λ1, ε) 的後驗為常態：H = X'X/v² + diag(0, 0, 1/σ²)"""
        sigma = 0.1
        model = self._country_model(make_obs, sigma)
        c = model.countries[0]
        X, y, v = c.X, model.y, model.v
        prior_prec = np.concatenate([[0.0, 0.0], np.full(c.basis.Q, 1.0 / sigma**2)])
        H = X.T @ (X / v[:, None] ** 2) + np.diag(prior_prec)
        # exp(λ0) 的均勻先驗換算到 λ0 尺度後 log 密度的斜率為 1
        rhs = X.T @ (y / v**2) + np.eye(c.dim)[0]
        mean = np.linalg.solve(H, rhs)
        cov = np.linalg.inv(H)
        expected_alpha = c.alpha(mean)
        M = np.array([c.alpha(e) - c.alpha(np.zeros(c.dim)) for e in np.eye(c.dim)]).T
        alpha_sd = np.sqrt(np.diag(M @ cov @ M.T))

        sample, _ = run_country(model, SamplerConfig(n_chains=6, n_iter=5000, burn_in=1000, thin=2, seed=3))
        draws = sample.alpha("AAA", c.basis.K)
        for k in range(c.basis.K):
            column = draws[:, k].reshape(sample.n_chains, sample.n_keep)
            mcse = alpha_sd[k] / math.sqrt(effective_sample_size(column))
            assert abs(draws[:, k].mean() - expected_alpha[k]) < 2 * mcse + 1e-9

    def test_tiny_smoothing_is_linear(self, make_obs):
        model = self._country_model(make_obs, 1e-4)
        sample, _ = run_country(model, SamplerConfig(n_chains=2, n_iter=2000, burn_in=1000, thin=5, seed=4))
        K = model.countries[0].basis.K
        alpha = np.median(sample.alpha("AAA", K), axis=0)
        k = np.arange(K)
        fit = np.polyval(np.polyfit(k, alpha, 1), k)
        r2 = 1.0 - np.sum((alpha - fit) ** 2) / np.sum((alpha - alpha.mean()) ** 2)
        assert r2 > 0.9999

    def test_prior_only_nu_is_uniform(self, make_obs, model_config):
        model = B3Model.assemble(vr_series(make_obs), model_config, use_likelihood=False)
        sample = run_chains(model, SamplerConfig(n_chains=6, n_iter=22000, burn_in=2000, thin=10, seed=5))
        nu = sample.flat("nu")
        statistic = stats.kstest(nu, stats.uniform(loc=2.0, scale=28.0).cdf).statistic
        assert statistic < 0.05


class TestBounds:
    """不完整 VR 界限"""

    def test_bounds_hold_in_every_draw(self, make_obs, fast_sampler):
        config = ModelConfig(
            spline=SplineConfig(projection_end_year=2012),
            incomplete_vr=IncompleteVrConfig(countries={"UKR": IncompleteVrCountry(min_completeness=0.8)}),
        )
        values = [(1990, 22.0), (1993, 25.0), (2000, 19.0), (2009, 14.0)]
        obs = [
            make_obs(country="UKR", series_id="UKR-VR", source_type=SourceType.VR,
                     vr_status=VrStatus.INCOMPLETE, ref_year=float(t), u5mr=u)
            for t, u in values
        ]
        obs += [
            make_obs(country="UKR", series_id="UKR-DHS", ref_year=float(t), u5mr=30.0 - 0.8 * (t - 1990),
                     survey_year=2008.0, reported_se=0.1)
            for t in (1994, 1998, 2002, 2006)
        ]
        globals_ = GlobalParams(
            chi=-2.3,
            phi_sigma=0.5,
            mu0={SourceType.DHS_DIRECT: 0.0},
            phi0={SourceType.DHS_DIRECT: 0.1},
            mu1={SourceType.DHS_DIRECT: 0.0},
            phi1={SourceType.DHS_DIRECT: 0.01},
            omega={SourceSubtype.DHS_DIRECT_SE: 0.1},
        )
        model = B3Model.assemble(obs, config, country_mode=True, fixed_globals=globals_)
        assert len(model.bounds) == 1
        bound = model.bounds[0]

        sample, _ = run_country(model, fast_sampler)
        c = model.block("UKR")
        alpha = sample.alpha("UKR", c.basis.K)
        psi = alpha @ c.basis.design([bound.year], projection=False)[0]
        L = sample.flat(f"bound_L[UKR,{bound.year!r}]")
        assert np.all(psi > L)
        assert np.all(psi < L + bound.upper_offset)


@pytest.mark.slow
class TestSyntheticFits:
    """三國合成資料的全球模型與國家模式"""

    CONFIG = ModelConfig(spline=SplineConfig(projection_end_year=2015))
    SAMPLER = SamplerConfig(n_chains=4, n_iter=4000, burn_in=2000, thin=4, seed=21, jobs=4)

    @pytest.fixture(scope="class")
    def global_fit(self, synthetic_data):
        return fit(synthetic_data.observations, self.CONFIG, self.SAMPLER)

    def test_acceptance_rates_after_adaptation(self, global_fit):
        """每個區塊在調整期之後的接受率介於 0.05 與 0.95"""
        assert {"country", "log_sigma", "beta", "global"} <= set(global_fit.sample.mean_acceptance())
        for chain, rates in enumerate(global_fit.sample.acceptance):
            for block, rate in rates.items():
                assert 0.05 < rate < 0.95, (chain, block, rate)

    def test_country_mode_matches_global(self, global_fit, synthetic_data):
        """固定全球超參數後，國家模式的中位數與全球模型相差不超過 2%"""
        code = "AAA"
        observations = [o for o in synthetic_data.observations if o.country_code == code]
        country = fit(
            observations,
            self.CONFIG,
            self.SAMPLER.model_copy(update={"seed": 22}),
            fixed_globals=global_fit.global_params(),
        )
        basis = global_fit.model.block(code).basis
        years = np.arange(math.ceil(basis.first_year), math.floor(basis.last_year) + 1, dtype=float)
        expected = trajectory(global_fit.alpha(code), basis, years).median
        actual = trajectory(country.alpha(code), country.model.block(code).basis, years).median
        assert np.max(np.abs(actual / expected - 1.0)) < 0.02


def true_value(truth: GlobalParams, name: str) -> float:
    """依參數名稱查詢生成用的超參數值"""
    if name in ("chi", "phi_sigma", "nu"):
        return float(getattr(truth, name))
    prefix, key = name[:-1].split("[", 1)
    return float({k.value: v for k, v in getattr(truth, prefix).items()}[key])


@pytest.mark.slow
class TestSyntheticRecovery:
    """已知超參數的 20 國合成資料集，重複 20 次"""

    N_REPLICATES = 20

    def test_hyperparameters_inside_credible_intervals(self, country_panel):
        """每個超參數的真值落在 90% 可信區間內的比例至少 70%，且 R-hat < 1.1"""
        config = ModelConfig(spline=SplineConfig(projection_end_year=2012))
        base = default_truth()
        truth = base.model_copy(
            update={"chi": -3.0, "mu0": {**base.mu0, SourceType.MICS_INDIRECT: 0.10}}
        )
        sampler = SamplerConfig(n_chains=4, n_iter=12000, burn_in=6000, thin=6, jobs=4)

        hits = {}
        for r in range(self.N_REPLICATES):
            countries = country_panel(seed=100 + r, chi=truth.chi, phi_sigma=truth.phi_sigma)
            data = simulate_dataset(countries, truth, config, seed=r)
            result = fit(data.observations, config, sampler.model_copy(update={"seed": r}))
            assert result.diagnostics.failing(1.1) == [], f"replicate {r}"
            for name in result.model.global_param_names():
                lower, upper = np.quantile(result.sample.flat(name), [0.05, 0.95])
                hits.setdefault(name, []).append(lower <= true_value(truth, name) <= upper)

        assert {"chi", "mu0[mics_indirect]", "omega[dhs_direct_se]", "nu"} <= set(hits)
        rates = {name: float(np.mean(h)) for name, h in hits.items()}
        assert all(len(h) == self.N_REPLICATES for h in hits.values())
        assert {name: rate for name, rate in rates.items() if rate < 0.7} == {}
