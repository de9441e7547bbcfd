"""
Test configuration file for pytest
Sets up environment variables and common fixtures
"""
import os

import numpy as np
import pytest

# Set TESTING environment variable before importing any modules
os.environ["TESTING"] = "true"
os.environ.setdefault("B3_LOG_LEVEL", "WARNING")

from app.observability import setup_logging  # noqa: E402
from src.config import ModelConfig, SplineConfig  # noqa: E402
from src.models.schemas import Observation, SamplerConfig, SourceType, VrStatus  # noqa: E402
from src.services.ingest_service import write_observations  # noqa: E402
from src.services.simulate_service import SimulatedCountry, simulate_dataset  # noqa: E402


@pytest.fixture(autouse=True, scope="session")
def quiet_logging():
    """測試期間只輸出警告以上的日誌"""
    setup_logging(level=os.environ["B3_LOG_LEVEL"])
    yield


@pytest.fixture
def model_config():
    """投影終點固定的模型設定（避免依賴今天的日期）"""
    return ModelConfig(spline=SplineConfig(projection_end_year=2015))


@pytest.fixture
def fast_sampler():
    """只用於流程測試的短鏈"""
    return SamplerConfig(n_chains=2, n_iter=120, burn_in=60, thin=3, seed=11)


@pytest.fixture
def make_obs():
    """建立 Observation 的捷徑"""
    def factory(country="AAA", ref_year=2000.0, u5mr=50.0, series_id="S1",
                source_type=SourceType.DHS_DIRECT, **kwargs):
        if source_type == SourceType.VR:
            kwargs.setdefault("vr_status", VrStatus.COMPLETE)
        elif "survey_year" not in kwargs:
            kwargs["survey_year"] = ref_year + 2.0
        return Observation(
            country_code=country,
            ref_year=ref_year,
            u5mr=u5mr,
            series_id=series_id,
            source_type=source_type,
            **kwargs,
        )
    return factory


@pytest.fixture(scope="session")
def synthetic_countries():
    """三個合成國家：DHS 調查、VR 以及非重複來源"""
    return [
        SimulatedCountry(code="AAA", mid_u5mr=120.0, annual_decline=0.03),
        SimulatedCountry(
            code="BBB",
            mid_u5mr=60.0,
            annual_decline=0.02,
            survey_type=SourceType.MICS_INDIRECT,
            survey_se=None,
            single_sources=[(SourceType.LIFE_TABLE, 1988.0)],
        ),
        SimulatedCountry(
            code="CCC",
            mid_u5mr=30.0,
            annual_decline=0.04,
            survey_years=[1990.0, 2000.0],
            vr_years=[float(y) for y in range(1980, 2011, 2)],
        ),
    ]


@pytest.fixture(scope="session")
def synthetic_data(synthetic_countries):
    return simulate_dataset(synthetic_countries, seed=5)


@pytest.fixture
def observations_csv(tmp_path, synthetic_data):
    """將合成資料寫成 observations.csv"""
    path = tmp_path / "observations.csv"
    write_observations(synthetic_data.observations, path)
    return path


@pytest.fixture(scope="session")
def country_panel():
    """二十個合成國家的資料蒐集設計（DHS、MICS、生命表與 VR 混合）

    σ_c 由 log σ_c ~ N(chi, phi_sigma²) 抽取，與全球模型的平滑度階層一致。
    """
    def factory(seed, chi=-2.3, phi_sigma=0.5, n=20, surveys_per_series=3):
        rng = np.random.default_rng(seed)
        dhs_years = [1984.0, 1991.0, 1998.0, 2005.0][-surveys_per_series:]
        mics_years = [1987.0, 1994.0, 2001.0, 2008.0][-surveys_per_series:]
        countries = []
        for i in range(n):
            kwargs = {}
            if i % 2:
                kwargs.update(survey_type=SourceType.MICS_INDIRECT, survey_se=None, survey_years=mics_years)
            else:
                kwargs.update(survey_years=dhs_years)
            if i % 5 == 0:
                kwargs["single_sources"] = [(SourceType.LIFE_TABLE, 1980.0)]
            if i % 4 == 3:
                kwargs["vr_years"] = [float(y) for y in range(1990, 2011, 2)]
            countries.append(
                SimulatedCountry(
                    code=f"C{i + 1:02d}",
                    mid_u5mr=float(150.0 * np.exp(-0.1 * i)),
                    annual_decline=0.02 + 0.002 * (i % 10),
                    sigma=float(np.exp(chi + phi_sigma * rng.standard_normal())),
                    **kwargs,
                )
            )
        return countries
    return factory
