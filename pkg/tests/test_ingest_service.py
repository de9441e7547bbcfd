"""
觀測值匯入測試

測試重點：
1. CSV 解析、逐列拒絕與系列分組
2. VR 隨機誤差（delta method、下限、SVR）
3. 小國 VR 期間合併
4. 不完整 VR 的趨勢與界限觀測值選取
"""
import math

import numpy as np
import pytest

from src.config import IncompleteVrConfig, IncompleteVrCountry
from src.models.schemas import BoundConstraint, SourceSubtype, SourceType, VrStatus
from src.services.exceptions import DataError, SchemaError
from src.services.ingest_service import (
    COLUMNS,
    aggregate_vr_periods,
    attach_births,
    parse_births_table,
    parse_observations,
    select_incomplete_vr,
    vr_stochastic_sd,
    write_observations,
)


def _write_csv(path, rows, header=COLUMNS):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row.get(col, "")) for col in header))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestParseObservations:
    """CSV 解析"""

    @pytest.fixture
    def dhs_row(self):
        return {
            "country_code": "KEN",
            "series_id": "KEN-DHS-2005",
            "source_type": "DHS Direct",
            "ref_year": 1995,
            "u5mr": 100,
            "survey_year": 2005,
            "reported_se": 0.1,
        }

    def test_valid_row(self, tmp_path, dhs_row):
        """有效列成為 Observation，回溯期間為調查年減參考年"""
        result = parse_observations(_write_csv(tmp_path / "obs.csv", [dhs_row]))
        assert result.rejections == []
        obs = result.observations[0]
        assert obs.source_type == SourceType.DHS_DIRECT
        assert obs.retrospective_period == pytest.approx(10.0)
        assert obs.log_u5mr == pytest.approx(math.log(100.0), abs=1e-15)
        assert obs.vr_status == VrStatus.NOT_VR

    def test_nonpositive_rate_rejected(self, tmp_path, dhs_row):
        rows = [dhs_row, {**dhs_row, "ref_year": 1996, "u5mr": 0}]
        result = parse_observations(_write_csv(tmp_path / "obs.csv", rows))
        assert len(result.observations) == 1
        assert [(r.row, r.reason) for r in result.rejections] == [(2, "nonpositive rate")]

    def test_unknown_label_and_malformed_number(self, tmp_path, dhs_row):
        rows = [
            {**dhs_row, "source_type": "Telepathy"},
            {**dhs_row, "ref_year": 1996, "u5mr": "abc"},
        ]
        result = parse_observations(_write_csv(tmp_path / "obs.csv", rows))
        assert result.observations == []
        reasons = [r.reason for r in result.rejections]
        assert reasons[0].startswith("unknown source_type label")
        assert reasons[1].startswith("malformed numeric value in u5mr")

    def test_duplicate_series_year_rejected(self, tmp_path, dhs_row):
        result = parse_observations(_write_csv(tmp_path / "obs.csv", [dhs_row, dhs_row]))
        assert len(result.observations) == 1
        assert result.rejections[0].row == 2
        assert result.rejections[0].reason == "duplicate (series_id, ref_year)"

    def test_repeated_source_needs_survey_year(self, tmp_path, dhs_row):
        result = parse_observations(_write_csv(tmp_path / "obs.csv", [{**dhs_row, "survey_year": ""}]))
        assert result.rejections[0].reason == "missing survey_year for repeated source type"

    def test_survey_before_reference_rejected(self, tmp_path, dhs_row):
        result = parse_observations(_write_csv(tmp_path / "obs.csv", [{**dhs_row, "survey_year": 1990}]))
        assert result.rejections[0].reason == "survey_year precedes ref_year"

    def test_rejected_row_does_not_fix_series_identity(self, tmp_path, dhs_row):
        """被拒絕的第一列不決定系列的國家與來源類型"""
        rows = [
            {**dhs_row, "country_code": "UGA", "reported_se": -0.1},
            {**dhs_row, "ref_year": 1996},
        ]
        result = parse_observations(_write_csv(tmp_path / "obs.csv", rows))
        assert [r.row for r in result.rejections] == [1]
        assert [o.country_code for o in result.observations] == ["KEN"]

    def test_series_mixing_countries_rejected(self, tmp_path, dhs_row):
        rows = [dhs_row, {**dhs_row, "country_code": "UGA", "ref_year": 1996}]
        result = parse_observations(_write_csv(tmp_path / "obs.csv", rows))
        assert [(r.row, r.reason) for r in result.rejections] == [(2, "series KEN-DHS-2005 mixes countries or source types")]

    def test_header_mismatch(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("country,year,rate\nKEN,2000,50\n", encoding="utf-8")
        with pytest.raises(SchemaError):
            parse_observations(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            parse_observations(tmp_path / "nope.csv")

    def test_series_grouping_and_subtypes(self, tmp_path, dhs_row):
        rows = [
            dhs_row,
            {**dhs_row, "ref_year": 2000},
            {**dhs_row, "series_id": "KEN-DHS-1998", "survey_year": 1998, "reported_se": ""},
            {"country_code": "KEN", "series_id": "KEN-VR", "source_type": "vr", "ref_year": 2001,
             "u5mr": 40, "births": 50000},
            {"country_code": "IND", "series_id": "IND-SRS", "source_type": "SVR", "ref_year": 2001, "u5mr": 70},
        ]
        result = parse_observations(_write_csv(tmp_path / "obs.csv", rows))
        series = {s.series_id: s for s in result.series}
        assert series["KEN-DHS-2005"].n_obs == 2
        assert series["KEN-DHS-2005"].source_subtype == SourceSubtype.DHS_DIRECT_SE
        assert series["KEN-DHS-1998"].source_subtype == SourceSubtype.DHS_DIRECT_NO_SE
        assert series["KEN-DHS-2005"].repeated
        assert not series["KEN-VR"].repeated
        svr = [o for o in result.observations if o.series_id == "IND-SRS"][0]
        assert svr.sample_vr and svr.source_type == SourceType.VR
        assert svr.vr_status == VrStatus.COMPLETE

    def test_round_trip(self, tmp_path, synthetic_data):
        """寫出再讀入得到相同的紀錄"""
        path = tmp_path / "obs.csv"
        write_observations(synthetic_data.observations, path)
        result = parse_observations(path)
        assert result.rejections == []
        assert result.observations == synthetic_data.observations


class TestVrStochasticSd:
    """VR 觀測值的 log 尺度標準差"""

    def test_floor_applied(self):
        # 預期死亡數 5000，原始標準差 0.01414
        assert vr_stochastic_sd(100000, 50) == pytest.approx(0.025)

    def test_delta_method(self):
        assert vr_stochastic_sd(400, 100) == pytest.approx(1 / math.sqrt(40), rel=1e-12)

    def test_sample_registration_without_births(self):
        assert vr_stochastic_sd(None, 70, sample_vr=True) == pytest.approx(0.1)

    def test_reported_se_takes_precedence(self):
        assert vr_stochastic_sd(None, 70, reported_se=0.07) == pytest.approx(0.07)

    def test_missing_births_for_complete_vr(self):
        with pytest.raises(DataError):
            vr_stochastic_sd(None, 50)

    def test_monotone_in_births(self):
        births = np.geomspace(10, 1e7, 60)
        sds = [vr_stochastic_sd(b, 30) for b in births]
        assert all(a >= b for a, b in zip(sds, sds[1:]))
        assert min(sds) == pytest.approx(0.025)

    @pytest.mark.parametrize("expected_deaths", [100, 1000, 5000])
    def test_poisson_monte_carlo(self, expected_deaths):
        """模擬 Poisson 死亡數，log 死亡率的標準差約為 1/sqrt(E[deaths])"""
        rng = np.random.default_rng(expected_deaths)
        deaths = rng.poisson(expected_deaths, size=100000)
        empirical = float(np.std(np.log(deaths)))
        assert empirical == pytest.approx(1 / math.sqrt(expected_deaths), rel=0.10)


class TestAggregateVrPeriods:
    """小國 VR 期間合併"""

    def _series(self, make_obs, years, births, deaths):
        return [
            make_obs(
                country="MLT",
                series_id="MLT-VR",
                source_type=SourceType.VR,
                ref_year=float(y),
                u5mr=1000.0 * d / b,
                births=b,
                deaths=d,
            )
            for y, b, d in zip(years, births, deaths)
        ]

    def test_below_threshold_unchanged(self, make_obs):
        obs = self._series(make_obs, [2000, 2001, 2002], [10000] * 3, [400] * 3)
        result = aggregate_vr_periods(obs, 0.10)
        assert result.observations == obs
        assert result.residual_flagged == []

    def test_two_small_years_merged(self, make_obs):
        obs = self._series(make_obs, [1990, 1991], [1000, 1000], [20, 20])
        result = aggregate_vr_periods(obs, 0.10)
        assert len(result.observations) == 1
        merged = result.observations[0]
        assert merged.deaths == pytest.approx(40)
        assert merged.births == pytest.approx(2000)
        assert merged.ref_year == pytest.approx(1990.5)
        assert merged.u5mr == pytest.approx(20)
        assert 1 / math.sqrt(merged.deaths) == pytest.approx((1 / math.sqrt(20)) / math.sqrt(2))
        # 尾端期間仍高於門檻
        assert result.residual_flagged == [0]

    def test_totals_conserved(self, make_obs):
        rng = np.random.default_rng(3)
        years = list(range(1980, 2011))
        births = rng.integers(500, 5000, size=len(years)).astype(float)
        deaths = np.round(births * rng.uniform(0.005, 0.03, size=len(years)))
        obs = self._series(make_obs, years, births, deaths)
        result = aggregate_vr_periods(obs, 0.10)
        assert len(result.observations) < len(obs)
        assert sum(o.births for o in result.observations) == pytest.approx(births.sum())
        assert sum(o.deaths for o in result.observations) == pytest.approx(deaths.sum())

    def test_gap_closes_period(self, make_obs):
        obs = self._series(make_obs, [1990, 1995], [1000, 1000], [20, 20])
        result = aggregate_vr_periods(obs, 0.10)
        assert len(result.observations) == 2

    def test_empty(self):
        result = aggregate_vr_periods([], 0.10)
        assert result.observations == []
        assert result.residual_flagged == []


class TestSelectIncompleteVr:
    """不完整 VR 的趨勢與界限觀測值"""

    @pytest.fixture
    def config(self):
        return IncompleteVrConfig(countries={"UKR": IncompleteVrCountry(min_completeness=0.8)})

    def _vr(self, make_obs, values):
        return [
            make_obs(
                country="UKR",
                series_id="UKR-VR",
                source_type=SourceType.VR,
                vr_status=VrStatus.INCOMPLETE,
                ref_year=float(year),
                u5mr=float(u5mr),
            )
            for year, u5mr in values
        ]

    def test_base_year_and_window_maximum(self, make_obs, config):
        obs = self._vr(make_obs, [(1990, 30), (1991, 31), (1993, 35), (1995, 33)])
        sel = select_incomplete_vr(obs, config, "UKR")
        assert sel.trend_obs == (0, 2)
        assert len(sel.trend_obs) <= 2

    def test_window_only(self, make_obs, config):
        obs = self._vr(make_obs, [(1991, 31), (1992, 40), (1994, 33)])
        sel = select_incomplete_vr(obs, config, "UKR")
        assert sel.trend_obs == (1,)

    def test_closest_to_base_year(self, make_obs, config):
        obs = self._vr(make_obs, [(1990.5, 31), (1990.0, 30)])
        sel = select_incomplete_vr(obs, config, "UKR")
        assert sel.trend_obs == (1,)

    def test_bound_with_completeness(self, make_obs, config):
        obs = self._vr(make_obs, [(1990, 30), (1993, 35), (2006, 20), (2008, 18)])
        sel = select_incomplete_vr(obs, config, "UKR")
        assert sel.bound_obs == (3,)
        assert sel.min_completeness == {3: 0.8}
        bound = BoundConstraint(country_code="UKR", year=2008, y=math.log(18), v=0.1, min_completeness=0.8)
        assert bound.upper_offset == pytest.approx(-math.log(0.8))
        assert bound.upper(1.0) == pytest.approx(1.0 - math.log(0.8))

    def test_no_trend_data(self, make_obs, config):
        obs = self._vr(make_obs, [(2000, 25), (2001, 24)])
        sel = select_incomplete_vr(obs, config, "UKR")
        assert sel.trend_obs == ()

    def test_unflagged_country(self, make_obs, config):
        obs = self._vr(make_obs, [(1990, 30)])
        sel = select_incomplete_vr(obs, config, "POL")
        assert sel.trend_obs == () and sel.bound_obs == ()


class TestBirthsTable:
    """出生數表"""

    def test_attach_births(self, tmp_path, make_obs):
        path = tmp_path / "births.csv"
        path.write_text("country_code,year,births\nMLT,2000,4000\nMLT,2001,4100\n", encoding="utf-8")
        table = parse_births_table(path)
        obs = [
            make_obs(country="MLT", series_id="MLT-VR", source_type=SourceType.VR, ref_year=2000.5, u5mr=8.0),
            make_obs(country="MLT", series_id="MLT-DHS", ref_year=2001.0, u5mr=9.0),
        ]
        out = attach_births(obs, table)
        assert out[0].births == pytest.approx(4000)
        assert out[1].births is None

    def test_nonpositive_births(self, tmp_path):
        path = tmp_path / "births.csv"
        path.write_text("country_code,year,births\nMLT,2000,0\n", encoding="utf-8")
        with pytest.raises(DataError):
            parse_births_table(path)
