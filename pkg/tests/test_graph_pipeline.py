"""
估計管線（LangGraph）測試

測試重點：
1. 全球模式端到端：估計值、診斷、軌跡、超參數、圖
2. 國家模式使用全球模型的超參數檔
3. 錯誤處理節點移除部分寫出的檔案
4. 驗證模式輸出驗證表
5. 相同種子的兩次執行產生位元組相同的估計值檔
"""
import json

import numpy as np
import pandas as pd
import pytest

from app.graph import PipelineState, build_graph
from src.cli import run
from src.models.schemas import RunConfig, RunMode, ValidationConfig
from src.services.exceptions import ExportError
from src.services.export_service import ArtifactWriter


def make_config(data_path, out_dir, sampler, **kwargs):
    return RunConfig(data_path=data_path, out_dir=out_dir, sampler=sampler, **kwargs)


class TestGlobalRun:
    """全球模式"""

    @pytest.fixture
    def global_run(self, tmp_path, observations_csv, fast_sampler, model_config):
        out = tmp_path / "global"
        config = make_config(observations_csv, out, fast_sampler, metrics_file=tmp_path / "b3.prom")
        assert run(config, model_config) == 0
        return out

    def test_artifacts(self, global_run, fast_sampler):
        for name in ("estimates.csv", "diagnostics.json", "hyperparameters.json", "bias_prediction_intervals.csv"):
            assert (global_run / name).is_file(), name
        assert (global_run / "traces" / "trace_chain2.csv").is_file()
        assert sorted(p.name for p in (global_run / "plots").iterdir()) == ["AAA.svg", "BBB.svg", "CCC.svg"]

    def test_estimates(self, global_run):
        frame = pd.read_csv(global_run / "estimates.csv")
        assert list(frame.columns) == ["country", "year", "median", "lower90", "upper90"]
        assert sorted(frame["country"].unique()) == ["AAA", "BBB", "CCC"]
        assert frame.groupby("country")["year"].max().eq(2015).all()
        assert (frame["lower90"] <= frame["median"]).all()
        assert (frame["median"] <= frame["upper90"]).all()

    def test_hyperparameters_and_diagnostics(self, global_run):
        hyper = json.loads((global_run / "hyperparameters.json").read_text())
        assert hyper["change_variance"] > 0
        assert "dhs_direct" in hyper["mu0"]
        diagnostics = json.loads((global_run / "diagnostics.json").read_text())
        assert diagnostics["n_chains"] == 2
        assert "chi" in diagnostics["rhat"]

    def test_metrics_file(self, global_run, tmp_path):
        text = (tmp_path / "b3.prom").read_text()
        assert "b3_stage_duration_seconds" in text
        assert "b3_observations" in text

    def test_country_mode(self, global_run, tmp_path, observations_csv, fast_sampler, model_config):
        out = tmp_path / "country"
        config = make_config(
            observations_csv,
            out,
            fast_sampler,
            mode=RunMode.COUNTRY,
            hyperparameters_path=global_run / "hyperparameters.json",
            countries=["AAA"],
            plots=False,
        )
        assert run(config, model_config) == 0
        frame = pd.read_csv(out / "estimates.csv")
        assert set(frame["country"]) == {"AAA"}
        assert not (out / "hyperparameters.json").exists()
        assert not (out / "bias_prediction_intervals.csv").exists()


class TestErrorHandling:
    """錯誤處理"""

    def test_missing_hyperparameter_file(self, tmp_path, observations_csv, fast_sampler, model_config):
        out = tmp_path / "out"
        config = make_config(
            observations_csv, out, fast_sampler, mode=RunMode.COUNTRY,
            hyperparameters_path=tmp_path / "missing.json",
        )
        assert run(config, model_config) == 1
        assert not out.exists()

    def test_strict_rejection(self, tmp_path, observations_csv, fast_sampler, model_config):
        with observations_csv.open("a") as fh:
            fh.write("AAA,AAA-bad,dhs_direct,2001.0,-5,2003.0,,not_vr,,\n")
        out = tmp_path / "out"
        config = make_config(observations_csv, out, fast_sampler, strict=True)
        assert run(config, model_config) == 2
        assert not out.exists()

    def test_sampler_failure_exit_code(self, tmp_path, observations_csv, fast_sampler, model_config, monkeypatch):
        def broken(self):
            raise np.linalg.LinAlgError("matrix is not positive definite")

        monkeypatch.setattr("src.services.sampler_service._Chain.run", broken)
        out = tmp_path / "out"
        assert run(make_config(observations_csv, out, fast_sampler), model_config) == 3
        assert not out.exists()

    def test_partial_artifacts_removed(self, tmp_path, observations_csv, fast_sampler, model_config, monkeypatch):
        def broken(*args, **kwargs):
            raise ExportError("disk full")

        monkeypatch.setattr("app.graph.nodes.write_diagnostics", broken)
        out = tmp_path / "out"
        writer = ArtifactWriter(out)
        app = build_graph(writer=writer)
        state = PipelineState(config=make_config(observations_csv, out, fast_sampler), estimation=model_config)
        result = app.invoke(state)
        assert result["exit_code"] == 1
        assert result["failed_stage"] == "emit"
        assert result["metrics"]["error_handled"] is True
        assert not (out / "estimates.csv").exists()
        assert not out.exists()


@pytest.mark.slow
class TestValidationRun:
    """驗證模式"""

    def test_validation_tables(self, tmp_path, observations_csv, fast_sampler, model_config):
        out = tmp_path / "validate"
        config = make_config(
            observations_csv,
            out,
            fast_sampler,
            mode=RunMode.W_SWEEP,
            validation=ValidationConfig(cutoff_year=2000, n_sets=10, w_sweep=[0.0, 0.5]),
            plots=False,
            write_traces=False,
        )
        assert run(config, model_config) == 0
        leftout = pd.read_csv(out / "validation_leftout.csv")
        assert set(leftout["W"]) <= {0.0, 0.5}
        assert set(leftout["period"]) <= {"<=1999", ">1999"}
        assert (leftout["pct_inside"] + leftout["pct_below"] + leftout["pct_above"]).round(9).eq(100.0).all()
        assert (out / "validation_summary.txt").read_text().startswith("validation sets: 10")
        assert (out / "diagnostics_training.json").is_file()


@pytest.mark.slow
class TestReproducibility:
    """相同種子的兩次執行"""

    def test_estimates_are_byte_identical(self, tmp_path, observations_csv, fast_sampler, model_config):
        sampler = fast_sampler.model_copy(update={"n_iter": 600, "burn_in": 300})
        outputs = []
        for name in ("first", "second"):
            out = tmp_path / name
            assert run(make_config(observations_csv, out, sampler, plots=False), model_config) == 0
            outputs.append((out / "estimates.csv").read_bytes())
        assert outputs[0] == outputs[1]
        assert outputs[0].startswith(b"country,year,median,lower90,upper90")
