"""
命令列介面測試

測試重點：
1. 參數解析與預設值
2. 設定合併順序：環境變數 → TOML → 命令列
3. 結束代碼
"""
import pytest

from src.cli import build_parser, build_run_config, main
from src.config import settings
from src.models.schemas import RunMode
from src.services.exceptions import ConfigError


@pytest.fixture
def toml_config(tmp_path):
    path = tmp_path / "model.toml"
    path.write_text("pooling_weight = 0.3\n\n[spline]\nprojection_end_year = 2015\n")
    return path


def parse(*argv):
    return build_parser().parse_args(list(argv))


class TestParser:
    """參數解析"""

    def test_defaults(self, observations_csv):
        args = parse("--data", str(observations_csv))
        assert args.mode == "global"
        assert args.W is None
        assert not args.strict

    def test_w_sweep_list(self, observations_csv):
        args = parse("--data", str(observations_csv), "--mode", "w-sweep", "--W-sweep", "0,0.25,0.5")
        assert args.W_sweep == [0.0, 0.25, 0.5]

    def test_bad_w_sweep(self, observations_csv):
        with pytest.raises(SystemExit):
            parse("--data", str(observations_csv), "--W-sweep", "a,b")

    def test_unknown_mode(self, observations_csv):
        with pytest.raises(SystemExit):
            parse("--data", str(observations_csv), "--mode", "regional")


class TestBuildRunConfig:
    """設定合併"""

    def test_toml_and_flags(self, observations_csv, toml_config):
        config, model_config = build_run_config(
            parse("--data", str(observations_csv), "--config", str(toml_config), "--projection-end", "2020")
        )
        assert model_config.pooling_weight == pytest.approx(0.3)
        assert model_config.spline.projection_end_year == 2020
        assert config.pooling_weight is None

    def test_sampler_defaults_per_mode(self, observations_csv, toml_config, tmp_path):
        config, _ = build_run_config(parse("--data", str(observations_csv), "--config", str(toml_config)))
        assert config.sampler.n_iter == 50000
        hyper = tmp_path / "hyper.json"
        config, _ = build_run_config(
            parse("--data", str(observations_csv), "--config", str(toml_config),
                  "--mode", "country", "--hyperparameters", str(hyper), "--chains", "3")
        )
        assert config.mode == RunMode.COUNTRY
        assert config.sampler.n_iter == 35000
        assert config.sampler.n_chains == 3

    def test_seed_from_environment(self, observations_csv, toml_config, monkeypatch):
        monkeypatch.setattr(settings, "seed", 7)
        config, _ = build_run_config(parse("--data", str(observations_csv), "--config", str(toml_config)))
        assert config.sampler.seed == 7
        assert config.validation.seed == 7
        config, _ = build_run_config(
            parse("--data", str(observations_csv), "--config", str(toml_config), "--seed", "3")
        )
        assert config.sampler.seed == 3

    @pytest.mark.parametrize(
        "extra",
        [
            ("--W", "1.5"),
            ("--mode", "country"),
            ("--iters", "100", "--burn", "200"),
        ],
    )
    def test_invalid(self, observations_csv, toml_config, extra):
        with pytest.raises(ConfigError):
            build_run_config(parse("--data", str(observations_csv), "--config", str(toml_config), *extra))

    def test_missing_data_file(self, tmp_path, toml_config):
        with pytest.raises(ConfigError):
            build_run_config(parse("--data", str(tmp_path / "none.csv"), "--config", str(toml_config)))

    def test_invalid_toml(self, observations_csv, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("pooling_weight = [\n")
        with pytest.raises(ConfigError):
            build_run_config(parse("--data", str(observations_csv), "--config", str(bad)))


class TestExitCodes:
    """結束代碼"""

    def test_config_error(self, tmp_path, toml_config):
        assert main(["--data", str(tmp_path / "none.csv"), "--config", str(toml_config), "--log-level", "error"]) == 1

    def test_successful_run(self, tmp_path, observations_csv, toml_config):
        out = tmp_path / "out"
        code = main([
            "--data", str(observations_csv),
            "--config", str(toml_config),
            "--out", str(out),
            "--chains", "2", "--iters", "120", "--burn", "60", "--thin", "3",
            "--no-plots", "--no-traces",
            "--log-level", "error",
        ])
        assert code == 0
        assert (out / "estimates.csv").is_file()
        assert not (out / "traces").exists()

    def test_strict_diagnostics(self, tmp_path, observations_csv, toml_config, monkeypatch):
        monkeypatch.setattr(settings, "rhat_threshold", 1.0)
        out = tmp_path / "out"
        code = main([
            "--data", str(observations_csv),
            "--config", str(toml_config),
            "--out", str(out),
            "--chains", "2", "--iters", "40", "--burn", "20", "--thin", "1",
            "--strict", "--no-plots",
            "--log-level", "error",
        ])
        assert code == 4
        assert not out.exists()
