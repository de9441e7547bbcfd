"""
Command-line front-end of the B3 estimation engine

結束代碼：0 成功、1 設定錯誤、2 資料錯誤、3 抽樣失敗、4 收斂診斷失敗（--strict）
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from pydantic import ValidationError

from app.graph import PipelineState, build_graph
from app.observability import get_logger, set_run_context, setup_logging, setup_tracing, write_metrics
from app.observability.logging import new_run_id
from app.observability.metrics import set_run_info
from src.config import ModelConfig, load_model_config, settings
from src.models.schemas import RunConfig, RunMode, SamplerConfig, ValidationConfig
from src.services.exceptions import B3Error, ConfigError
from src.services.export_service import ArtifactWriter

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INTERRUPTED = 130


def _float_list(raw: str) -> List[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}") from None


def _str_list(raw: str) -> List[str]:
    return [x.strip() for x in raw.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="b3", description="B3 五歲以下死亡率估計與投影")
    parser.add_argument("--mode", choices=[m.value for m in RunMode], default=RunMode.GLOBAL.value, help="執行模式")
    parser.add_argument("--data", type=Path, required=True, help="觀測值 CSV")
    parser.add_argument("--config", type=Path, default=None, help="模型設定 TOML（預設 configs/model.toml）")
    parser.add_argument("--out", type=Path, default=Path("output"), help="輸出目錄")
    parser.add_argument("--births", type=Path, default=None, help="出生數表 CSV (country_code, year, births)")
    parser.add_argument("--hyperparameters", type=Path, default=None, help="全球模型的超參數檔（country 模式必要）")

    sampler = parser.add_argument_group("sampler")
    sampler.add_argument("--seed", type=int, default=None, help="亂數種子")
    sampler.add_argument("--chains", type=int, default=None, help="鏈數（預設 6）")
    sampler.add_argument("--iters", type=int, default=None, help="每條鏈的迭代數")
    sampler.add_argument("--burn", type=int, default=None, help="burn-in 迭代數")
    sampler.add_argument("--thin", type=int, default=None, help="thinning 間隔")
    sampler.add_argument("--jobs", type=int, default=None, help="平行執行的鏈數上限")
    sampler.add_argument("--progress", action="store_true", help="顯示抽樣進度條")

    projection = parser.add_argument_group("projection")
    projection.add_argument("--W", type=float, default=None, dest="W", help="池化權重 W ∈ [0, 1]")
    projection.add_argument("--projection-end", type=float, default=None, help="投影終點年份")

    validation = parser.add_argument_group("validation")
    validation.add_argument("--cutoff", type=float, default=None, help="訓練資料的蒐集年份截止點（預設 2006）")
    validation.add_argument("--n-sets", type=int, default=None, help="留出觀測值集合數（預設 100）")
    validation.add_argument("--W-sweep", type=_float_list, default=None, dest="W_sweep", help="w-sweep 模式的 W 列表，逗號分隔")

    output = parser.add_argument_group("output")
    output.add_argument("--countries", type=_str_list, default=None, help="國家代碼，逗號分隔")
    output.add_argument("--strict", action="store_true", help="拒絕任何資料列或 R-hat 超過門檻時失敗")
    output.add_argument("--metrics-file", type=Path, default=None, help="Prometheus textfile 輸出路徑")
    output.add_argument("--no-traces", action="store_true", help="不寫出抽樣軌跡")
    output.add_argument("--no-plots", action="store_true", help="不輸出 SVG 圖")

    log_group = parser.add_argument_group("logging")
    log_group.add_argument("--log-level", default=None, help="日誌級別")
    log_group.add_argument("--json-logs", action="store_true", help="JSON 格式日誌")
    return parser


def build_run_config(args: argparse.Namespace) -> Tuple[RunConfig, ModelConfig]:
    """合併設定：環境變數 → TOML → 命令列參數

    Raises:
        ConfigError: 設定不一致或無效
    """
    model_config = load_model_config(args.config or settings.config_path)
    if args.projection_end is not None:
        model_config.spline.projection_end_year = args.projection_end
    mode = RunMode(args.mode)

    overrides = {
        "n_chains": args.chains,
        "n_iter": args.iters,
        "burn_in": args.burn,
        "thin": args.thin,
        "jobs": args.jobs if args.jobs is not None else settings.jobs,
        "seed": args.seed if args.seed is not None else settings.seed,
        "progress": args.progress,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    validation_overrides = {
        "cutoff_year": args.cutoff,
        "n_sets": args.n_sets,
        "w_sweep": args.W_sweep,
        "seed": overrides["seed"],
    }
    validation_overrides = {k: v for k, v in validation_overrides.items() if v is not None}

    try:
        sampler = SamplerConfig.for_country(**overrides) if mode == RunMode.COUNTRY else SamplerConfig.for_global(**overrides)
        config = RunConfig(
            mode=mode,
            data_path=args.data,
            config_path=args.config,
            births_path=args.births,
            hyperparameters_path=args.hyperparameters,
            out_dir=args.out,
            sampler=sampler,
            validation=ValidationConfig(**validation_overrides),
            pooling_weight=args.W,
            projection_end_year=args.projection_end,
            countries=args.countries,
            strict=args.strict,
            write_traces=not args.no_traces,
            plots=not args.no_plots,
            metrics_file=args.metrics_file or settings.metrics_file,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e
    if not config.data_path.is_file():
        raise ConfigError(f"data file not found: {config.data_path}")
    return config, model_config


def run(config: RunConfig, model_config: ModelConfig, run_id: Optional[str] = None) -> int:
    """執行管線並回傳結束代碼"""
    run_id = run_id or new_run_id()
    writer = ArtifactWriter(config.out_dir)
    app = build_graph(writer=writer)
    state = PipelineState(config=config, estimation=model_config, run_id=run_id)
    try:
        result = app.invoke(state)
    except KeyboardInterrupt:
        logger.warning("Run interrupted")
        writer.cleanup()
        return EXIT_INTERRUPTED
    except Exception:
        logger.exception("Unexpected failure")
        writer.cleanup()
        return 1
    finally:
        if config.metrics_file:
            write_metrics(config.metrics_file)

    exit_code = result.get("exit_code", EXIT_OK) if isinstance(result, dict) else result.exit_code
    if exit_code == EXIT_OK:
        artifacts = result.get("artifacts", []) if isinstance(result, dict) else result.artifacts
        logger.info("Run finished", artifacts=len(artifacts), out_dir=str(config.out_dir))
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(
        level=(args.log_level or settings.log_level).upper(),
        json_logs=args.json_logs or settings.json_logs,
        log_file=settings.log_file,
    )
    setup_tracing(console_export=settings.tracing_console)
    run_id = new_run_id()
    set_run_context(run_id=run_id)

    try:
        config, model_config = build_run_config(args)
    except B3Error as e:
        logger.error("Configuration error", error=str(e))
        return e.exit_code

    set_run_info(run_id=run_id, mode=config.mode.value, seed=config.sampler.seed, chains=config.sampler.n_chains)
    logger.info("Run started", mode=config.mode.value, data=str(config.data_path), out_dir=str(config.out_dir))
    return run(config, model_config, run_id)


if __name__ == "__main__":
    sys.exit(main())
