from __future__ import annotations

from functools import wraps
from typing import Any, Dict

from app.observability import get_logger, stage_context, trace_stage, track_stage_metrics
from app.observability.metrics import observations_gauge, rhat_max, stage_error_counter
from src.config import settings
from src.models.schemas import RunMode, SamplerConfig
from src.services.estimation_service import bias_prediction_intervals, fit
from src.services.exceptions import B3Error, DiagnosticsError, RowRejectionError
from src.services.export_service import (
    ArtifactWriter,
    estimates_frame,
    export_hyperparameters,
    filter_countries,
    load_hyperparameters,
    write_diagnostics,
    write_estimates,
    write_table,
    write_text,
    write_traces,
)
from src.services.ingest_service import aggregate_vr_periods, attach_births, parse_births_table, parse_observations
from src.services.plotting_service import plot_country
from src.services.projection_service import trajectory, year_grid
from src.services.validation_service import run_validation, split_training

# 使用結構化日誌
logger = get_logger(__name__)

# ==== 由 build_graph 注入 ====
# writer: ArtifactWriter（記錄寫出的檔案，失敗時移除）


def stage_error(stage: str, cause: BaseException) -> Dict[str, Any]:
    """Pipeline state update recording a failed stage"""
    logger.error("Stage failed", stage=stage, error=str(cause), error_type=type(cause).__name__)
    return {
        "error": f"{stage}_error: {cause}",
        "failed_stage": stage,
        "exit_code": getattr(cause, "exit_code", 1),
    }


def _guarded(stage: str):
    """把 B3Error 轉為狀態中的錯誤，由條件邊導向 error_handler"""
    def decorator(func):
        @wraps(func)
        def wrapper(state, *args, **kwargs):
            with stage_context(stage=stage):
                try:
                    return func(state, *args, **kwargs)
                except B3Error as e:
                    stage_error_counter.labels(stage=stage, error_type=type(e).__name__).inc()
                    return stage_error(stage, e)
        return wrapper
    return decorator


def _sampler_config(state) -> SamplerConfig:
    return state.config.sampler


@trace_stage("ingest")
@track_stage_metrics("ingest")
@_guarded("ingest")
def ingest_node(state, **kwargs):
    """讀取觀測值、補上出生數、合併 VR 期間，驗證模式時切分訓練資料"""
    cfg = state.config
    logger.info("Starting ingest node", data=str(cfg.data_path), mode=cfg.mode.value)
    parsed = parse_observations(cfg.data_path)
    if parsed.rejections and cfg.strict:
        raise RowRejectionError(f"{len(parsed.rejections)} rows rejected (strict mode)")

    observations = list(parsed.observations)
    if cfg.births_path is not None:
        observations = attach_births(observations, parse_births_table(cfg.births_path))
    if state.estimation.vr.aggregate:
        observations = aggregate_vr_periods(observations, state.estimation.vr.cv_threshold).observations
    if cfg.mode == RunMode.COUNTRY and cfg.countries:
        wanted = set(cfg.countries)
        observations = [o for o in observations if o.country_code in wanted]
        if not observations:
            raise RowRejectionError(f"no observations for countries {sorted(wanted)}")
    observations_gauge.set(len(observations))

    update: Dict[str, Any] = {"observations": observations, "rejections": parsed.rejections}
    if state.validating:
        training, test = split_training(observations, state.config.validation.cutoff_year)
        update.update(training=training, test=test)
    return update


def _check_diagnostics(diagnostics, strict: bool, label: str) -> None:
    if diagnostics.rhat:
        rhat_max.set(diagnostics.max_rhat)
    failing = diagnostics.failing(settings.rhat_threshold)
    if not failing:
        return
    logger.warning(
        "R-hat above threshold",
        fit=label,
        count=len(failing),
        threshold=settings.rhat_threshold,
        parameters=failing[:10],
    )
    if strict:
        raise DiagnosticsError(f"{len(failing)} parameters with R-hat > {settings.rhat_threshold} ({label} fit)")


@trace_stage("fit")
@track_stage_metrics("fit")
@_guarded("fit")
def fit_node(state, **kwargs):
    """執行 MCMC；驗證模式另外擬合訓練資料"""
    cfg = state.config
    sampler = _sampler_config(state)
    end_year = cfg.projection_end_year
    logger.info("Starting fit node", mode=cfg.mode.value, observations=len(state.observations))

    fixed = None
    if cfg.mode == RunMode.COUNTRY:
        fixed = load_hyperparameters(cfg.hyperparameters_path)

    full = fit(
        state.observations,
        state.estimation,
        sampler,
        fixed_globals=fixed,
        projection_end_year=end_year,
    )
    _check_diagnostics(full.diagnostics, cfg.strict, "full")
    update: Dict[str, Any] = {"fit": full}

    if state.validating:
        train = fit(
            state.training,
            state.estimation,
            sampler,
            projection_end_year=end_year,
            drop_unfittable=True,
        )
        _check_diagnostics(train.diagnostics, cfg.strict, "training")
        update["train_fit"] = train
    return update


@trace_stage("project")
@track_stage_metrics("project")
@_guarded("project")
def project_node(state, **kwargs):
    """以池化權重 W 投影所有國家的係數"""
    W = state.config.pooling_weight
    if W is None:
        W = state.estimation.pooling_weight
    projected = state.fit.project(W, state.config.sampler.seed)
    logger.info("Projection finished", W=W, countries=len(projected))
    return {"pooling_weight": W, "projected": projected}


@trace_stage("summarize")
@track_stage_metrics("summarize")
@_guarded("summarize")
def summarize_node(state, **kwargs):
    model = state.fit.model
    bases = {c.code: c.basis for c in model.countries}
    estimates = estimates_frame(state.projected, bases)
    update: Dict[str, Any] = {"estimates": estimates}
    if state.config.mode == RunMode.GLOBAL:
        update["bias_table"] = bias_prediction_intervals(state.fit, seed=state.config.sampler.seed)
    update["metrics"] = {
        **state.metrics,
        "countries": len(bases),
        "estimate_rows": len(estimates),
        "max_rhat": state.fit.diagnostics.max_rhat,
    }
    return update


@trace_stage("validate")
@track_stage_metrics("validate")
@_guarded("validate")
def validate_node(state, **kwargs):
    cfg = state.config
    weights = cfg.validation.w_sweep if cfg.mode == RunMode.W_SWEEP else [state.pooling_weight]
    report = run_validation(
        state.train_fit,
        state.fit,
        state.test,
        state.observations,
        cfg.validation,
        weights,
        seed=cfg.sampler.seed,
    )
    return {"report": report}


@trace_stage("emit")
@track_stage_metrics("emit")
@_guarded("emit")
def emit_node(state, writer: ArtifactWriter, **kwargs):
    """寫出估計值、抽樣軌跡、診斷、超參數、圖與驗證表"""
    cfg = state.config
    result = state.fit
    model = result.model
    written = []

    target = writer.path("estimates.csv")
    estimates = state.estimates
    if cfg.countries and cfg.mode != RunMode.COUNTRY:
        estimates = estimates[estimates["country"].isin(cfg.countries)].reset_index(drop=True)
    write_estimates(estimates, target)
    written.append(target)

    target = writer.path("diagnostics.json")
    write_diagnostics(result.diagnostics, target, settings.rhat_threshold)
    written.append(target)

    if cfg.write_traces:
        written += write_traces(result.sample, writer)

    if cfg.mode != RunMode.COUNTRY:
        target = writer.path("hyperparameters.json")
        export_hyperparameters(result.global_params(), target)
        written.append(target)

    if state.bias_table is not None:
        target = writer.path("bias_prediction_intervals.csv")
        write_table(state.bias_table, target)
        written.append(target)

    if cfg.plots:
        for code in filter_countries(model.country_codes, cfg.countries):
            block = model.block(code)
            traj = trajectory(state.projected[code], block.basis, year_grid(block.basis))
            target = writer.path(f"plots/{code}.svg")
            plot_country(block, traj, target, title=f"{code} (W = {state.pooling_weight:g})")
            written.append(target)

    if state.report is not None:
        for name, frame in (("validation_leftout.csv", state.report.leftout), ("validation_estimates.csv", state.report.estimates)):
            target = writer.path(name)
            write_table(frame, target)
            written.append(target)
        target = writer.path("validation_summary.txt")
        write_text(state.report.summary_text(), target)
        written.append(target)
        if state.train_fit is not None:
            target = writer.path("diagnostics_training.json")
            write_diagnostics(state.train_fit.diagnostics, target, settings.rhat_threshold)
            written.append(target)

    logger.info("Artifacts written", count=len(written), out_dir=str(writer.out_dir))
    return {"artifacts": [str(p) for p in written]}


@trace_stage("error_handler")
@track_stage_metrics("error_handler")
def error_handler_node(state, writer: ArtifactWriter, **kwargs):
    """錯誤處理節點：記錄失敗階段並移除部分寫出的檔案"""
    logger.error(
        "Error handler triggered",
        stage=state.failed_stage,
        error=state.error,
        run_id=state.run_id,
    )
    writer.cleanup()
    metrics = dict(state.metrics)
    metrics["error_handled"] = True
    metrics["error_type"] = state.error.split(":")[0] if state.error and ":" in state.error else "unknown"
    return {"artifacts": [], "metrics": metrics}
