"""
Run artifacts: estimates, traces, diagnostics, hyperparameters and validation tables
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.observability.logging import get_logger
from src.models.schemas import GlobalParams
from src.services.basis_service import SplineBasis
from src.services.diagnostics_service import Diagnostics
from src.services.exceptions import ConfigError, ExportError
from src.services.projection_service import trajectory, year_grid
from src.services.sampler_service import PosteriorSample

logger = get_logger(__name__)

ESTIMATE_COLUMNS = ["country", "year", "median", "lower90", "upper90"]


class ArtifactWriter:
    """追蹤本次執行寫出的檔案，失敗時可全部移除"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.written: List[Path] = []
        self._created_dir = False

    def path(self, name: str) -> Path:
        if not self.out_dir.exists():
            try:
                self.out_dir.mkdir(parents=True)
            except OSError as e:
                raise ExportError(f"cannot create output directory {self.out_dir}: {e}") from e
            self._created_dir = True
        target = self.out_dir / name
        target.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(target)
        return target

    def cleanup(self) -> None:
        removed = 0
        for target in reversed(self.written):
            if target.exists():
                target.unlink()
                removed += 1
        for target in sorted({t.parent for t in self.written}, key=lambda p: len(p.parts), reverse=True):
            if target != self.out_dir and target.exists() and not any(target.iterdir()):
                target.rmdir()
        if self._created_dir and self.out_dir.exists() and not any(self.out_dir.iterdir()):
            self.out_dir.rmdir()
        self.written.clear()
        if removed:
            logger.warning("Partial artifacts removed", count=removed)


# ==== 估計值 ====

def estimates_frame(projected: Dict[str, np.ndarray], bases: Dict[str, SplineBasis]) -> pd.DataFrame:
    """每個國家每個整數年份的中位數與 90% 區間"""
    frames = []
    for code in sorted(projected):
        basis = bases[code]
        years = year_grid(basis)
        traj = trajectory(projected[code], basis, years)
        frames.append(pd.DataFrame({
            "country": code,
            "year": years.astype(int),
            "median": traj.median,
            "lower90": traj.lower,
            "upper90": traj.upper,
        }))
    if not frames:
        return pd.DataFrame(columns=ESTIMATE_COLUMNS)
    frame = pd.concat(frames, ignore_index=True)
    return frame.sort_values(["country", "year"], kind="mergesort").reset_index(drop=True)


def write_estimates(frame: pd.DataFrame, path: Path) -> None:
    values = frame[["median", "lower90", "upper90"]].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise ExportError("estimates contain NaN or infinite values")
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    logger.info("Estimates written", path=str(path), rows=len(frame))


# ==== 抽樣軌跡與診斷 ====

def write_traces(sample: PosteriorSample, writer: ArtifactWriter, prefix: str = "trace") -> List[Path]:
    """每條鏈一個 CSV，欄位為參數名稱"""
    paths = []
    for chain in range(sample.n_chains):
        target = writer.path(f"traces/{prefix}_chain{chain + 1}.csv")
        frame = pd.DataFrame(sample.draws[chain], columns=sample.names)
        frame.insert(0, "draw", np.arange(1, sample.n_keep + 1))
        frame.to_csv(target, index=False, float_format="%.10g", lineterminator="\n")
        paths.append(target)
    logger.info("Traces written", chains=sample.n_chains, parameters=len(sample.names))
    return paths


def write_diagnostics(diagnostics: Diagnostics, path: Path, threshold: Optional[float] = None) -> None:
    payload = json.loads(diagnostics.model_dump_json())
    payload["max_rhat"] = diagnostics.max_rhat
    if threshold is not None:
        payload["rhat_threshold"] = threshold
        payload["failing"] = diagnostics.failing(threshold)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


# ==== 超參數 ====

def export_hyperparameters(params: GlobalParams, path: Path) -> None:
    """全域參數的後驗中位數（以及全球變化分布 G、V）"""
    if params.change_median is None or params.change_variance is None:
        logger.warning("Hyperparameter file written without the global change distribution")
    path.write_text(params.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(
        "Hyperparameters exported",
        path=str(path),
        source_types=len(params.mu0),
        subtypes=len(params.omega),
    )


def load_hyperparameters(path: Union[str, Path]) -> GlobalParams:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"hyperparameter file not found: {path}")
    try:
        return GlobalParams.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"invalid hyperparameter file {path}: {e.error_count()} errors") from e


# ==== 表格 ====

def write_table(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def write_text(text: str, path: Path) -> None:
    path.write_text(text, encoding="utf-8")


def filter_countries(codes: Sequence[str], wanted: Optional[Sequence[str]]) -> List[str]:
    if not wanted:
        return sorted(codes)
    missing = sorted(set(wanted) - set(codes))
    if missing:
        logger.warning("Requested countries not in the fit", countries=missing)
    return sorted(set(codes) & set(wanted))
