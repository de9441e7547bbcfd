#!/usr/bin/env python3
"""
產生合成觀測值資料集
從生成模型抽樣，輸出可直接交給 CLI 的觀測值 CSV 與真實軌跡
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.observability import get_logger, setup_logging  # noqa: E402
from src.config import load_model_config, settings  # noqa: E402
from src.models.schemas import SourceType  # noqa: E402
from src.services.ingest_service import write_observations  # noqa: E402
from src.services.simulate_service import SimulatedCountry, simulate_dataset  # noqa: E402

logger = get_logger(__name__)


def default_countries(n: int, seed: int) -> list:
    """n 個國家，輪流使用 DHS 調查、MICS 間接估計與完整 VR"""
    rng = np.random.default_rng(seed)
    countries = []
    for i in range(n):
        code = f"C{i:02d}"
        kind = i % 3
        mid = float(rng.uniform(20.0, 200.0))
        decline = float(rng.uniform(0.0, 0.05))
        if kind == 0:
            countries.append(SimulatedCountry(code=code, mid_u5mr=mid, annual_decline=decline))
        elif kind == 1:
            countries.append(
                SimulatedCountry(
                    code=code,
                    mid_u5mr=mid,
                    annual_decline=decline,
                    survey_type=SourceType.MICS_INDIRECT,
                    survey_se=None,
                    single_sources=[(SourceType.LIFE_TABLE, 1988.0)],
                )
            )
        else:
            countries.append(
                SimulatedCountry(
                    code=code,
                    mid_u5mr=mid,
                    annual_decline=decline,
                    survey_years=[1990.0, 2000.0],
                    vr_years=[float(y) for y in range(1975, 2011)],
                )
            )
    return countries


def load_countries(path: Path) -> list:
    with path.open() as fh:
        return [SimulatedCountry.model_validate(item) for item in json.load(fh)]


def main():
    parser = argparse.ArgumentParser(description="產生 B3 合成資料")
    parser.add_argument("--out", type=Path, default=Path("data/simulated.csv"), help="觀測值 CSV")
    parser.add_argument("--truth-out", type=Path, default=None, help="真實軌跡 CSV (country, year, u5mr)")
    parser.add_argument("--countries", type=Path, default=None, help="國家設定 JSON（SimulatedCountry 列表）")
    parser.add_argument("--n-countries", type=int, default=6, help="未指定 --countries 時的國家數")
    parser.add_argument("--config", type=Path, default=None, help="模型設定 TOML")
    parser.add_argument("--seed", type=int, default=settings.seed, help="亂數種子")
    args = parser.parse_args()

    setup_logging(level=settings.log_level.upper())
    countries = load_countries(args.countries) if args.countries else default_countries(args.n_countries, args.seed)
    config = load_model_config(args.config or settings.config_path)
    data = simulate_dataset(countries, config=config, seed=args.seed)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_observations(data.observations, args.out)
    logger.info("Observations written", path=str(args.out), rows=len(data.observations))

    if args.truth_out:
        frames = []
        for code, basis in sorted(data.bases.items()):
            years = np.arange(np.ceil(basis.first_year), np.floor(basis.last_year) + 1)
            frames.append(pd.DataFrame({"country": code, "year": years.astype(int),
                                        "u5mr": np.exp(data.log_rate(code, years))}))
        args.truth_out.parent.mkdir(parents=True, exist_ok=True)
        pd.concat(frames).to_csv(args.truth_out, index=False, float_format="%.6f")
        logger.info("Truth written", path=str(args.truth_out))


if __name__ == "__main__":
    main()
