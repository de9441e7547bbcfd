"""
Static SVG trajectory plots per country
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.observability.logging import get_logger  # noqa: E402
from src.models.schemas import SOURCE_LABELS  # noqa: E402
from src.services.model_service import Branch, CountryBlock  # noqa: E402
from src.services.projection_service import Trajectory  # noqa: E402

logger = get_logger(__name__)

# 輸出可重現：不寫入日期，固定 SVG id 雜湊
matplotlib.rcParams["svg.hashsalt"] = "b3-estimation"
matplotlib.rcParams["svg.fonttype"] = "none"

MARKERS = ("o", "s", "^", "D", "v", "P", "X", "*", "<", ">")


def plot_country(
    block: CountryBlock,
    traj: Trajectory,
    path: Path,
    title: str = "",
) -> None:
    """資料點（依系列）與 ±2 抽樣標準誤、中位數曲線以及紅色 90% 區間"""
    fig, ax = plt.subplots(figsize=(8, 5))
    try:
        ax.fill_between(traj.years, traj.lower, traj.upper, color="red", alpha=0.25, linewidth=0, label="90% CI")
        ax.plot(traj.years, traj.median, color="darkred", linewidth=1.8, label="median")

        series_ids: Sequence[str] = sorted({o.series_id for o in block.all_obs})
        cmap = plt.get_cmap("tab10")
        for s_index, sid in enumerate(series_ids):
            members = [
                (o, br, v)
                for o, br, v in zip(block.all_obs, block.all_branches, block.all_v)
                if o.series_id == sid
            ]
            members.sort(key=lambda m: m[0].ref_year)
            years = np.array([m[0].ref_year for m in members])
            u5mr = np.array([m[0].u5mr for m in members])
            sd = np.array([m[2] for m in members])
            color = cmap(s_index % 10)
            marker = MARKERS[s_index % len(MARKERS)]
            label = f"{sid} ({SOURCE_LABELS[members[0][0].source_type]})"

            excluded = np.array([m[1] == Branch.EXCLUDED for m in members])
            ax.vlines(years, u5mr * np.exp(-2.0 * sd), u5mr * np.exp(2.0 * sd), colors=[color], alpha=0.4, linewidth=1)
            ax.plot(years, u5mr, color=color, linewidth=0.6, alpha=0.6)
            ax.scatter(years[~excluded], u5mr[~excluded], color=color, marker=marker, s=22, label=label, zorder=3)
            if excluded.any():
                ax.scatter(years[excluded], u5mr[excluded], facecolors="none", edgecolors=[color], marker=marker, s=22, zorder=3)

        ax.set_xlabel("Year")
        ax.set_ylabel("U5MR (deaths per 1000 births)")
        ax.set_title(title or block.code)
        ax.set_ylim(bottom=0)
        ax.legend(fontsize=7, loc="upper right", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.debug("Plot written", country=block.code, path=str(path))
