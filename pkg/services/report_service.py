"""
SVG charts and the markdown run report.
"""

from typing import List, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402

from services.storage_service import (  # noqa: E402
    ADAPTATION_FILE,
    CHANGEPOINT_EMISSION_FILE,
    CHANGEPOINT_FILE,
    CHANGEPOINT_SWITCH_FILE,
    DIAGNOSTICS_FILE,
    ELPD_COMPARE_FILE,
    MISSINGNESS_FILE,
    PROPORTION_FILE,
    REPORT_FILE,
    SEASONAL_FILE,
    STATE_TABLE_FILE,
    TRAJECTORY_FILE,
    TRANSITION_FILE,
    StorageService,
)
from utils.helpers import create_timestamp  # noqa: E402

PROPORTION_SVG = "proportion_series.svg"
MISSINGNESS_SVG = "missingness_curves.svg"
SEASONAL_SVG = "seasonal.svg"
REPORT_REQUIRED = (DIAGNOSTICS_FILE, TRAJECTORY_FILE, PROPORTION_FILE)
MONTH_LABELS = ["J", "F", "M", "A", "M", "J", "J", "A", "S", "O", "N", "D"]


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.debug(f"Wrote chart {path}")
    return path


def plot_proportion(frame: pd.DataFrame, path: str) -> str:
    """Observed share of ones, predictive mean and 95% ribbon; modal states as a strip below."""
    has_states = "modal_state" in frame.columns
    fig, axes = plt.subplots(2 if has_states else 1, 1, figsize=(10, 5), sharex=True, squeeze=False,
                             gridspec_kw={"height_ratios": [5, 1]} if has_states else None)
    ax = axes[0, 0]
    ax.fill_between(frame["time"], frame["q2.5"], frame["q97.5"], color="tab:blue", alpha=0.25, label="95% interval")
    ax.plot(frame["time"], frame["mean"], color="tab:blue", lw=1.0, label="predictive mean")
    ax.plot(frame["time"], frame["observed"], color="black", lw=0.6, label="observed")
    ax.set_ylabel("proportion of sites with outcome 1")
    ax.legend(loc="upper right", frameon=False)
    if has_states:
        strip = axes[1, 0]
        strip.imshow(frame["modal_state"].to_numpy()[None, :], aspect="auto", cmap="viridis", interpolation="nearest",
                     extent=(frame["time"].min() - 0.5, frame["time"].max() + 0.5, 0, 1))
        strip.set_yticks([])
        strip.set_xlabel("time")
    else:
        ax.set_xlabel("time")
    return _save(fig, path)


def plot_missingness(frame: pd.DataFrame, path: str) -> str:
    """One curve with a 95% band per state."""
    fig, ax = plt.subplots(figsize=(8, 4))
    for state, group in frame.groupby("state", sort=True):
        ax.fill_between(group["time"], group["q2.5"], group["q97.5"], alpha=0.2)
        ax.plot(group["time"], group["mean"], lw=1.0, label=f"state {state}")
    ax.set_xlabel("time")
    ax.set_ylabel("probability of a missing outcome")
    ax.set_ylim(0.0, 1.0)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_seasonal(frame: pd.DataFrame, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(frame["month"], frame["q2.5"], frame["q97.5"], color="tab:orange", alpha=0.2, label="95%")
    ax.fill_between(frame["month"], frame["q25"], frame["q75"], color="tab:orange", alpha=0.4, label="50%")
    ax.plot(frame["month"], frame["mean"], color="tab:orange", marker="o", lw=1.0)
    ax.axhline(0.0, color="grey", lw=0.5)
    ax.set_xticks(np.arange(1, 13), MONTH_LABELS)
    ax.set_ylabel("seasonal effect (logit scale)")
    ax.legend(frameon=False)
    return _save(fig, path)


def write_charts(storage: StorageService) -> List[str]:
    """Render every chart whose source table exists."""
    written = []
    for source, target, plot in (
        (PROPORTION_FILE, PROPORTION_SVG, plot_proportion),
        (MISSINGNESS_FILE, MISSINGNESS_SVG, plot_missingness),
        (SEASONAL_FILE, SEASONAL_SVG, plot_seasonal),
    ):
        if storage.exists(source):
            written.append(plot(storage.read_frame(source), storage.path(target)))
    return written


def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "NA" if np.isnan(value) else f"{value:.4g}"
    return str(value)


def markdown_table(frame: pd.DataFrame, max_rows: Optional[int] = None) -> str:
    shown = frame if max_rows is None else frame.head(max_rows)
    lines = ["| " + " | ".join(map(str, shown.columns)) + " |", "|" + "---|" * len(shown.columns)]
    for row in shown.itertuples(index=False):
        lines.append("| " + " | ".join(_format(v) for v in row) + " |")
    if max_rows is not None and len(frame) > max_rows:
        lines.append(f"\n_{len(frame) - max_rows} more rows in the CSV._")
    return "\n".join(lines)


def _scalar_rows(diagnostics: pd.DataFrame) -> pd.DataFrame:
    mask = ~diagnostics["param"].str.match(r"^(lambda|phi|gamma)\[")
    return diagnostics[mask]


def build_report(storage: StorageService) -> str:
    """
    Assemble the markdown summary of a run and write it next to the artifacts.

    Raises:
        MissingArtifacts: Fit, decode or predict outputs are absent
    """
    storage.require(*REPORT_REQUIRED)
    write_charts(storage)
    diagnostics = storage.read_frame(DIAGNOSTICS_FILE)
    trajectory = storage.read_frame(TRAJECTORY_FILE)

    sections = [f"# Spatial HMM run report\n\nGenerated {create_timestamp()} from `{storage.output_dir}`."]

    worst = diagnostics["rhat"].max()
    low_ess = diagnostics["ess_bulk"].min()
    convergence = [f"- max R-hat: {_format(worst)}", f"- min bulk ESS: {_format(low_ess)}"]
    if storage.exists(ADAPTATION_FILE):
        adaptation = storage.read_frame(ADAPTATION_FILE)
        convergence.append(f"- divergent transitions: {int(adaptation['divergences'].sum())}")
    sections.append("## Convergence\n\n" + "\n".join(convergence))
    sections.append("## Scalar parameters\n\n" + markdown_table(_scalar_rows(diagnostics)))

    modal = trajectory["modal_state"]
    occupancy = modal.value_counts(normalize=True).sort_index()
    sections.append(
        "## Decoded states\n\n"
        + "\n".join(f"- state {int(s)}: modal at {share:.1%} of times" for s, share in occupancy.items())
        + f"\n- mean modal probability: {trajectory['modal_prob'].mean():.3f}"
        + f"\n- times with modal probability below 0.5: {int((trajectory['modal_prob'] < 0.5).sum())}"
    )

    sections.append(f"## Predictive proportion\n\n![proportion]({PROPORTION_SVG})")
    if storage.exists(MISSINGNESS_FILE):
        sections.append(f"## Missingness by state\n\n![missingness]({MISSINGNESS_SVG})")
    if storage.exists(SEASONAL_FILE):
        sections.append(f"## Seasonal term\n\n![seasonal]({SEASONAL_SVG})")
    for title, name in (("State summary", STATE_TABLE_FILE), ("Transition matrix", TRANSITION_FILE)):
        if storage.exists(name):
            sections.append(f"## {title}\n\n" + markdown_table(storage.read_frame(name)))

    if storage.exists(CHANGEPOINT_FILE):
        distribution = storage.read_frame(CHANGEPOINT_FILE)
        best = distribution.loc[distribution["probability"].idxmax()]
        text = f"## Change point\n\nMost probable change point: time {int(best['time'])} (probability {best['probability']:.3f})"
        if storage.exists(CHANGEPOINT_SWITCH_FILE):
            text += "\n\n" + markdown_table(storage.read_frame(CHANGEPOINT_SWITCH_FILE))
        if storage.exists(CHANGEPOINT_EMISSION_FILE):
            text += "\n\n" + markdown_table(storage.read_frame(CHANGEPOINT_EMISSION_FILE))
        sections.append(text)

    if storage.exists(ELPD_COMPARE_FILE):
        sections.append("## Held-out ELPD\n\n" + markdown_table(storage.read_frame(ELPD_COMPARE_FILE)))

    report = "\n\n".join(sections) + "\n"
    target = storage.write_text(report, REPORT_FILE)
    logger.success(f"Report written to {target}")
    return target


class ReportService:
    def charts(self, storage: StorageService) -> List[str]:
        return write_charts(storage)

    def build(self, storage: StorageService) -> str:
        return build_report(storage)


# Global report service instance
report_service = ReportService()
