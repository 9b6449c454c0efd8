"""
Reading and writing every file the engine consumes or produces.

All CSVs have a fixed column order and use ``settings.float_format`` for
floats, so outputs are byte-stable for a given seed. Sites, times and states
are one-based in files (sites follow ``index_base`` on input).
"""

import os
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from config.settings import settings
from models.domain import ModelParams, NeighborhoodGraph, ObservationPanel, PosteriorDraws, StateTrajectory, TrajectoryBundle
from models.errors import DuplicateCell, LengthMismatch, MalformedRow, MissingArtifacts, RangeError
from models.schemas import ElpdResult, HeldOutCell, HoldoutPlan
from services.parameter_transforms import ParamLayout, batch_from_rows, batch_to_rows, params_from_row, params_to_row

PANEL_COLUMNS = ["site", "time", "y"]
MISSING_TOKENS = {"NA", ""}

# Artifact names shared by the subcommands
PANEL_FILE = "panel.csv"
EDGES_FILE = "edges.csv"
DRAWS_FILE = "draws.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
ADAPTATION_FILE = "adaptation.csv"
TRAJECTORY_FILE = "trajectory.csv"
VITERBI_FILE = "viterbi.csv"
BUNDLE_FILE = "bundle.csv"
TRUE_PARAMS_FILE = "true_params.csv"
TRUE_TRAJECTORY_FILE = "true_trajectory.csv"
PROPORTION_FILE = "proportion_series.csv"
MISSINGNESS_FILE = "missingness_curves.csv"
SEASONAL_FILE = "seasonal.csv"
STATE_TABLE_FILE = "state_table.csv"
TRANSITION_FILE = "transition_matrix.csv"
SITE_MISSINGNESS_FILE = "site_missingness.csv"
CHANGEPOINT_FILE = "changepoint.csv"
CHANGEPOINT_EMISSION_FILE = "changepoint_emission.csv"
CHANGEPOINT_SWITCH_FILE = "changepoint_switch.csv"
HOLDOUT_FILE = "holdout_plan.csv"
ELPD_POINTWISE_FILE = "elpd_pointwise.csv"
ELPD_COMPARE_FILE = "elpd_compare.csv"
REPORT_FILE = "report.md"


def state_map_file(state: int) -> str:
    return f"state_map_s{state}.csv"


def _line(index) -> int:
    # header is line 1
    return int(index) + 2


def _as_int(column: pd.Series) -> Tuple[np.ndarray, np.ndarray]:
    numeric = pd.to_numeric(column, errors="coerce")
    bad = numeric.isna() | (numeric != np.floor(numeric))
    return numeric.fillna(-1).astype(np.int64).to_numpy(), bad.to_numpy()


def load_panel(path: str, n_sites: Optional[int] = None, n_times: Optional[int] = None,
               index_base: int = 1, start_month: int = 1) -> ObservationPanel:
    """
    Read a long-format ``site,time,y`` CSV into a dense panel.

    ``y`` is 0, 1 or NA; (site, time) pairs without a row are missing. Sizes
    default to the largest index present.

    Raises:
        MalformedRow: Bad header, field count or value (with line number)
        DuplicateCell: A (site, time) pair appears twice
        RangeError: Site or time outside the panel
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.ParserError as e:
        raise MalformedRow(f"{path}: {e}")
    except pd.errors.EmptyDataError:
        raise MalformedRow(f"{path}:1: file is empty")
    if list(frame.columns) != PANEL_COLUMNS:
        raise MalformedRow(f"{path}:1: header must be {','.join(PANEL_COLUMNS)}, got {','.join(map(str, frame.columns))}")

    frame = frame.fillna("")
    site, bad_site = _as_int(frame["site"])
    time, bad_time = _as_int(frame["time"])
    raw_y = frame["y"].str.strip()
    bad_y = ~raw_y.isin({"0", "1"} | MISSING_TOKENS).to_numpy()
    for bad, what in ((bad_site, "site"), (bad_time, "time"), (bad_y, "y")):
        if bad.any():
            k = int(np.argmax(bad))
            raise MalformedRow(f"{path}:{_line(k)}: invalid {what} value '{frame[what].iloc[k]}'")

    site = site - index_base
    time = time - index_base
    n_sites = int(site.max()) + 1 if n_sites is None and site.size else (n_sites or 0)
    n_times = int(time.max()) + 1 if n_times is None and time.size else (n_times or 0)
    out_of_range = (site < 0) | (site >= n_sites) | (time < 0) | (time >= n_times)
    if out_of_range.any():
        k = int(np.argmax(out_of_range))
        raise RangeError(
            f"{path}:{_line(k)}: cell (site {site[k] + index_base}, time {time[k] + index_base}) "
            f"outside {n_sites} sites x {n_times} times"
        )
    duplicated = pd.Series(site * max(n_times, 1) + time).duplicated().to_numpy()
    if duplicated.any():
        k = int(np.argmax(duplicated))
        raise DuplicateCell(f"{path}:{_line(k)}: duplicate cell (site {site[k] + index_base}, time {time[k] + index_base})")

    y = np.full((n_sites, n_times), np.nan)
    present = ~raw_y.isin(MISSING_TOKENS).to_numpy()
    y[site[present], time[present]] = raw_y[present].astype(np.float64).to_numpy()
    panel = ObservationPanel.from_outcomes(y, start_month=start_month)

    report = panel.missingness_report()
    logger.info(
        f"Loaded panel {n_sites}x{n_times} from {path}: missing {report['overall_missing']:.3f}, "
        f"after first observation {report['post_first_missing']:.3f}, "
        f"{report['never_observed_sites']} sites never observed"
    )
    return panel


class StorageService:
    """Artifact files of one run, all placed under ``output_dir``."""

    def __init__(self, output_dir: Optional[str] = None):
        self.output_dir = output_dir or settings.output_dir
        self.float_format = settings.float_format

    def for_output(self, output_dir: Optional[str]) -> "StorageService":
        """This service if it already writes to ``output_dir``, otherwise one that does."""
        if not output_dir or os.path.abspath(output_dir) == os.path.abspath(self.output_dir):
            return self
        return StorageService(output_dir)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def exists(self, name: str) -> bool:
        return os.path.isfile(self.path(name))

    def require(self, *names: str):
        """
        Raises:
            MissingArtifacts: Any of ``names`` has not been written yet
        """
        missing = [name for name in names if not self.exists(name)]
        if missing:
            raise MissingArtifacts(f"Missing in {self.output_dir}: {', '.join(missing)}")

    def list_artifacts(self) -> List[str]:
        if not os.path.isdir(self.output_dir):
            return []
        return sorted(name for name in os.listdir(self.output_dir) if os.path.isfile(self.path(name)))

    def write_frame(self, frame: pd.DataFrame, name: str) -> str:
        os.makedirs(self.output_dir, exist_ok=True)
        target = self.path(name)
        frame.to_csv(target, index=False, float_format=self.float_format, na_rep="NA", lineterminator="\n")
        logger.debug(f"Wrote {target} ({len(frame)} rows)")
        return target

    def read_frame(self, name: str) -> pd.DataFrame:
        self.require(name)
        return pd.read_csv(self.path(name), float_precision="round_trip")

    # Panels and graphs

    def write_panel(self, panel: ObservationPanel, name: str = PANEL_FILE, index_base: int = 1) -> str:
        """Every cell as one ``site,time,y`` row; missing outcomes are written as NA."""
        sites, times = np.meshgrid(np.arange(panel.n_sites), np.arange(panel.n_times), indexing="ij")
        y = panel.y.ravel()
        values = np.where(np.isnan(y), "NA", np.where(y == 1.0, "1", "0"))
        frame = pd.DataFrame({"site": sites.ravel() + index_base, "time": times.ravel() + index_base, "y": values})
        return self.write_frame(frame, name)

    def read_panel(self, name: str = PANEL_FILE, index_base: int = 1, start_month: int = 1,
                   n_sites: Optional[int] = None, n_times: Optional[int] = None) -> ObservationPanel:
        self.require(name)
        return load_panel(self.path(name), n_sites, n_times, index_base, start_month)

    def write_edges(self, graph: NeighborhoodGraph, name: str = EDGES_FILE, index_base: int = 1) -> str:
        frame = pd.DataFrame(graph.edges + index_base, columns=["site_a", "site_b"])
        return self.write_frame(frame, name)

    # Posterior draws

    def write_draws(self, draws: PosteriorDraws, batch: ModelParams, layout: ParamLayout,
                    name: str = DRAWS_FILE) -> str:
        """Wide draw table: ``chain,draw``, constrained parameters, ``lp__``."""
        frame = pd.DataFrame(batch_to_rows(batch), columns=layout.constrained_names())
        frame.insert(0, "draw", np.tile(np.arange(1, draws.n_draws + 1), draws.n_chains))
        frame.insert(0, "chain", np.repeat(np.arange(1, draws.n_chains + 1), draws.n_draws))
        frame["lp__"] = draws.lp.reshape(-1)
        return self.write_frame(frame, name)

    def read_draws(self, name: str = DRAWS_FILE) -> Tuple[ModelParams, pd.DataFrame]:
        """Constrained draw batch plus the ``chain,draw,lp__`` columns."""
        frame = self.read_frame(name)
        n_states = sum(column.startswith("mu[") for column in frame.columns)
        n_sites = sum(column.startswith("lambda[") for column in frame.columns)
        parameters = frame.drop(columns=[c for c in ("chain", "draw", "lp__") if c in frame.columns])
        expected = ParamLayout(n_states=n_states, n_sites=n_sites).constrained_names()
        if list(parameters.columns) != expected:
            raise LengthMismatch(f"{self.path(name)}: columns do not match S={n_states}, N={n_sites}")
        batch = batch_from_rows(parameters.to_numpy(), n_states, n_sites)
        logger.info(f"Read {len(frame)} draws (S={n_states}, N={n_sites}) from {self.path(name)}")
        return batch, frame[[c for c in ("chain", "draw", "lp__") if c in frame.columns]]

    def write_params(self, params: ModelParams, name: str = TRUE_PARAMS_FILE) -> str:
        layout = ParamLayout(n_states=params.n_states, n_sites=params.n_sites)
        frame = pd.DataFrame(params_to_row(params)[None, :], columns=layout.constrained_names())
        return self.write_frame(frame, name)

    def read_params(self, name: str = TRUE_PARAMS_FILE) -> ModelParams:
        frame = self.read_frame(name)
        return read_params_file(self.path(name), frame)

    # Trajectories

    def write_modal_trajectory(self, trajectory: StateTrajectory, modal_prob: np.ndarray, marginals: np.ndarray,
                               name: str = TRAJECTORY_FILE) -> str:
        frame = pd.DataFrame({
            "time": np.arange(1, trajectory.states.size + 1),
            "modal_state": trajectory.states,
            "modal_prob": modal_prob,
        })
        for s in range(marginals.shape[1]):
            frame[f"p_state_{s + 1}"] = marginals[:, s]
        return self.write_frame(frame, name)

    def read_modal_trajectory(self, name: str = TRAJECTORY_FILE) -> Tuple[StateTrajectory, np.ndarray]:
        frame = self.read_frame(name)
        return StateTrajectory(states=frame["modal_state"].to_numpy(), kind="modal"), frame["modal_prob"].to_numpy()

    def write_trajectory(self, trajectory: StateTrajectory, name: str) -> str:
        frame = pd.DataFrame({"time": np.arange(1, trajectory.states.size + 1), "state": trajectory.states})
        return self.write_frame(frame, name)

    def read_trajectory(self, name: str, kind: str = "viterbi") -> StateTrajectory:
        frame = self.read_frame(name)
        return StateTrajectory(states=frame["state"].to_numpy(), kind=kind)

    def write_bundle(self, bundle: TrajectoryBundle, name: str = BUNDLE_FILE) -> str:
        """One row per trajectory; a leading ``draw`` column names the paired posterior draw."""
        frame = pd.DataFrame(bundle.states, columns=[f"t{t}" for t in range(1, bundle.n_times + 1)])
        if bundle.draw_index is not None:
            frame.insert(0, "draw", bundle.draw_index + 1)
        return self.write_frame(frame, name)

    def read_bundle(self, name: str = BUNDLE_FILE, n_categories: Optional[int] = None) -> TrajectoryBundle:
        self.require(name)
        return read_bundle_file(self.path(name), n_categories)

    # Held-out evaluation

    def write_holdout_plans(self, plans: Sequence[HoldoutPlan], name: str = HOLDOUT_FILE) -> str:
        rows = [
            {"replication": plan.replication + 1, "site": c.site + 1, "time": c.time + 1, "y_true": c.y_true}
            for plan in plans for c in plan.cells
        ]
        return self.write_frame(pd.DataFrame(rows, columns=["replication", "site", "time", "y_true"]), name)

    def read_holdout_plans(self, fraction: float, seed: int, name: str = HOLDOUT_FILE) -> List[HoldoutPlan]:
        frame = self.read_frame(name)
        plans = []
        for replication, group in frame.groupby("replication", sort=True):
            cells = [HeldOutCell(site=int(r.site) - 1, time=int(r.time) - 1, y_true=int(r.y_true))
                     for r in group.itertuples(index=False)]
            plans.append(HoldoutPlan(cells=cells, fraction=fraction, replication=int(replication) - 1,
                                     seed=seed + int(replication) - 1))
        return plans

    def write_elpd(self, plans: Sequence[HoldoutPlan], results_a: Sequence[ElpdResult],
                   results_b: Sequence[ElpdResult], mean: float, se: float) -> Tuple[str, str]:
        pointwise = []
        for plan, a, b in zip(plans, results_a, results_b):
            for cell, value_a, value_b in zip(plan.cells, a.pointwise, b.pointwise):
                pointwise.append({"replication": plan.replication + 1, "site": cell.site + 1, "time": cell.time + 1,
                                  "elpd_a": value_a, "elpd_b": value_b})
        compare = pd.DataFrame({
            "replication": [a.replication + 1 for a in results_a],
            "fingerprint": [a.fingerprint for a in results_a],
            "elpd_a": [a.total for a in results_a],
            "elpd_b": [b.total for b in results_b],
            "difference": [a.total - b.total for a, b in zip(results_a, results_b)],
        })
        summary = pd.DataFrame({"replication": ["mean"], "fingerprint": [""], "elpd_a": [compare["elpd_a"].mean()],
                                "elpd_b": [compare["elpd_b"].mean()], "difference": [mean]})
        se_row = pd.DataFrame({"replication": ["se"], "fingerprint": [""], "elpd_a": [np.nan],
                               "elpd_b": [np.nan], "difference": [se]})
        compare = pd.concat([compare.astype({"replication": str}), summary, se_row], ignore_index=True)
        return (
            self.write_frame(pd.DataFrame(pointwise, columns=["replication", "site", "time", "elpd_a", "elpd_b"]),
                             ELPD_POINTWISE_FILE),
            self.write_frame(compare, ELPD_COMPARE_FILE),
        )

    def write_text(self, text: str, name: str) -> str:
        os.makedirs(self.output_dir, exist_ok=True)
        with open(self.path(name), "w", encoding="utf-8") as handle:
            handle.write(text)
        return self.path(name)


def read_params_file(path: str, frame: Optional[pd.DataFrame] = None) -> ModelParams:
    """First row of a constrained parameter CSV (true parameters or a user initial point)."""
    frame = pd.read_csv(path, float_precision="round_trip") if frame is None else frame
    n_states = sum(column.startswith("mu[") for column in frame.columns)
    n_sites = sum(column.startswith("lambda[") for column in frame.columns)
    columns = ParamLayout(n_states=n_states, n_sites=n_sites).constrained_names()
    missing = [c for c in columns if c not in frame.columns]
    if missing or frame.empty:
        raise MalformedRow(f"{path}:1: parameter file lacks columns {', '.join(missing[:3]) or '(no rows)'}")
    return params_from_row(frame[columns].iloc[0].to_numpy(dtype=np.float64), n_states, n_sites)


def read_bundle_file(path: str, n_categories: Optional[int] = None) -> TrajectoryBundle:
    """
    Read a trajectory bundle (rows are trajectories, columns are times).

    Raises:
        MalformedRow: Non-integer entries
        RangeError: Values outside 1..n_categories
    """
    frame = pd.read_csv(path)
    draw_index = None
    if "draw" in frame.columns:
        draw_index = frame.pop("draw").to_numpy(dtype=np.int64) - 1
    numeric = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    invalid = np.isnan(numeric) | (numeric != np.round(numeric))
    if invalid.any():
        row = int(np.argmax(invalid.any(axis=1)))
        raise MalformedRow(f"{path}:{_line(row)}: trajectory values must be integers")
    values = numeric.astype(np.int64)
    n_categories = n_categories or int(values.max())
    bad = (values < 1) | (values > n_categories)
    if bad.any():
        row = int(np.argmax(bad.any(axis=1)))
        raise RangeError(f"{path}:{_line(row)}: trajectory values must lie in 1..{n_categories}")
    return TrajectoryBundle(states=values, n_categories=n_categories, draw_index=draw_index)


# Global storage service instance
storage_service = StorageService()
