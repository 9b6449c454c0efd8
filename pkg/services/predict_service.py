"""
Posterior-predictive and posterior summaries behind the result figures and tables.

All functions take constrained draws with a leading draw axis (see
``parameter_transforms.constrained_draws``).
"""

from typing import Dict, Optional, Union

import numpy as np
import pandas as pd
from loguru import logger

from models.domain import N_MONTHS, ModelParams, ObservationPanel, PredictiveSeries, StateTrajectory, TrajectoryBundle
from models.errors import EmptyState, IndexOutOfRange, MissingTrajectory
from models.schemas import RunConfig
from services.storage_service import (
    MISSINGNESS_FILE,
    PROPORTION_FILE,
    SEASONAL_FILE,
    SITE_MISSINGNESS_FILE,
    STATE_TABLE_FILE,
    TRANSITION_FILE,
    state_map_file,
)
from utils.helpers import central_interval, invlogit

MAX_POOLED_VALUES = 1_000_000


def _n_draws(draws: ModelParams) -> int:
    return int(np.shape(draws.mu)[0])


def _pairs(draws: ModelParams, trajectories: Union[TrajectoryBundle, StateTrajectory, None], n_times: int):
    """Draw indices and zero-based state paths paired for predictive sampling."""
    if trajectories is None:
        raise MissingTrajectory("Predictive summaries need sampled trajectories or the modal state sequence")
    if isinstance(trajectories, StateTrajectory):
        states = np.broadcast_to(trajectories.zero_based, (_n_draws(draws), trajectories.states.size))
        index = np.arange(_n_draws(draws))
    else:
        if trajectories.draw_index is None:
            raise MissingTrajectory("Trajectory bundle carries no draw pairing")
        states, index = trajectories.states - 1, trajectories.draw_index
        if index.max() >= _n_draws(draws):
            raise MissingTrajectory(f"Bundle refers to draw {int(index.max()) + 1}, only {_n_draws(draws)} draws loaded")
    if states.shape[1] != n_times:
        raise MissingTrajectory(f"Trajectories have length {states.shape[1]}, panel has {n_times} times")
    return index, states


def cell_probabilities(draws: ModelParams, index: np.ndarray, states: np.ndarray, month: np.ndarray) -> np.ndarray:
    """(M, N, T) outcome probabilities for draws ``index`` following paths ``states``."""
    mu = np.asarray(draws.mu)[index]
    lam = np.asarray(draws.lam)[index]
    phi = np.asarray(draws.phi)[index]
    gamma = np.asarray(draws.gamma)[index]
    rows = np.arange(index.size)[:, None]
    state_term = mu[rows, states]  # (M, T)
    spatial = np.take_along_axis(phi, states[:, :, None], axis=1)  # (M, T, N)
    eta = state_term[:, None, :] + lam[:, :, None] + spatial.transpose(0, 2, 1) + gamma[:, month][:, None, :]
    return invlogit(eta)


def observed_proportion(panel: ObservationPanel) -> np.ndarray:
    """Per-time share of ones among observed sites (nan where nothing is observed)."""
    counts = panel.observed.sum(axis=0)
    ones = np.nansum(panel.y, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, ones / np.maximum(counts, 1), np.nan)


def predictive_proportion(
    draws: ModelParams,
    panel: ObservationPanel,
    trajectories: Union[TrajectoryBundle, StateTrajectory, None],
    rng: np.random.Generator,
    reps: int = 1,
    chunk: Optional[int] = None,
) -> PredictiveSeries:
    """
    Posterior-predictive distribution of the share of sites with outcome one.

    Each (draw, trajectory) pair yields ``reps`` Bernoulli realisations of the
    whole panel; per time the realised share over all sites is summarised by
    its mean and central 95% interval.
    """
    index, states = _pairs(draws, trajectories, panel.n_times)
    month = panel.month_of - 1
    n_pairs = index.size
    chunk = chunk or max(1, int(2e7 // (panel.n_sites * panel.n_times)))
    shares = np.empty((n_pairs * reps, panel.n_times))
    for start in range(0, n_pairs, chunk):
        stop = min(start + chunk, n_pairs)
        prob = cell_probabilities(draws, index[start:stop], states[start:stop], month)
        for rep in range(reps):
            realised = rng.uniform(size=prob.shape) < prob
            shares[rep * n_pairs + start: rep * n_pairs + stop] = realised.mean(axis=1)

    lower, upper = central_interval(shares, 0.95, axis=0)
    mc_se = shares.std(axis=0, ddof=1) / np.sqrt(shares.shape[0]) if shares.shape[0] > 1 else np.zeros(panel.n_times)
    logger.info(f"Predictive proportion from {n_pairs} trajectories x {reps} replications")
    return PredictiveSeries(
        mean=shares.mean(axis=0), lower=lower, upper=upper, observed=observed_proportion(panel), mc_se=mc_se,
    )


def state_probability_map(
    draws: ModelParams,
    trajectory: StateTrajectory,
    state: int,
    panel: ObservationPanel,
    chunk: Optional[int] = None,
) -> pd.DataFrame:
    """
    Per-site mean outcome probability over the times where ``state`` is modal.

    Returns ``site,value,observed,flag``; ``flag`` is ``missing`` for sites with
    no observation at those times. Draws are accumulated ``chunk`` at a time.

    Raises:
        EmptyState: ``state`` is never modal
    """
    n_states = int(np.shape(draws.mu)[1])
    if not 1 <= state <= n_states:
        raise IndexOutOfRange(f"State {state} outside 1..{n_states}")
    assigned = np.flatnonzero(trajectory.states == state)
    if assigned.size == 0:
        raise EmptyState(f"State {state} is never the most likely state")

    s = state - 1
    month_counts = np.bincount(panel.month_of[assigned] - 1, minlength=N_MONTHS)
    mu, lam, phi, gamma = (np.asarray(v) for v in (draws.mu, draws.lam, draws.phi, draws.gamma))
    n_draws = _n_draws(draws)
    chunk = chunk or max(1, int(2e7 // (panel.n_sites * N_MONTHS)))
    total = np.zeros(panel.n_sites)
    for start in range(0, n_draws, chunk):
        stop = min(start + chunk, n_draws)
        base = mu[start:stop, s, None] + lam[start:stop] + phi[start:stop, s, :]  # (k, N)
        probs = invlogit(base[:, :, None] + gamma[start:stop, None, :])  # (k, N, 12)
        total += (probs * month_counts).sum(axis=(0, 2))
    value = total / (n_draws * assigned.size)

    y = panel.y[:, assigned]
    seen = ~np.isnan(y)
    with np.errstate(invalid="ignore"):
        observed = np.where(seen.any(axis=1), np.nansum(y, axis=1) / np.maximum(seen.sum(axis=1), 1), np.nan)
    sites = np.arange(1, panel.n_sites + 1)
    return pd.DataFrame({
        "site": sites,
        "value": value,
        "observed": observed,
        "flag": np.where(seen.any(axis=1), "ok", "missing"),
    })


def missingness_curve(draws: ModelParams, n_times: int) -> pd.DataFrame:
    """Per state and time: mean and 95% band of invlogit(xi_s + beta_s * t')."""
    tprime = np.arange(n_times) / (n_times - 1) if n_times > 1 else np.zeros(1)
    xi, beta = np.asarray(draws.xi), np.asarray(draws.beta)
    frames = []
    for s in range(xi.shape[1]):
        curves = invlogit(xi[:, s, None] + beta[:, s, None] * tprime[None, :])  # (K, T)
        lower, upper = central_interval(curves, 0.95, axis=0)
        frames.append(pd.DataFrame({
            "time": np.arange(1, n_times + 1),
            "state": s + 1,
            "mean": curves.mean(axis=0),
            "q2.5": lower,
            "q97.5": upper,
        }))
    return pd.concat(frames, ignore_index=True)


def _pooled(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    values = values.ravel()
    if values.size > MAX_POOLED_VALUES:
        values = rng.choice(values, size=MAX_POOLED_VALUES, replace=False)
    return values


def state_summary_table(
    draws: ModelParams, trajectory: StateTrajectory, panel: ObservationPanel, rng: Optional[np.random.Generator] = None
) -> pd.DataFrame:
    """
    Observed and modelled outcome and missingness probabilities by modal state.

    Model columns pool cell-level probabilities over draws, sites and assigned
    times (thinned to at most a million values); states that are never modal
    get ``flag=empty`` and nan statistics.
    """
    rng = rng or np.random.default_rng(0)
    n_states = int(np.shape(draws.mu)[1])
    n_draws = _n_draws(draws)
    tprime = panel.scaled_time
    active = panel.active
    rows = []
    for s in range(n_states):
        assigned = np.flatnonzero(trajectory.zero_based == s)
        row = {"state": s + 1, "n_times": int(assigned.size)}
        if assigned.size == 0:
            logger.warning(f"State {s + 1} is never modal; its summary row is left empty")
            row.update({key: np.nan for key in (
                "observed_outcome", "outcome_mean", "outcome_q2.5", "outcome_q97.5",
                "observed_missing", "missing_mean", "missing_q2.5", "missing_q97.5")})
            row["flag"] = "empty"
            rows.append(row)
            continue

        y = panel.y[:, assigned]
        row["observed_outcome"] = float(np.nanmean(y)) if np.any(~np.isnan(y)) else np.nan
        cells = active[:, assigned]
        row["observed_missing"] = float(panel.r[:, assigned][cells].mean()) if cells.any() else np.nan

        per_draw = max(1, panel.n_sites * assigned.size)
        keep = np.arange(n_draws) if n_draws * per_draw <= MAX_POOLED_VALUES else \
            np.sort(rng.choice(n_draws, size=max(1, MAX_POOLED_VALUES // per_draw), replace=False))
        months = panel.month_of[assigned] - 1
        base = np.asarray(draws.mu)[keep, s, None] + np.asarray(draws.lam)[keep] + np.asarray(draws.phi)[keep, s, :]
        outcome = _pooled(invlogit(base[:, :, None] + np.asarray(draws.gamma)[keep][:, None, months]), rng)
        missing = _pooled(invlogit(
            np.asarray(draws.xi)[:, s, None] + np.asarray(draws.beta)[:, s, None] * tprime[assigned][None, :]), rng)
        for name, values in (("outcome", outcome), ("missing", missing)):
            lower, upper = central_interval(values, 0.95)
            row.update({f"{name}_mean": float(values.mean()), f"{name}_q2.5": float(lower), f"{name}_q97.5": float(upper)})
        row["flag"] = "ok"
        rows.append(row)

    columns = ["state", "n_times", "observed_outcome", "outcome_mean", "outcome_q2.5", "outcome_q97.5",
               "observed_missing", "missing_mean", "missing_q2.5", "missing_q97.5", "flag"]
    return pd.DataFrame(rows, columns=columns)


def seasonal_summary(draws: ModelParams) -> pd.DataFrame:
    """Posterior mean with 50% and 95% intervals of the monthly term."""
    gamma = np.asarray(draws.gamma)
    lower50, upper50 = central_interval(gamma, 0.5, axis=0)
    lower95, upper95 = central_interval(gamma, 0.95, axis=0)
    return pd.DataFrame({
        "month": np.arange(1, N_MONTHS + 1),
        "mean": gamma.mean(axis=0),
        "q25": lower50,
        "q75": upper50,
        "q2.5": lower95,
        "q97.5": upper95,
    })


def transition_summary(draws: ModelParams) -> pd.DataFrame:
    """Posterior mean and 95% interval of every transition probability."""
    A = np.asarray(draws.A)
    lower, upper = central_interval(A, 0.95, axis=0)
    mean = A.mean(axis=0)
    n_states = A.shape[1]
    records = [
        {"from": i + 1, "to": j + 1, "mean": mean[i, j], "q2.5": lower[i, j], "q97.5": upper[i, j]}
        for i in range(n_states) for j in range(n_states)
    ]
    return pd.DataFrame(records, columns=["from", "to", "mean", "q2.5", "q97.5"])


def site_missingness(panel: ObservationPanel) -> pd.DataFrame:
    """Per-site share of missing cells overall and after the first observation."""
    active = panel.active
    missing = ~panel.observed
    with np.errstate(invalid="ignore"):
        post_first = np.where(active.any(axis=1), (missing & active).sum(axis=1) / np.maximum(active.sum(axis=1), 1), np.nan)
    return pd.DataFrame({
        "site": np.arange(1, panel.n_sites + 1),
        "missing_share": missing.mean(axis=1),
        "post_first_missing_share": post_first,
        "first_obs": np.where(panel.first_obs >= 0, panel.first_obs + 1, -1),
    })


class PredictService:
    def tables(
        self,
        draws: ModelParams,
        panel: ObservationPanel,
        modal: StateTrajectory,
        trajectories: Union[TrajectoryBundle, StateTrajectory],
        cfg: RunConfig,
    ) -> Dict[str, pd.DataFrame]:
        """
        Every posterior-predictive table keyed by its artifact name.

        States that are never modal get no state map.
        """
        rng_series, rng_table = np.random.default_rng([cfg.seed, 2]), np.random.default_rng([cfg.seed, 3])
        series = predictive_proportion(draws, panel, trajectories, rng_series, reps=cfg.predictive_reps)
        frames = {
            PROPORTION_FILE: series.to_frame(modal.states),
            SEASONAL_FILE: seasonal_summary(draws),
            STATE_TABLE_FILE: state_summary_table(draws, modal, panel, rng_table),
            TRANSITION_FILE: transition_summary(draws),
            SITE_MISSINGNESS_FILE: site_missingness(panel),
        }
        if cfg.model_missingness:
            frames[MISSINGNESS_FILE] = missingness_curve(draws, panel.n_times)
        for state in range(1, cfg.n_states + 1):
            try:
                frames[state_map_file(state)] = state_probability_map(draws, modal, state, panel)
            except EmptyState as e:
                logger.warning(f"Skipping state map: {e}")
        return frames


# Global predict service instance
predict_service = PredictService()
