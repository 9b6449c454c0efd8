"""
Two-regime left-to-right HMM over a bundle of categorical state trajectories.

Every trajectory has its own hidden regime process starting in regime 1; the
emission matrix and the switch probability are shared. Estimation is a Gibbs
sampler: batched FFBS of the regime paths, then conjugate Dirichlet and Beta
updates.
"""

from typing import Dict, Optional

import numpy as np
import pandas as pd
from loguru import logger

from models.domain import ChangepointFit, TrajectoryBundle
from models.errors import LengthMismatch, RangeError
from models.schemas import ChangepointPriors
from services.decode_service import ffbs_from_emissions
from services.storage_service import CHANGEPOINT_EMISSION_FILE, CHANGEPOINT_FILE, CHANGEPOINT_SWITCH_FILE
from utils.helpers import central_interval

START = np.array([1.0, 0.0])


def _transition(q: float) -> np.ndarray:
    return np.array([[1.0 - q, q], [0.0, 1.0]])


def _initial_emission(symbols: np.ndarray, n_categories: int, concentration: float) -> np.ndarray:
    half = max(1, symbols.shape[1] // 2)
    emission = np.empty((2, n_categories))
    for regime, part in enumerate((symbols[:, :half], symbols[:, half:] if symbols.shape[1] > 1 else symbols)):
        counts = np.bincount(part.ravel(), minlength=n_categories)[:n_categories]
        emission[regime] = (counts + concentration) / (counts.sum() + concentration * n_categories)
    return emission


def first_entry_times(regimes: np.ndarray) -> np.ndarray:
    """One-based first time in regime 2 per row; T + 1 when the row never switches."""
    switched = regimes == 1
    n_times = regimes.shape[1]
    return np.where(switched.any(axis=1), switched.argmax(axis=1) + 1, n_times + 1)


def distribution_interval(distribution: np.ndarray, mass: float = 0.95):
    """Central interval (one-based times) of a distribution over 1..len."""
    cdf = np.cumsum(distribution)
    tail = (1.0 - mass) / 2.0
    lower = int(np.searchsorted(cdf, tail - 1e-12)) + 1
    upper = int(np.searchsorted(cdf, 1.0 - tail - 1e-12)) + 1
    return lower, min(upper, distribution.size)


def fit_changepoint(bundle: TrajectoryBundle, priors: Optional[ChangepointPriors] = None) -> ChangepointFit:
    """
    Fit the left-to-right change-point model to a trajectory bundle.

    Args:
        bundle: M trajectories with one-based categories
        priors: Dirichlet/Beta hyperparameters, iterations and seed

    Returns:
        Posterior summary with the first-entry-time distribution over 1..T+1
    """
    priors = priors or ChangepointPriors()
    symbols = bundle.states - 1
    n_traj, n_times = symbols.shape
    n_categories = bundle.n_categories
    if n_traj < 1 or n_times < 1:
        raise LengthMismatch("Change-point bundle is empty")
    if symbols.min() < 0 or symbols.max() >= n_categories:
        raise RangeError(f"Bundle values must lie in 1..{n_categories}")

    degenerate = bool(np.all(symbols == symbols.flat[0]))
    if degenerate:
        logger.warning(f"All trajectories sit in category {int(symbols.flat[0]) + 1}; change point is not identified")

    rng = np.random.default_rng(priors.seed)
    emission = _initial_emission(symbols, n_categories, priors.emission_concentration)
    q = 1.0 / max(n_times, 2)

    n_keep = priors.n_iterations - priors.n_burnin
    emission_draws = np.empty((n_keep, 2, n_categories))
    q_draws = np.empty(n_keep)
    histogram = np.zeros(n_times + 1)

    logger.info(f"Change-point Gibbs: {n_traj} trajectories x {n_times} times, {priors.n_iterations} iterations")
    for iteration in range(priors.n_iterations):
        with np.errstate(divide="ignore"):
            omega = np.log(emission).T[symbols]  # (M, T, 2)
        regimes = ffbs_from_emissions(omega, START, _transition(q), rng)

        for regime in range(2):
            counts = np.bincount(symbols[regimes == regime], minlength=n_categories)[:n_categories]
            emission[regime] = rng.dirichlet(priors.emission_concentration + counts)
        emission = np.clip(emission, 1e-300, None)

        stay = np.sum((regimes[:, :-1] == 0) & (regimes[:, 1:] == 0))
        switch = np.sum((regimes[:, :-1] == 0) & (regimes[:, 1:] == 1))
        q = rng.beta(priors.switch_alpha + switch, priors.switch_beta + stay)

        if iteration >= priors.n_burnin:
            k = iteration - priors.n_burnin
            emission_draws[k] = emission
            q_draws[k] = q
            histogram += np.bincount(first_entry_times(regimes) - 1, minlength=n_times + 1)
        if (iteration + 1) % 100 == 0:
            logger.debug(f"Change-point iteration {iteration + 1}: q={q:.4g}")

    distribution = histogram / histogram.sum()
    map_changepoint = int(np.argmax(distribution)) + 1
    interval = distribution_interval(distribution)
    lower, upper = central_interval(emission_draws, 0.95, axis=0)
    q_lower, q_upper = central_interval(q_draws, 0.95)
    logger.info(f"Most probable change point t={map_changepoint}, 95% interval {interval}")
    return ChangepointFit(
        emission=emission_draws.mean(axis=0),
        emission_lower=lower,
        emission_upper=upper,
        switch_prob=float(q_draws.mean()),
        switch_prob_interval=(float(q_lower), float(q_upper)),
        changepoint_distribution=distribution,
        map_changepoint=map_changepoint,
        interval=interval,
        degenerate=degenerate,
        emission_draws=emission_draws,
        q_draws=q_draws,
    )


class ChangepointService:
    def __init__(self, priors: Optional[ChangepointPriors] = None):
        self.priors = priors or ChangepointPriors()

    def fit(self, bundle: TrajectoryBundle, priors: Optional[ChangepointPriors] = None) -> ChangepointFit:
        return fit_changepoint(bundle, priors or self.priors)

    def frames(self, fit: ChangepointFit) -> Dict[str, pd.DataFrame]:
        """Change-point distribution, regime emissions and the switch summary keyed by artifact name."""
        switch = pd.DataFrame({
            "switch_prob": [fit.switch_prob],
            "q2.5": [fit.switch_prob_interval[0]],
            "q97.5": [fit.switch_prob_interval[1]],
            "map_changepoint": [fit.map_changepoint],
            "interval_lower": [fit.interval[0]],
            "interval_upper": [fit.interval[1]],
            "degenerate": [fit.degenerate],
        })
        return {
            CHANGEPOINT_FILE: fit.distribution_frame(),
            CHANGEPOINT_EMISSION_FILE: fit.emission_frame(),
            CHANGEPOINT_SWITCH_FILE: switch,
        }


# Global changepoint service instance
changepoint_service = ChangepointService()
