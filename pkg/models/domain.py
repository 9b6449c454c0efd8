"""
Numerical domain objects shared by the engine services.

Array-valued containers are frozen dataclasses (or NamedTuples where the
object has to flow through jax transformations, as ``ModelParams`` does).
State labels are one-based wherever they leave the engine (trajectories,
CSV files); the algorithms themselves index states from zero.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

NEVER_OBSERVED = -1
N_MONTHS = 12


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class NeighborhoodGraph:
    """Site adjacency stored as a flat edge list plus the degree table."""

    n_sites: int
    edges: np.ndarray  # (n_edges, 2), each row sorted (i < j)
    degrees: np.ndarray  # (n_sites,)
    labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "edges", _frozen(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)))
        object.__setattr__(self, "degrees", _frozen(np.asarray(self.degrees, dtype=np.int64)))

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])


@dataclass(frozen=True)
class ObservationPanel:
    """
    Binary site-by-time outcomes with informative missingness.

    ``y`` holds 0/1 with ``nan`` for missing cells. ``r`` is the missingness
    indicator (1 iff ``y`` is missing). ``first_obs`` is the first observed
    time index per site or ``NEVER_OBSERVED``. ``r_excluded`` marks cells whose
    missingness indicator is left out of the likelihood (held-out cells).
    """

    y: np.ndarray
    r: np.ndarray
    first_obs: np.ndarray
    month_of: np.ndarray
    start_month: int = 1
    r_excluded: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen(np.asarray(self.y, dtype=np.float64)))
        object.__setattr__(self, "r", _frozen(np.asarray(self.r, dtype=np.int8)))
        object.__setattr__(self, "first_obs", _frozen(np.asarray(self.first_obs, dtype=np.int64)))
        object.__setattr__(self, "month_of", _frozen(np.asarray(self.month_of, dtype=np.int64)))
        excluded = self.r_excluded
        if excluded is None:
            excluded = np.zeros(self.y.shape, dtype=bool)
        object.__setattr__(self, "r_excluded", _frozen(np.asarray(excluded, dtype=bool)))

    @classmethod
    def from_outcomes(
        cls,
        y: np.ndarray,
        start_month: int = 1,
        r_excluded: Optional[np.ndarray] = None,
        first_obs: Optional[np.ndarray] = None,
    ) -> "ObservationPanel":
        """Build a panel from an outcome matrix, deriving r, first_obs and month_of."""
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2:
            raise ValueError(f"Outcome matrix must be 2-dimensional, got shape {y.shape}")
        observed = ~np.isnan(y)
        r = (~observed).astype(np.int8)
        if first_obs is None:
            first_obs = np.where(observed.any(axis=1), observed.argmax(axis=1), NEVER_OBSERVED)
        n_times = y.shape[1]
        month_of = 1 + (start_month - 1 + np.arange(n_times)) % N_MONTHS
        return cls(y=y, r=r, first_obs=first_obs, month_of=month_of,
                   start_month=start_month, r_excluded=r_excluded)

    @property
    def n_sites(self) -> int:
        return int(self.y.shape[0])

    @property
    def n_times(self) -> int:
        return int(self.y.shape[1])

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.y)

    @property
    def active(self) -> np.ndarray:
        """Cells at or after each site's first observation."""
        t = np.arange(self.n_times)[None, :]
        first = self.first_obs[:, None]
        return (first != NEVER_OBSERVED) & (t >= first)

    @property
    def r_mask(self) -> np.ndarray:
        """Cells whose missingness indicator enters the likelihood."""
        return self.active & ~self.r_excluded

    @property
    def scaled_time(self) -> np.ndarray:
        """t' = (t - 1) / (T - 1) with one-based t."""
        if self.n_times == 1:
            return np.zeros(1)
        return np.arange(self.n_times) / (self.n_times - 1)

    def missingness_report(self) -> Dict[str, float]:
        observed = self.observed
        active = self.active
        n_active = int(active.sum())
        return {
            "overall_missing": float(1.0 - observed.mean()),
            "post_first_missing": float(1.0 - observed[active].mean()) if n_active else float("nan"),
            "never_observed_sites": int((self.first_obs == NEVER_OBSERVED).sum()),
            "observed_cells": int(observed.sum()),
        }


class ModelParams(NamedTuple):
    """Constrained parameters of the spatial HMM (a jax-compatible pytree)."""

    mu1: float
    muS: float
    m: np.ndarray  # (S,), m[0] = 0, sums to 1 for S >= 2
    mu: np.ndarray  # (S,)
    lam: np.ndarray  # (N,), sums to 0
    sigma_lambda: float
    phi: np.ndarray  # (S, N), rows sum to 0
    sigma_phi: np.ndarray  # (S,)
    gamma: np.ndarray  # (12,), sums to 0
    rho: np.ndarray  # (S,)
    A: np.ndarray  # (S, S), rows are simplexes
    xi: np.ndarray  # (S,)
    beta: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return int(np.shape(self.mu)[0])

    @property
    def n_sites(self) -> int:
        return int(np.shape(self.lam)[0])


@dataclass(frozen=True)
class ModelFlags:
    """Structural switches selecting the main model or one of its simpler variants."""

    shared_sigma_phi: bool = False
    model_missingness: bool = True
    spatial_field: bool = True


@dataclass(frozen=True)
class StateTrajectory:
    """A hidden state path with one-based state labels."""

    states: np.ndarray
    kind: Literal["viterbi", "sampled", "modal", "true"] = "sampled"

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(np.asarray(self.states, dtype=np.int64)))

    @property
    def zero_based(self) -> np.ndarray:
        return self.states - 1


@dataclass
class PosteriorDraws:
    """
    Post-warmup output of the sampler.

    ``unconstrained`` has shape (n_chains, n_draws, dim). Warmup iterations are
    never stored here.
    """

    unconstrained: np.ndarray
    lp: np.ndarray
    divergent: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    step_size: np.ndarray  # (n_chains,)
    inv_metric: np.ndarray  # (n_chains, dim)
    names: Optional[List[str]] = None

    @property
    def n_chains(self) -> int:
        return int(self.unconstrained.shape[0])

    @property
    def n_draws(self) -> int:
        return int(self.unconstrained.shape[1])

    @property
    def dim(self) -> int:
        return int(self.unconstrained.shape[2])

    def divergences_per_chain(self) -> np.ndarray:
        return self.divergent.sum(axis=1)

    def adaptation_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "chain": np.arange(1, self.n_chains + 1),
            "step_size": self.step_size,
            "divergences": self.divergences_per_chain(),
            "mean_accept_stat": self.accept_stat.mean(axis=1),
            "mean_tree_depth": self.tree_depth.mean(axis=1),
        })


@dataclass(frozen=True)
class TrajectoryBundle:
    """M sampled state trajectories of equal length with values in 1..S."""

    states: np.ndarray  # (M, T)
    n_categories: int
    draw_index: Optional[np.ndarray] = None  # posterior draw behind each trajectory

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(np.atleast_2d(np.asarray(self.states, dtype=np.int64))))
        if self.draw_index is not None:
            object.__setattr__(self, "draw_index", _frozen(np.asarray(self.draw_index, dtype=np.int64)))

    @property
    def n_times(self) -> int:
        return int(self.states.shape[1])


@dataclass
class ChangepointFit:
    """Posterior summary of the two-regime left-to-right model."""

    emission: np.ndarray  # (2, S) posterior mean
    emission_lower: np.ndarray
    emission_upper: np.ndarray
    switch_prob: float
    switch_prob_interval: Tuple[float, float]
    changepoint_distribution: np.ndarray  # (T + 1,), index k <-> time k + 1; last = never switched
    map_changepoint: int  # one-based time
    interval: Tuple[int, int]
    degenerate: bool = False
    emission_draws: Optional[np.ndarray] = None
    q_draws: Optional[np.ndarray] = None

    def distribution_frame(self) -> pd.DataFrame:
        n = self.changepoint_distribution.shape[0]
        return pd.DataFrame({"time": np.arange(1, n + 1), "probability": self.changepoint_distribution})

    def emission_frame(self) -> pd.DataFrame:
        rows = []
        for regime, name in enumerate(("before", "after")):
            for s in range(self.emission.shape[1]):
                rows.append({
                    "regime": name,
                    "state": s + 1,
                    "mean": self.emission[regime, s],
                    "q2.5": self.emission_lower[regime, s],
                    "q97.5": self.emission_upper[regime, s],
                })
        return pd.DataFrame(rows)


@dataclass
class PredictiveSeries:
    """Posterior predictive summary of the nationwide proportion of ones."""

    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    observed: np.ndarray
    mc_se: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_frame(self, modal_states: Optional[np.ndarray] = None) -> pd.DataFrame:
        frame = pd.DataFrame({
            "time": np.arange(1, self.mean.shape[0] + 1),
            "observed": self.observed,
            "mean": self.mean,
            "q2.5": self.lower,
            "q97.5": self.upper,
        })
        if modal_states is not None:
            frame["modal_state"] = modal_states
        return frame
