import itertools
import os
import sys

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from scipy.special import logsumexp  # noqa: E402

from models.domain import ModelFlags, ModelParams, ObservationPanel  # noqa: E402
from services.graph_service import build_graph, grid_graph, path_graph  # noqa: E402
from services.simulation_service import recovery_params, sample_prior_params  # noqa: E402


# Brute-force oracles (test code only)

def enumerate_paths(omega: np.ndarray, rho: np.ndarray, A: np.ndarray):
    """Every state path with its joint log-probability."""
    T, S = omega.shape
    with np.errstate(divide="ignore"):
        log_rho, log_A = np.log(rho), np.log(A)
    paths = np.array(list(itertools.product(range(S), repeat=T)), dtype=np.int64)
    logp = log_rho[paths[:, 0]] + omega[np.arange(T), paths].sum(axis=1)
    if T > 1:
        logp = logp + log_A[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return paths, logp


def enumerate_loglik(omega, rho, A) -> float:
    _, logp = enumerate_paths(omega, rho, A)
    return float(logsumexp(logp))


def enumerate_marginals(omega, rho, A) -> np.ndarray:
    paths, logp = enumerate_paths(omega, rho, A)
    weights = np.exp(logp - logsumexp(logp))
    T, S = omega.shape
    marginals = np.zeros((T, S))
    for t in range(T):
        np.add.at(marginals[t], paths[:, t], weights)
    return marginals


def direct_emissions(panel: ObservationPanel, p: ModelParams, model_missingness: bool = True) -> np.ndarray:
    """Cell-by-cell loop over the emission definition."""
    T, S, N = panel.n_times, p.n_states, panel.n_sites
    omega = np.zeros((T, S))
    tprime = panel.scaled_time
    for t in range(T):
        for s in range(S):
            total = 0.0
            for i in range(N):
                if panel.first_obs[i] < 0 or t < panel.first_obs[i]:
                    continue
                if not np.isnan(panel.y[i, t]):
                    eta = p.mu[s] + p.lam[i] + p.phi[s, i] + p.gamma[panel.month_of[t] - 1]
                    prob = 1.0 / (1.0 + np.exp(-eta))
                    total += np.log(prob if panel.y[i, t] == 1 else 1.0 - prob)
                if model_missingness and not panel.r_excluded[i, t]:
                    zeta = p.xi[s] + p.beta[s] * tprime[t]
                    q = 1.0 / (1.0 + np.exp(-zeta))
                    total += np.log(q if panel.r[i, t] == 1 else 1.0 - q)
            omega[t, s] = total
    return omega


def random_panel(n_sites: int, n_times: int, rng: np.random.Generator, missing: float = 0.3,
                 start_month: int = 1) -> ObservationPanel:
    y = (rng.uniform(size=(n_sites, n_times)) < 0.4).astype(np.float64)
    y[rng.uniform(size=y.shape) < missing] = np.nan
    return ObservationPanel.from_outcomes(y, start_month=start_month)


def random_connected_graph(n_sites: int, rng: np.random.Generator, extra: int = 3):
    """Random spanning tree plus a few extra edges."""
    edges = set()
    order = rng.permutation(n_sites)
    for k in range(1, n_sites):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    for _ in range(extra):
        a, b = rng.choice(n_sites, size=2, replace=False)
        edges.add((int(min(a, b)), int(max(a, b))))
    return build_graph(n_sites, sorted(edges))


def random_params(n_states: int, graph, rng: np.random.Generator, flags: ModelFlags = ModelFlags()) -> ModelParams:
    """Prior draw with the missingness coefficients pulled toward moderate values."""
    p = sample_prior_params(n_states, graph, rng, flags)
    if flags.model_missingness:
        p = p._replace(xi=rng.normal(0.0, 1.0, n_states), beta=rng.normal(0.0, 1.0, n_states))
    return p


def zero_params(n_states: int, n_sites: int) -> ModelParams:
    """Every predictor at zero with uniform initial and transition probabilities."""
    S, N = n_states, n_sites
    m = np.zeros(1) if S == 1 else np.r_[0.0, np.full(S - 1, 1.0 / (S - 1))]
    return ModelParams(mu1=0.0, muS=0.0, m=m, mu=np.zeros(S), lam=np.zeros(N), sigma_lambda=1.0,
                       phi=np.zeros((S, N)), sigma_phi=np.ones(S), gamma=np.zeros(12), rho=np.full(S, 1.0 / S),
                       A=np.full((S, S), 1.0 / S), xi=np.zeros(S), beta=np.zeros(S))


def stack_params(*params: ModelParams) -> ModelParams:
    """Batch single parameter sets along a leading draw axis."""
    return ModelParams(*(np.stack([np.asarray(getattr(p, name), dtype=np.float64) for p in params])
                         for name in ModelParams._fields))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_graph():
    return path_graph(4)


@pytest.fixture
def grid_3x2():
    return grid_graph(3, 2)


@pytest.fixture
def toy_params(grid_3x2):
    return recovery_params(3, grid_3x2, np.random.default_rng(7))


@pytest.fixture
def toy_panel(rng):
    return random_panel(6, 10, rng)
