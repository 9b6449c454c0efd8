"""
Synthetic panels from the full generative model.
"""

from typing import NamedTuple, Optional

import numpy as np
from loguru import logger
from pydantic import ValidationError
from scipy.stats import halfnorm, truncnorm

from models.domain import N_MONTHS, ModelFlags, ModelParams, NeighborhoodGraph, ObservationPanel, StateTrajectory
from models.errors import ConfigError, EngineError, InvalidScenario
from models.schemas import RunConfig, SimulationScenario
from services.graph_service import build_graph, graph_service, grid_graph, laplacian_dense, path_graph
from services.parameter_transforms import (
    M_CONCENTRATION,
    MISSINGNESS_PRIOR_SD,
    MU1_PRIOR,
    MUS_PRIOR,
    check_invariants,
    transition_concentration,
)
from utils.helpers import invlogit


class SimulationResult(NamedTuple):
    panel: ObservationPanel
    trajectory: StateTrajectory
    params: ModelParams
    graph: NeighborhoodGraph


def sample_icar_field(graph: NeighborhoodGraph, sigma: float, rng: np.random.Generator,
                      size: Optional[int] = None) -> np.ndarray:
    """
    Draw from N(0, sigma^2 (D - W)^+) on the sum-to-zero subspace.

    Uses a dense eigendecomposition of D - W; ``size`` draws several fields at once.
    """
    n = graph.n_sites
    shape = (n,) if size is None else (size, n)
    if sigma == 0 or n == 1:
        return np.zeros(shape)
    eigenvalues, eigenvectors = np.linalg.eigh(laplacian_dense(graph))
    # the smallest eigenvalue belongs to the constant vector
    scales = sigma / np.sqrt(eigenvalues[1:])
    z = rng.standard_normal(shape[:-1] + (n - 1,))
    field = (z * scales) @ eigenvectors[:, 1:].T
    return field - field.mean(axis=-1, keepdims=True)


def _center(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=-1, keepdims=True)


def _state_increments(mu: np.ndarray) -> np.ndarray:
    if mu.size == 1:
        return np.zeros(1)
    return np.concatenate([[0.0], np.diff(mu) / (mu[-1] - mu[0])])


def sample_prior_params(n_states: int, graph: NeighborhoodGraph, rng: np.random.Generator,
                        flags: ModelFlags = ModelFlags()) -> ModelParams:
    """Draw one complete parameter set from the priors."""
    S, N = n_states, graph.n_sites
    mu1 = rng.normal(*MU1_PRIOR)
    if S >= 2:
        mean, sd = MUS_PRIOR
        muS = float(truncnorm.rvs((mu1 - mean) / sd, np.inf, loc=mean, scale=sd, random_state=rng))
        m = np.concatenate([[0.0], rng.dirichlet(np.full(S - 1, M_CONCENTRATION))])
        rho = rng.dirichlet(np.ones(S))
        A = np.stack([rng.dirichlet(row) for row in transition_concentration(S)])
    else:
        muS, m, rho, A = mu1, np.zeros(1), np.ones(1), np.ones((1, 1))
    mu = mu1 + (muS - mu1) * np.cumsum(m)

    sigma_lambda = float(halfnorm.rvs(random_state=rng))
    lam = _center(rng.normal(0.0, sigma_lambda, N))
    if flags.spatial_field:
        n_scales = 1 if flags.shared_sigma_phi else S
        sigma_phi = np.broadcast_to(halfnorm.rvs(size=n_scales, random_state=rng), (S,)).copy()
        phi = np.stack([sample_icar_field(graph, sigma_phi[s], rng) for s in range(S)])
    else:
        sigma_phi, phi = np.ones(S), np.zeros((S, N))
    gamma = _center(rng.normal(size=N_MONTHS))
    if flags.model_missingness:
        xi = rng.normal(0.0, MISSINGNESS_PRIOR_SD, S)
        beta = rng.normal(0.0, MISSINGNESS_PRIOR_SD, S)
    else:
        xi, beta = np.zeros(S), np.zeros(S)
    return ModelParams(mu1=mu1, muS=muS, m=m, mu=mu, lam=lam, sigma_lambda=sigma_lambda, phi=phi,
                       sigma_phi=sigma_phi, gamma=gamma, rho=rho, A=A, xi=xi, beta=beta)


def recovery_params(
    n_states: int,
    graph: NeighborhoodGraph,
    rng: np.random.Generator,
    flags: ModelFlags = ModelFlags(),
    mu: Optional[np.ndarray] = None,
    self_transition: float = 0.9,
    sigma_lambda: float = 0.5,
    sigma_phi: float = 0.5,
    seasonal_amplitude: float = 0.5,
    xi: Optional[np.ndarray] = None,
    beta: Optional[np.ndarray] = None,
) -> ModelParams:
    """
    Well-separated parameters for recovery experiments.

    Defaults: means evenly spaced on [-4, -1], sticky transitions, a seasonal
    cosine peaking in May and missingness falling over time.
    """
    S, N = n_states, graph.n_sites
    mu = np.linspace(-4.0, -1.0, S) if mu is None else np.asarray(mu, dtype=np.float64)
    if mu.shape != (S,) or np.any(np.diff(mu) <= 0):
        raise InvalidScenario(f"State means {mu.tolist()} must be {S} strictly increasing values")
    if S >= 2:
        A = np.full((S, S), (1.0 - self_transition) / (S - 1))
        np.fill_diagonal(A, self_transition)
    else:
        A = np.ones((1, 1))
    lam = _center(rng.normal(0.0, sigma_lambda, N))
    if flags.spatial_field:
        sigma_phi_vec = np.full(S, sigma_phi)
        phi = np.stack([sample_icar_field(graph, sigma_phi, rng) for _ in range(S)])
    else:
        sigma_phi_vec, phi = np.ones(S), np.zeros((S, N))
    months = np.arange(1, N_MONTHS + 1)
    gamma = _center(seasonal_amplitude * np.cos(2.0 * np.pi * (months - 5) / N_MONTHS))
    if flags.model_missingness:
        xi = np.linspace(0.5, -1.5, S) if xi is None else np.asarray(xi, dtype=np.float64)
        beta = np.full(S, -1.0) if beta is None else np.asarray(beta, dtype=np.float64)
    else:
        xi, beta = np.zeros(S), np.zeros(S)
    return ModelParams(mu1=mu[0], muS=mu[-1], m=_state_increments(mu), mu=mu, lam=lam, sigma_lambda=sigma_lambda,
                       phi=phi, sigma_phi=sigma_phi_vec, gamma=gamma, rho=np.full(S, 1.0 / S), A=A, xi=xi, beta=beta)


def build_scenario_graph(scn: SimulationScenario) -> NeighborhoodGraph:
    try:
        if scn.graph == "path":
            return path_graph(scn.n_sites)
        if scn.graph == "grid":
            return grid_graph(*scn.grid_shape)
        return build_graph(scn.n_sites, scn.edges)
    except EngineError as e:
        raise InvalidScenario(f"Scenario graph is invalid: {e}")


def sample_states(params: ModelParams, n_times: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-based Markov chain x_1 ~ rho, x_t ~ A[x_{t-1}]."""
    S = params.n_states
    cumulative = np.cumsum(np.asarray(params.A), axis=1)
    states = np.empty(n_times, dtype=np.int64)
    states[0] = rng.choice(S, p=np.asarray(params.rho))
    u = rng.uniform(size=n_times)
    for t in range(1, n_times):
        states[t] = min(int(np.searchsorted(cumulative[states[t - 1]], u[t] * cumulative[states[t - 1], -1])), S - 1)
    return states


def simulate_panel(scn: SimulationScenario, params: Optional[ModelParams] = None,
                   graph: Optional[NeighborhoodGraph] = None) -> SimulationResult:
    """
    Simulate states, missingness and outcomes for one scenario.

    Args:
        scn: Scenario settings
        params: True parameters; drawn from the recovery defaults when omitted
        graph: Graph to use instead of the one described by the scenario

    Returns:
        Panel, true trajectory, true parameters and graph

    Raises:
        InvalidScenario: Inconsistent dimensions, parameters or blackout starts
    """
    rng = np.random.default_rng(scn.seed)
    graph = graph or build_scenario_graph(scn)
    if graph.n_sites != scn.n_sites:
        raise InvalidScenario(f"Graph has {graph.n_sites} sites, scenario asks for {scn.n_sites}")
    flags = scn.flags
    if params is None:
        params = recovery_params(scn.n_states, graph, rng, flags)
    if params.n_states != scn.n_states or params.n_sites != scn.n_sites:
        raise InvalidScenario(
            f"Parameters have S={params.n_states}, N={params.n_sites}; scenario has S={scn.n_states}, N={scn.n_sites}"
        )
    try:
        check_invariants(params, flags)
    except EngineError as e:
        raise InvalidScenario(f"True parameters are invalid: {e}")

    if scn.blackout_max >= scn.n_times:
        raise InvalidScenario(f"blackout_max={scn.blackout_max} leaves no observable time in {scn.n_times}")
    if scn.blackout is not None:
        starts = np.asarray(scn.blackout, dtype=np.int64)
    elif scn.blackout_max > 0:
        starts = rng.integers(0, scn.blackout_max + 1, size=scn.n_sites)
    else:
        starts = np.zeros(scn.n_sites, dtype=np.int64)
    if np.any(starts < 0) or np.any(starts >= scn.n_times):
        raise InvalidScenario(f"Blackout starts must lie in [0, {scn.n_times})")

    states = sample_states(params, scn.n_times, rng)
    month = (scn.start_month - 1 + np.arange(scn.n_times)) % N_MONTHS
    tprime = np.arange(scn.n_times) / (scn.n_times - 1)

    eta = (np.asarray(params.mu)[states][None, :] + np.asarray(params.lam)[:, None]
           + np.asarray(params.phi)[states].T + np.asarray(params.gamma)[month][None, :])
    if scn.missingness == "state":
        miss_prob = invlogit(np.asarray(params.xi)[states] + np.asarray(params.beta)[states] * tprime)
        r = rng.uniform(size=eta.shape) < miss_prob[None, :]
    else:
        r = np.zeros(eta.shape, dtype=bool)
    y = (rng.uniform(size=eta.shape) < invlogit(eta)).astype(np.float64)

    blackout = np.arange(scn.n_times)[None, :] < starts[:, None]
    y[r | blackout] = np.nan
    panel = ObservationPanel.from_outcomes(y, start_month=scn.start_month)
    report = panel.missingness_report()
    logger.info(
        f"Simulated panel {scn.n_sites}x{scn.n_times}, S={scn.n_states}: "
        f"missing {report['overall_missing']:.3f}, after first observation {report['post_first_missing']:.3f}"
    )
    return SimulationResult(panel=panel, trajectory=StateTrajectory(states=states + 1, kind="true"),
                            params=params, graph=graph)


class SimulationService:
    def scenario(self, cfg: RunConfig) -> SimulationScenario:
        """
        Translate the ``sim_*`` keys of a run configuration into a scenario.

        Raises:
            ConfigError: Dimensions or a custom edge list are missing
            InvalidScenario: The scenario fails validation
        """
        if cfg.n_times is None:
            raise ConfigError("n_times must be set to simulate", code="MISSING_VALUE")
        n_sites = cfg.n_sites
        if n_sites is None:
            if cfg.sim_graph != "grid":
                raise ConfigError("n_sites must be set for a path or custom graph", code="MISSING_VALUE")
            n_sites = cfg.sim_grid_rows * cfg.sim_grid_cols

        edges = None
        if cfg.sim_graph == "custom":
            if not cfg.edges_path:
                raise ConfigError("sim_graph=custom needs edges_path", code="MISSING_PATH")
            edges = [tuple(edge) for edge in graph_service.load(cfg.edges_path, n_sites, cfg.index_base).edges.tolist()]
        try:
            return SimulationScenario(
                n_states=cfg.n_states,
                n_sites=n_sites,
                n_times=cfg.n_times,
                graph=cfg.sim_graph,
                edges=edges,
                grid_shape=(cfg.sim_grid_rows, cfg.sim_grid_cols) if cfg.sim_graph == "grid" else None,
                missingness=cfg.sim_missingness,
                blackout_max=cfg.sim_blackout_max,
                start_month=cfg.start_month,
                shared_sigma_phi=cfg.shared_sigma_phi,
                spatial_field=cfg.spatial_field,
                seed=cfg.seed,
            )
        except ValidationError as e:
            raise InvalidScenario(f"Invalid simulation scenario: {e.errors()[0]['msg']}")

    def simulate(self, cfg: RunConfig) -> SimulationResult:
        """Simulate the configured scenario with recovery or prior-drawn parameters."""
        scn = self.scenario(cfg)
        graph = build_scenario_graph(scn)
        params = None
        if cfg.sim_params == "prior":
            params = sample_prior_params(cfg.n_states, graph, np.random.default_rng(cfg.seed + 1), scn.flags)
        return simulate_panel(scn, params=params, graph=graph)


# Global simulation service instance
simulation_service = SimulationService()
