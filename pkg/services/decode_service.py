"""
Hidden-state inference: forward-backward smoothing, Viterbi decoding and
forward-filter backward-sample draws.

The recursions work on arrays with an optional leading batch axis so a whole
set of posterior draws (or a bundle of change-point trajectories) is handled
in one pass.
"""

from typing import Dict, NamedTuple, Tuple

import numpy as np
from loguru import logger
from scipy.special import logsumexp, softmax

from models.domain import ModelFlags, ModelParams, ObservationPanel, StateTrajectory, TrajectoryBundle
from models.errors import MissingTrajectory
from models.schemas import RunConfig
from services.likelihood_service import emission_batch, emission_matrix
from services.parameter_transforms import posterior_mean_params


def _log(x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=np.float64))


def forward_log(omega: np.ndarray, log_rho: np.ndarray, log_A: np.ndarray) -> np.ndarray:
    """Log forward variables, shape (..., T, S)."""
    alpha = np.empty_like(omega)
    alpha[..., 0, :] = log_rho + omega[..., 0, :]
    for t in range(1, omega.shape[-2]):
        alpha[..., t, :] = logsumexp(alpha[..., t - 1, :, None] + log_A, axis=-2) + omega[..., t, :]
    return alpha


def backward_log(omega: np.ndarray, log_A: np.ndarray) -> np.ndarray:
    beta = np.zeros_like(omega)
    for t in range(omega.shape[-2] - 2, -1, -1):
        beta[..., t, :] = logsumexp(log_A + (omega[..., t + 1, :] + beta[..., t + 1, :])[..., None, :], axis=-1)
    return beta


def smoothed_from_emissions(omega: np.ndarray, rho: np.ndarray, A: np.ndarray) -> np.ndarray:
    """P(x_t = s | data) for emission log-probabilities ``omega``."""
    log_A = _log(A)
    log_post = forward_log(omega, _log(rho), log_A) + backward_log(omega, log_A)
    return softmax(log_post, axis=-1)


def _categorical(rng: np.random.Generator, log_weights: np.ndarray) -> np.ndarray:
    """One draw per row of (..., S) unnormalised log weights."""
    probs = softmax(log_weights, axis=-1)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.uniform(size=probs.shape[:-1]) * cdf[..., -1]
    return np.minimum((u[..., None] > cdf).sum(axis=-1), probs.shape[-1] - 1)


def ffbs_from_emissions(omega: np.ndarray, rho: np.ndarray, A: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Forward-filter backward-sample on a (K, T, S) batch.

    ``rho`` and ``A`` may be shared, shape (S,) and (S, S), or per batch item.
    Returns zero-based states, shape (K, T).
    """
    K, T, S = omega.shape
    log_A = np.broadcast_to(_log(A), (K, S, S))
    alpha = forward_log(omega, np.broadcast_to(_log(rho), (K, S)), log_A)
    states = np.empty((K, T), dtype=np.int64)
    states[:, -1] = _categorical(rng, alpha[:, -1, :])
    rows = np.arange(K)
    for t in range(T - 2, -1, -1):
        states[:, t] = _categorical(rng, alpha[:, t, :] + log_A[rows, :, states[:, t + 1]])
    return states


def viterbi_from_emissions(omega: np.ndarray, rho: np.ndarray, A: np.ndarray) -> Tuple[np.ndarray, float]:
    """Most probable zero-based path and its joint log-probability; ties go to the lower state."""
    T, S = omega.shape
    log_A = _log(A)
    delta = _log(rho) + omega[0]
    backpointer = np.zeros((T, S), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, None] + log_A
        backpointer[t] = np.argmax(scores, axis=0)
        delta = scores[backpointer[t], np.arange(S)] + omega[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = backpointer[t, path[t]]
    return path, float(delta[path[-1]])


def smoothed_marginals(panel: ObservationPanel, p: ModelParams, flags: ModelFlags = ModelFlags()) -> np.ndarray:
    """(T, S) matrix of smoothed state probabilities at fixed parameters."""
    return smoothed_from_emissions(emission_matrix(panel, p, flags), p.rho, p.A)


def viterbi(panel: ObservationPanel, p: ModelParams, flags: ModelFlags = ModelFlags()) -> StateTrajectory:
    path, _ = viterbi_from_emissions(emission_matrix(panel, p, flags), p.rho, p.A)
    return StateTrajectory(states=path + 1, kind="viterbi")


def sample_trajectory(panel: ObservationPanel, p: ModelParams, rng: np.random.Generator,
                      flags: ModelFlags = ModelFlags()) -> StateTrajectory:
    """Exact draw from P(x_1:T | data, params)."""
    omega = emission_matrix(panel, p, flags)[None]
    states = ffbs_from_emissions(omega, p.rho, p.A, rng)[0]
    return StateTrajectory(states=states + 1, kind="sampled")


def draw_marginals(draws: ModelParams, panel: ObservationPanel, flags: ModelFlags = ModelFlags()) -> np.ndarray:
    """(K, T, S) smoothed marginals for every constrained draw."""
    omega = emission_batch(panel, draws, flags)
    return smoothed_from_emissions(omega, np.asarray(draws.rho), np.asarray(draws.A))


def map_state_sequence(draws: ModelParams, panel: ObservationPanel,
                       flags: ModelFlags = ModelFlags(), chunk: int = 500) -> Tuple[StateTrajectory, np.ndarray, np.ndarray]:
    """
    Per-time modal state of the draw-averaged smoothed marginals.

    Args:
        draws: Constrained draws with a leading draw axis
        panel: Observation panel the draws were fitted to

    Returns:
        Modal trajectory (one-based), modal probabilities (T,), averaged marginals (T, S)
    """
    n_draws = int(np.shape(draws.mu)[0])
    total = 0.0
    for start in range(0, n_draws, chunk):
        part = ModelParams(*(np.asarray(v)[start:start + chunk] for v in draws))
        total = total + draw_marginals(part, panel, flags).sum(axis=0)
    marginals = total / n_draws
    modal = np.argmax(marginals, axis=1)
    modal_prob = marginals[np.arange(marginals.shape[0]), modal]
    logger.info(f"Decoded modal states over {panel.n_times} times; mean modal probability {modal_prob.mean():.3f}")
    return StateTrajectory(states=modal + 1, kind="modal"), modal_prob, marginals


def state_occupancy(modal_states: np.ndarray, n_states: int) -> np.ndarray:
    """Share of time points at which each state is modal."""
    states = np.asarray(modal_states, dtype=np.int64)
    return np.bincount(states - 1, minlength=n_states)[:n_states] / states.size


def modal_probability_summary(modal_prob: np.ndarray) -> Dict[str, float]:
    modal_prob = np.asarray(modal_prob)
    return {
        "mean": float(modal_prob.mean()),
        "min": float(modal_prob.min()),
        "max": float(modal_prob.max()),
        "share_below_0.7": float((modal_prob < 0.7).mean()),
        "count_below_0.5": int((modal_prob < 0.5).sum()),
    }


def sample_bundle(draws: ModelParams, panel: ObservationPanel, size: int, rng: np.random.Generator,
                  flags: ModelFlags = ModelFlags()) -> TrajectoryBundle:
    """
    One FFBS trajectory per selected draw.

    Draws are thinned evenly to ``size``; when ``size`` exceeds the number of
    draws they are reused in order, each with a fresh trajectory.
    """
    n_draws = int(np.shape(draws.mu)[0])
    if n_draws == 0:
        raise MissingTrajectory("No posterior draws to sample trajectories from")
    index = (np.arange(size) * n_draws) // size if size <= n_draws else np.arange(size) % n_draws
    selected = ModelParams(*(np.asarray(v)[index] for v in draws))
    omega = emission_batch(panel, selected, flags)
    states = ffbs_from_emissions(omega, np.asarray(selected.rho), np.asarray(selected.A), rng)
    n_states = int(np.shape(draws.mu)[1])
    logger.info(f"Sampled {size} state trajectories from {n_draws} draws")
    return TrajectoryBundle(states=states + 1, n_categories=n_states, draw_index=index)



class Decoding(NamedTuple):
    modal: StateTrajectory
    modal_prob: np.ndarray  # (T,)
    marginals: np.ndarray  # (T, S)
    viterbi_path: StateTrajectory
    bundle: TrajectoryBundle
    occupancy: np.ndarray  # (S,)
    summary: Dict[str, float]


class DecodeService:
    def decode(self, draws: ModelParams, panel: ObservationPanel, cfg: RunConfig) -> Decoding:
        """Modal states, the Viterbi path at the posterior mean and a sampled trajectory bundle."""
        modal, modal_prob, marginals = map_state_sequence(draws, panel, cfg.flags)
        path = viterbi(panel, posterior_mean_params(draws), cfg.flags)
        bundle = sample_bundle(draws, panel, cfg.bundle_size, np.random.default_rng([cfg.seed, 1]), cfg.flags)
        occupancy = state_occupancy(modal.states, cfg.n_states)
        summary = modal_probability_summary(modal_prob)
        logger.info(f"State occupancy {np.round(occupancy, 3).tolist()}; modal probability summary {summary}")
        return Decoding(modal, modal_prob, marginals, path, bundle, occupancy, summary)


# Global decode service instance
decode_service = DecodeService()
