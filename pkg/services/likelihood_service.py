"""
Emission terms, forward recursion and the log posterior.

Everything that feeds the sampler is written against ``jax.numpy`` in
float64 so one implementation serves both the eager numpy-facing operations
and the jit-compiled ``PosteriorTarget``.
"""

from functools import partial
from typing import NamedTuple, Tuple

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp
from loguru import logger

from models.domain import ModelFlags, ModelParams, NeighborhoodGraph, ObservationPanel
from models.errors import ConstraintViolation, IndexOutOfRange, LengthMismatch, NonFinite
from services.graph_service import quadratic_form
from services.parameter_transforms import ParamLayout, constrain_jax, prior_logdensity


class PanelArrays(NamedTuple):
    """Dense float arrays derived once per panel."""

    y: np.ndarray  # (N, T), 0 where missing
    y_mask: np.ndarray  # (N, T), 1 where y enters the likelihood
    r_ones: np.ndarray  # (T,), number of counted cells with r = 1
    r_count: np.ndarray  # (T,), number of counted cells
    month: np.ndarray  # (T,), zero-based month index
    tprime: np.ndarray  # (T,)

    @classmethod
    def from_panel(cls, panel: ObservationPanel) -> "PanelArrays":
        observed = panel.observed & panel.active
        r_mask = panel.r_mask.astype(np.float64)
        return cls(
            y=np.where(observed, np.nan_to_num(panel.y), 0.0),
            y_mask=observed.astype(np.float64),
            r_ones=(r_mask * panel.r).sum(axis=0),
            r_count=r_mask.sum(axis=0),
            month=panel.month_of - 1,
            tprime=panel.scaled_time.astype(np.float64),
        )


def _emissions(arrays: PanelArrays, p: ModelParams, model_missingness: bool = True):
    """omega[t, s]: joint log-probability of time-t data under state s."""
    base = p.mu[:, None] + p.lam[None, :] + p.phi  # (S, N)
    eta = base[:, :, None] + p.gamma[arrays.month][None, None, :]  # (S, N, T)
    y_term = jnp.sum(arrays.y_mask * (arrays.y * eta - jax.nn.softplus(eta)), axis=1)  # (S, T)
    if model_missingness:
        zeta = p.xi[:, None] + p.beta[:, None] * arrays.tprime[None, :]
        y_term = y_term + zeta * arrays.r_ones - jax.nn.softplus(zeta) * arrays.r_count
    return y_term.T


def _forward(log_rho, log_A, omega):
    def step(alpha, omega_t):
        alpha = logsumexp(alpha[:, None] + log_A, axis=0) + omega_t
        return alpha, None

    alpha, _ = jax.lax.scan(step, log_rho + omega[0], omega[1:])
    return logsumexp(alpha)


def _icar(phi, sigma_phi, edges, n_sites):
    if edges.shape[0] == 0:
        quad = jnp.zeros(phi.shape[0])
    else:
        diff = phi[:, edges[:, 0]] - phi[:, edges[:, 1]]
        quad = jnp.sum(diff * diff, axis=1)
    return jnp.sum(-(n_sites - 1) * jnp.log(sigma_phi) - quad / (2.0 * sigma_phi ** 2))


def _log_posterior(arrays: PanelArrays, p: ModelParams, edges, flags: ModelFlags):
    omega = _emissions(arrays, p, flags.model_missingness)
    lp = _forward(jnp.log(p.rho), jnp.log(p.A), omega)
    if flags.spatial_field:
        lp = lp + _icar(p.phi, p.sigma_phi, edges, p.lam.shape[0])
    return lp + prior_logdensity(p, flags)


def _as_jax(p: ModelParams) -> ModelParams:
    return ModelParams(*(jnp.asarray(value, dtype=jnp.float64) for value in p))


def _check_dimensions(panel: ObservationPanel, p: ModelParams):
    if p.n_sites != panel.n_sites:
        raise LengthMismatch(f"Parameters cover {p.n_sites} sites, panel has {panel.n_sites}")


def emission_matrix(panel: ObservationPanel, p: ModelParams, flags: ModelFlags = ModelFlags()) -> np.ndarray:
    """(T, S) matrix of emission log-probabilities."""
    _check_dimensions(panel, p)
    return np.asarray(_emissions(PanelArrays.from_panel(panel), _as_jax(p), flags.model_missingness))


@partial(jax.jit, static_argnums=2)
def _emissions_batched(arrays: PanelArrays, batch: ModelParams, model_missingness: bool):
    return jax.vmap(lambda p: _emissions(arrays, p, model_missingness))(batch)


def emission_batch(panel: ObservationPanel, batch: ModelParams, flags: ModelFlags = ModelFlags()) -> np.ndarray:
    """(K, T, S) emission matrices for a batch of K constrained draws, evaluated in chunks."""
    n_draws = int(np.shape(batch.mu)[0])
    n_states = int(np.shape(batch.mu)[1])
    if int(np.shape(batch.lam)[1]) != panel.n_sites:
        raise LengthMismatch(f"Draws cover {np.shape(batch.lam)[1]} sites, panel has {panel.n_sites}")
    arrays = PanelArrays(*(jnp.asarray(a) for a in PanelArrays.from_panel(panel)))
    chunk = max(1, int(2e7 // (n_states * panel.n_sites * panel.n_times)))
    out = np.empty((n_draws, panel.n_times, n_states))
    for start in range(0, n_draws, chunk):
        part = ModelParams(*(jnp.asarray(np.asarray(v)[start:start + chunk]) for v in batch))
        out[start:start + chunk] = np.asarray(_emissions_batched(arrays, part, flags.model_missingness))
    return out


def emission_logprob(panel: ObservationPanel, p: ModelParams, t: int, s: int, flags: ModelFlags = ModelFlags()) -> float:
    """Emission log-probability of time ``t`` under state ``s`` (both zero-based)."""
    if not 0 <= t < panel.n_times:
        raise IndexOutOfRange(f"Time index {t} outside [0, {panel.n_times})")
    if not 0 <= s < p.n_states:
        raise IndexOutOfRange(f"State index {s} outside [0, {p.n_states})")
    return float(emission_matrix(panel, p, flags)[t, s])


def forward_loglik(panel: ObservationPanel, p: ModelParams, flags: ModelFlags = ModelFlags()) -> float:
    """log p(y, r | params) by the log-space forward recursion."""
    omega = emission_matrix(panel, p, flags)
    with np.errstate(divide="ignore"):
        log_rho, log_A = np.log(p.rho), np.log(p.A)
    return float(_forward(jnp.asarray(log_rho), jnp.asarray(log_A), jnp.asarray(omega)))


def forward_loglik_scaled(panel: ObservationPanel, p: ModelParams, flags: ModelFlags = ModelFlags()) -> float:
    """Forward recursion on normalised probabilities; cross-check of :func:`forward_loglik`."""
    omega = emission_matrix(panel, p, flags)
    shift = omega.max(axis=1)
    likelihood = np.exp(omega - shift[:, None])
    A = np.asarray(p.A)
    alpha = np.asarray(p.rho) * likelihood[0]
    total = 0.0
    for t in range(omega.shape[0]):
        if t > 0:
            alpha = (alpha @ A) * likelihood[t]
        scale = alpha.sum()
        total += np.log(scale) + shift[t]
        alpha = alpha / scale
    return float(total)


def icar_logpdf(phi_row, sigma: float, graph: NeighborhoodGraph) -> float:
    """
    Improper ICAR log-density on the sum-to-zero subspace, up to a graph constant.

    Raises:
        ConstraintViolation: phi_row does not sum to zero or sigma is not positive
    """
    phi_row = np.asarray(phi_row, dtype=np.float64)
    if phi_row.shape != (graph.n_sites,):
        raise LengthMismatch(f"phi has shape {phi_row.shape}, expected ({graph.n_sites},)")
    total = float(phi_row.sum())
    if abs(total) > 1e-10 * max(1.0, graph.n_sites):
        raise ConstraintViolation(f"Spatial field sums to {total}, expected 0")
    if not sigma > 0:
        raise ConstraintViolation(f"ICAR scale must be positive, got {sigma}")
    return float(-(graph.n_sites - 1) * np.log(sigma) - quadratic_form(graph, phi_row) / (2.0 * sigma ** 2))


def log_posterior(
    panel: ObservationPanel, p: ModelParams, graph: NeighborhoodGraph, flags: ModelFlags = ModelFlags()
) -> float:
    """Forward log-likelihood plus ICAR terms plus priors (no Jacobian)."""
    _check_dimensions(panel, p)
    value = _log_posterior(PanelArrays.from_panel(panel), _as_jax(p), jnp.asarray(graph.edges), flags)
    return float(value)


class PosteriorTarget:
    """
    Log density and gradient on the unconstrained space for one panel and graph.

    Compiled once; the compiled functions are safe to call from several
    sampler threads.
    """

    def __init__(self, panel: ObservationPanel, graph: NeighborhoodGraph, layout: ParamLayout):
        if graph.n_sites != panel.n_sites:
            raise LengthMismatch(f"Graph has {graph.n_sites} sites, panel has {panel.n_sites}")
        self.layout = layout
        self.dim = layout.dim
        arrays = PanelArrays(*(jnp.asarray(a) for a in PanelArrays.from_panel(panel)))
        edges = jnp.asarray(graph.edges)
        flags = layout.flags

        def log_density(u):
            params, log_jac = constrain_jax(u, layout)
            return _log_posterior(arrays, params, edges, flags) + log_jac

        self._log_density = jax.jit(log_density)
        self._value_and_grad = jax.jit(jax.value_and_grad(log_density))
        logger.debug(f"Compiled posterior target: dim={layout.dim}, N={panel.n_sites}, T={panel.n_times}")

    def log_density(self, u) -> float:
        return float(self._log_density(jnp.asarray(u, dtype=jnp.float64)))

    def __call__(self, u) -> Tuple[float, np.ndarray]:
        value, grad = self._value_and_grad(jnp.asarray(u, dtype=jnp.float64))
        return float(value), np.asarray(grad)

    def gradient(self, u) -> np.ndarray:
        return self(u)[1]


def grad_log_posterior(panel: ObservationPanel, u, graph: NeighborhoodGraph, layout: ParamLayout) -> np.ndarray:
    """
    Gradient of the unconstrained log density (log posterior plus log-Jacobian).

    Raises:
        NonFinite: Input or gradient holds nan or inf
    """
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise NonFinite("Unconstrained vector holds non-finite values")
    grad = PosteriorTarget(panel, graph, layout).gradient(u)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NonFinite(f"Gradient is non-finite at coordinate {layout.names[bad]}")
    return grad


class LikelihoodService:
    """Posterior targets and likelihood evaluations for the engine's model variants."""

    def target(self, panel: ObservationPanel, graph: NeighborhoodGraph, n_states: int,
               flags: ModelFlags = ModelFlags()) -> PosteriorTarget:
        layout = ParamLayout(n_states=n_states, n_sites=panel.n_sites, flags=flags)
        return PosteriorTarget(panel, graph, layout)

    def loglik(self, panel: ObservationPanel, p: ModelParams, flags: ModelFlags = ModelFlags()) -> float:
        value = forward_loglik(panel, p, flags)
        if not np.isfinite(value):
            raise NonFinite(f"Log-likelihood is {value} for S={p.n_states}")
        return value

    def posterior(self, panel: ObservationPanel, p: ModelParams, graph: NeighborhoodGraph,
                  flags: ModelFlags = ModelFlags()) -> float:
        return log_posterior(panel, p, graph, flags)


# Global likelihood service instance
likelihood_service = LikelihoodService()
