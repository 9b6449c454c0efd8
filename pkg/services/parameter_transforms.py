"""
Parameter layout, constraining transforms and priors.

The sampler works on a flat unconstrained vector. ``ParamLayout`` maps the
vector's segments onto parameter blocks; ``constrain_jax`` is the traceable
bijection used inside the jit-compiled target and ``constrain`` is its
checked numpy-facing counterpart.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
import numpy as np
from jax.scipy.special import gammaln, log_ndtr
from jax.scipy.stats import norm
from scipy.special import logit

from models.domain import N_MONTHS, ModelFlags, ModelParams, NeighborhoodGraph, PosteriorDraws
from models.errors import (
    ConstraintViolation,
    InvariantViolation,
    LengthMismatch,
    NonFinite,
    OrderViolation,
)

MU1_PRIOR = (-4.5, 0.25)
MUS_PRIOR = (-1.75, 0.5)
M_CONCENTRATION = 5.0
MISSINGNESS_PRIOR_SD = 5.0


@dataclass(frozen=True)
class ParamLayout:
    """Segments of the unconstrained vector for S states, N sites and a set of model flags."""

    n_states: int
    n_sites: int
    flags: ModelFlags = ModelFlags()
    segments: Dict[str, Tuple[int, int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        S, N = self.n_states, self.n_sites
        sizes = [
            ("mu1", 1),
            ("mu_gap", 1 if S >= 2 else 0),
            ("m", max(S - 2, 0)),
            ("lam", N - 1),
            ("sigma_lambda", 1),
            ("phi", S * (N - 1) if self.flags.spatial_field else 0),
            ("sigma_phi", (1 if self.flags.shared_sigma_phi else S) if self.flags.spatial_field else 0),
            ("gamma", N_MONTHS - 1),
            ("rho", S - 1),
            ("A", S * (S - 1)),
            ("xi", S if self.flags.model_missingness else 0),
            ("beta", S if self.flags.model_missingness else 0),
        ]
        segments, offset = {}, 0
        for name, size in sizes:
            segments[name] = (offset, offset + size)
            offset += size
        object.__setattr__(self, "segments", segments)

    @property
    def dim(self) -> int:
        return self.segments["beta"][1]

    def block(self, u, name: str):
        start, stop = self.segments[name]
        return u[start:stop]

    @property
    def names(self) -> List[str]:
        """Names of the unconstrained coordinates."""
        names = []
        for name, (start, stop) in self.segments.items():
            names.extend(f"{name}__u[{k + 1}]" for k in range(stop - start))
        return names

    def constrained_names(self) -> List[str]:
        """Column names of the wide draw CSV (without ``lp__``)."""
        S, N = self.n_states, self.n_sites
        names = [f"mu[{s}]" for s in range(1, S + 1)]
        names += [f"lambda[{i}]" for i in range(1, N + 1)]
        names += [f"phi[{s}][{i}]" for s in range(1, S + 1) for i in range(1, N + 1)]
        names += [f"gamma[{k}]" for k in range(1, N_MONTHS + 1)]
        names += [f"rho[{s}]" for s in range(1, S + 1)]
        names += [f"A[{s}][{r}]" for s in range(1, S + 1) for r in range(1, S + 1)]
        names += ["sigma_lambda"]
        names += [f"sigma_phi[{s}]" for s in range(1, S + 1)]
        names += [f"xi[{s}]" for s in range(1, S + 1)]
        names += [f"beta[{s}]" for s in range(1, S + 1)]
        return names


# Elementary transforms (traceable)

def stick_breaking(y):
    """
    Map (..., K-1) unconstrained coordinates onto (..., K) simplexes.

    Returns the simplex and the log-Jacobian summed over the last axis.
    The offset log(K-k-1) sends y = 0 to the uniform simplex.
    """
    k_minus_1 = y.shape[-1]
    K = k_minus_1 + 1
    remaining = jnp.ones(y.shape[:-1])
    parts, log_jac = [], jnp.zeros(y.shape[:-1])
    for k in range(k_minus_1):
        z = jax.nn.sigmoid(y[..., k] - np.log(K - k - 1))
        x = remaining * z
        log_jac = log_jac + jnp.log(z) + jnp.log1p(-z) + jnp.log(remaining)
        parts.append(x)
        remaining = remaining - x
    parts.append(remaining)
    return jnp.stack(parts, axis=-1), log_jac


def stick_breaking_inverse(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    K = x.shape[-1]
    remaining = np.ones(x.shape[:-1])
    y = np.empty(x.shape[:-1] + (K - 1,))
    for k in range(K - 1):
        z = x[..., k] / remaining
        y[..., k] = logit(z) + np.log(K - k - 1)
        remaining = remaining - x[..., k]
    return y


def sum_to_zero(free):
    """Close (..., k-1) free coordinates into a (..., k) block with zero sum."""
    return jnp.concatenate([free, -jnp.sum(free, axis=-1, keepdims=True)], axis=-1)


def _state_means(mu1, muS, m):
    return mu1 + (muS - mu1) * jnp.cumsum(m)


def state_means(mu1: float, muS: float, m) -> np.ndarray:
    """
    Ordered state means mu_s = mu1 + (muS - mu1) * sum_{k <= s} m_k.

    Raises:
        OrderViolation: muS < mu1
        ConstraintViolation: m is not a simplex with m[0] = 0
    """
    m = np.asarray(m, dtype=np.float64)
    if muS < mu1:
        raise OrderViolation(f"muS={muS} is below mu1={mu1}")
    if m.ndim != 1 or m.size == 0 or abs(m[0]) > 1e-12 or np.any(m < 0):
        raise ConstraintViolation(f"Increment vector {m.tolist()} must be nonnegative with m[0] = 0")
    if m.size > 1 and abs(m.sum() - 1.0) > 1e-10:
        raise ConstraintViolation(f"Increment vector sums to {m.sum()}, expected 1")
    return np.asarray(_state_means(mu1, muS, m))


def constrain_jax(u, layout: ParamLayout):
    """Traceable constraining map: (ModelParams, log_jacobian)."""
    S, N, flags = layout.n_states, layout.n_sites, layout.flags
    log_jac = 0.0

    mu1 = layout.block(u, "mu1")[0]
    if S >= 2:
        gap = layout.block(u, "mu_gap")[0]
        muS = mu1 + jnp.exp(gap)
        log_jac += gap
        if S >= 3:
            tail, jac = stick_breaking(layout.block(u, "m"))
            log_jac += jac
        else:
            tail = jnp.ones(1)
        m = jnp.concatenate([jnp.zeros(1), tail])
    else:
        muS = mu1
        m = jnp.zeros(1)
    mu = _state_means(mu1, muS, m)

    lam = sum_to_zero(layout.block(u, "lam"))
    log_sigma_lambda = layout.block(u, "sigma_lambda")[0]
    sigma_lambda = jnp.exp(log_sigma_lambda)
    log_jac += log_sigma_lambda

    if flags.spatial_field:
        phi = sum_to_zero(layout.block(u, "phi").reshape(S, N - 1))
        log_sigma_phi = layout.block(u, "sigma_phi")
        log_jac += jnp.sum(log_sigma_phi)
        sigma_phi = jnp.broadcast_to(jnp.exp(log_sigma_phi), (S,))
    else:
        phi = jnp.zeros((S, N))
        sigma_phi = jnp.ones(S)

    gamma = sum_to_zero(layout.block(u, "gamma"))

    if S >= 2:
        rho, jac = stick_breaking(layout.block(u, "rho"))
        log_jac += jac
        A, jac = stick_breaking(layout.block(u, "A").reshape(S, S - 1))
        log_jac += jnp.sum(jac)
    else:
        rho = jnp.ones(1)
        A = jnp.ones((1, 1))

    if flags.model_missingness:
        xi = layout.block(u, "xi")
        beta = layout.block(u, "beta")
    else:
        xi = jnp.zeros(S)
        beta = jnp.zeros(S)

    params = ModelParams(
        mu1=mu1, muS=muS, m=m, mu=mu, lam=lam, sigma_lambda=sigma_lambda,
        phi=phi, sigma_phi=sigma_phi, gamma=gamma, rho=rho, A=A, xi=xi, beta=beta,
    )
    return params, log_jac


def _to_numpy(params: ModelParams) -> ModelParams:
    return ModelParams(*(np.asarray(value, dtype=np.float64) for value in params))


def constrain(u, layout: ParamLayout) -> Tuple[ModelParams, float]:
    """
    Map an unconstrained vector onto model parameters.

    Raises:
        LengthMismatch: Vector length differs from the layout
        NonFinite: Vector holds nan or inf
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (layout.dim,):
        raise LengthMismatch(f"Unconstrained vector has shape {u.shape}, layout expects ({layout.dim},)")
    if not np.all(np.isfinite(u)):
        bad = int(np.flatnonzero(~np.isfinite(u))[0])
        raise NonFinite(f"Unconstrained coordinate {layout.names[bad]} is {u[bad]}")
    params, log_jac = constrain_jax(jnp.asarray(u), layout)
    return _to_numpy(params), float(log_jac)


def unconstrain(p: ModelParams, layout: ParamLayout) -> np.ndarray:
    """Inverse of :func:`constrain`."""
    S, N, flags = layout.n_states, layout.n_sites, layout.flags
    blocks = [np.atleast_1d(np.float64(p.mu1))]
    if S >= 2:
        gap = float(p.muS) - float(p.mu1)
        if gap <= 0:
            raise OrderViolation(f"muS={p.muS} must exceed mu1={p.mu1}")
        blocks.append(np.array([np.log(gap)]))
        if S >= 3:
            blocks.append(stick_breaking_inverse(np.asarray(p.m)[1:]))
    blocks.append(np.asarray(p.lam)[:-1])
    blocks.append(np.array([np.log(p.sigma_lambda)]))
    if flags.spatial_field:
        blocks.append(np.asarray(p.phi)[:, :-1].ravel())
        sigma_phi = np.asarray(p.sigma_phi)
        blocks.append(np.log(sigma_phi[:1] if flags.shared_sigma_phi else sigma_phi))
    blocks.append(np.asarray(p.gamma)[:-1])
    if S >= 2:
        blocks.append(stick_breaking_inverse(p.rho))
        blocks.append(stick_breaking_inverse(p.A).ravel())
    if flags.model_missingness:
        blocks.append(np.asarray(p.xi))
        blocks.append(np.asarray(p.beta))
    u = np.concatenate([np.asarray(b, dtype=np.float64).ravel() for b in blocks])
    if u.shape != (layout.dim,):
        raise LengthMismatch(f"Parameters produce {u.size} coordinates, layout expects {layout.dim}")
    return u


# Priors

def _dirichlet_logpdf(x, alpha):
    return gammaln(jnp.sum(alpha, axis=-1)) - jnp.sum(gammaln(alpha), axis=-1) + jnp.sum((alpha - 1.0) * jnp.log(x), axis=-1)


def _half_normal_logpdf(x):
    return jnp.log(2.0) + norm.logpdf(x)


def transition_concentration(n_states: int) -> np.ndarray:
    """Dirichlet concentrations of the transition rows: 2S on the diagonal, 0.5 elsewhere."""
    return np.full((n_states, n_states), 0.5) + np.eye(n_states) * (2.0 * n_states - 0.5)


def prior_logdensity(p: ModelParams, flags: ModelFlags = ModelFlags()):
    """Traceable prior log-density, ICAR terms excluded."""
    S = p.mu.shape[0]
    lp = norm.logpdf(p.mu1, *MU1_PRIOR)
    if S >= 2:
        mean, sd = MUS_PRIOR
        lp += norm.logpdf(p.muS, mean, sd) - log_ndtr((mean - p.mu1) / sd)
        lp += _dirichlet_logpdf(p.m[1:], jnp.full(S - 1, M_CONCENTRATION))
        lp += _dirichlet_logpdf(p.rho, jnp.ones(S))
        lp += jnp.sum(_dirichlet_logpdf(p.A, jnp.asarray(transition_concentration(S))))

    lp += _half_normal_logpdf(p.sigma_lambda)
    lp += jnp.sum(norm.logpdf(p.lam, 0.0, p.sigma_lambda))

    if flags.spatial_field:
        sigma_phi = p.sigma_phi[:1] if flags.shared_sigma_phi else p.sigma_phi
        lp += jnp.sum(_half_normal_logpdf(sigma_phi))

    lp += jnp.sum(norm.logpdf(p.gamma))

    if flags.model_missingness:
        lp += jnp.sum(norm.logpdf(p.xi, 0.0, MISSINGNESS_PRIOR_SD))
        lp += jnp.sum(norm.logpdf(p.beta, 0.0, MISSINGNESS_PRIOR_SD))
    return lp


def check_invariants(p: ModelParams, flags: ModelFlags = ModelFlags(), tol: float = 1e-10):
    """
    Validate every structural constraint of a constrained parameter set.

    Raises:
        InvariantViolation: Names the first block that fails
    """
    mu = np.asarray(p.mu)
    if np.any(np.diff(mu) < -tol):
        raise InvariantViolation(f"State means are not nondecreasing: {mu.tolist()}")
    if abs(mu[0] - p.mu1) > tol or abs(mu[-1] - p.muS) > tol:
        raise InvariantViolation("State mean endpoints differ from mu1/muS")
    for name, block in (("lambda", p.lam), ("gamma", p.gamma)):
        if abs(float(np.sum(block))) > tol * max(1, np.size(block)):
            raise InvariantViolation(f"{name} sums to {float(np.sum(block))}, expected 0")
    row_sums = np.asarray(p.phi).sum(axis=1)
    if np.any(np.abs(row_sums) > tol * max(1, p.n_sites)):
        bad = int(np.argmax(np.abs(row_sums)))
        raise InvariantViolation(f"phi[{bad + 1}] sums to {row_sums[bad]}, expected 0")
    for name, simplex in (("rho", np.atleast_2d(p.rho)), ("A", np.asarray(p.A))):
        if np.any(simplex < 0) or np.any(np.abs(simplex.sum(axis=-1) - 1.0) > tol):
            raise InvariantViolation(f"{name} rows are not probability simplexes")
    if not p.sigma_lambda > 0 or np.any(np.asarray(p.sigma_phi) <= 0):
        raise InvariantViolation("Scale parameters must be strictly positive")
    for name, value in zip(ModelParams._fields, p):
        if not np.all(np.isfinite(value)):
            raise InvariantViolation(f"{name} holds non-finite values")


def log_prior(p: ModelParams, graph: Optional[NeighborhoodGraph] = None, flags: ModelFlags = ModelFlags()) -> float:
    """
    Prior log-density of a constrained parameter set.

    The ICAR terms for phi are added only when ``graph`` is given;
    ``log_posterior`` adds them itself.
    """
    check_invariants(p, flags)
    lp = float(prior_logdensity(ModelParams(*(jnp.asarray(v) for v in p)), flags))
    if graph is not None and flags.spatial_field:
        from services.likelihood_service import icar_logpdf

        lp += sum(icar_logpdf(p.phi[s], p.sigma_phi[s], graph) for s in range(p.n_states))
    return lp


# Draw handling

def constrain_batch(unconstrained: np.ndarray, layout: ParamLayout) -> ModelParams:
    """Constrain a (n, dim) stack of vectors; every field gains a leading axis."""
    params = jax.vmap(lambda u: constrain_jax(u, layout)[0])(jnp.asarray(unconstrained))
    return _to_numpy(params)


def constrained_draws(draws: PosteriorDraws, layout: ParamLayout) -> ModelParams:
    """All post-warmup draws constrained, chains concatenated in order."""
    return constrain_batch(draws.unconstrained.reshape(-1, draws.dim), layout)


def take_draw(batch: ModelParams, k: int) -> ModelParams:
    return ModelParams(*(np.asarray(value)[k] for value in batch))


def posterior_mean_params(batch: ModelParams) -> ModelParams:
    """Posterior mean of each block; m is recomputed so that mu stays consistent."""
    mean = ModelParams(*(np.asarray(value).mean(axis=0) for value in batch))
    mu = mean.mu
    S = mu.shape[0]
    if S >= 2:
        m = np.concatenate([[0.0], np.diff(mu) / (mu[-1] - mu[0])])
    else:
        m = np.zeros(1)
    return mean._replace(mu1=mu[0], muS=mu[-1], m=m)


def params_to_row(p: ModelParams) -> np.ndarray:
    """Flatten in the order of :meth:`ParamLayout.constrained_names`."""
    return np.concatenate([
        np.asarray(p.mu).ravel(),
        np.asarray(p.lam).ravel(),
        np.asarray(p.phi).ravel(),
        np.asarray(p.gamma).ravel(),
        np.asarray(p.rho).ravel(),
        np.asarray(p.A).ravel(),
        np.atleast_1d(p.sigma_lambda),
        np.asarray(p.sigma_phi).ravel(),
        np.asarray(p.xi).ravel(),
        np.asarray(p.beta).ravel(),
    ]).astype(np.float64)


def batch_to_rows(batch: ModelParams) -> np.ndarray:
    """Vectorised :func:`params_to_row` over a batch with a leading draw axis."""
    n = np.shape(batch.mu)[0]
    fields = (batch.mu, batch.lam, batch.phi, batch.gamma, batch.rho, batch.A,
              batch.sigma_lambda, batch.sigma_phi, batch.xi, batch.beta)
    return np.concatenate([np.asarray(f, dtype=np.float64).reshape(n, -1) for f in fields], axis=1)


def params_from_row(row: np.ndarray, n_states: int, n_sites: int) -> ModelParams:
    """Inverse of :func:`params_to_row`; m is recovered from the state means."""
    S, N = n_states, n_sites
    row = np.asarray(row, dtype=np.float64)
    sizes = [S, N, S * N, N_MONTHS, S, S * S, 1, S, S, S]
    if row.size != sum(sizes):
        raise LengthMismatch(f"Row has {row.size} values, expected {sum(sizes)} for S={S}, N={N}")
    parts = np.split(row, np.cumsum(sizes)[:-1])
    mu = parts[0]
    if S >= 2:
        span = mu[-1] - mu[0]
        m = np.concatenate([[0.0], np.diff(mu) / span]) if span > 0 else np.concatenate([[0.0], np.full(S - 1, 1.0 / (S - 1))])
    else:
        m = np.zeros(1)
    return ModelParams(
        mu1=mu[0], muS=mu[-1], m=m, mu=mu, lam=parts[1], sigma_lambda=float(parts[6][0]),
        phi=parts[2].reshape(S, N), sigma_phi=parts[7], gamma=parts[3], rho=parts[4],
        A=parts[5].reshape(S, S), xi=parts[8], beta=parts[9],
    )


def batch_from_rows(rows: np.ndarray, n_states: int, n_sites: int) -> ModelParams:
    """Vectorised :func:`params_from_row` over a (K, width) matrix of draw rows."""
    S, N = n_states, n_sites
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    sizes = [S, N, S * N, N_MONTHS, S, S * S, 1, S, S, S]
    if rows.shape[1] != sum(sizes):
        raise LengthMismatch(f"Rows have {rows.shape[1]} values, expected {sum(sizes)} for S={S}, N={N}")
    K = rows.shape[0]
    parts = np.split(rows, np.cumsum(sizes)[:-1], axis=1)
    mu = parts[0]
    if S >= 2:
        span = (mu[:, -1] - mu[:, 0])[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(span > 0, np.diff(mu, axis=1) / span, 1.0 / (S - 1))
        m = np.concatenate([np.zeros((K, 1)), m], axis=1)
    else:
        m = np.zeros((K, 1))
    return ModelParams(
        mu1=mu[:, 0], muS=mu[:, -1], m=m, mu=mu, lam=parts[1], sigma_lambda=parts[6][:, 0],
        phi=parts[2].reshape(K, S, N), sigma_phi=parts[7], gamma=parts[3], rho=parts[4],
        A=parts[5].reshape(K, S, S), xi=parts[8], beta=parts[9],
    )
