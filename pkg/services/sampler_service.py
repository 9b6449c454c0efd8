"""
Multinomial No-U-Turn sampler with windowed warm-up adaptation.

Warm-up follows the usual three-phase schedule: an initial fast window
adapting only the step size, a sequence of doubling slow windows that also
estimate a diagonal inverse metric, and a terminal fast window. The step size
is tuned by dual averaging toward ``target_acceptance`` and frozen afterwards.
Chains run in a thread pool with independent generators spawned from the seed.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.optimize import minimize

from config.settings import settings
from models.domain import PosteriorDraws
from models.errors import InitializationFailure, NumericalError
from models.schemas import SamplerConfig
from utils.helpers import child_rngs, generate_run_id
from utils.progress import add_active_run, emit_sampling_progress, remove_active_run
from utils.retry_helpers import NonFiniteCandidate, exponential_backoff_sync

LogDensity = Callable[[np.ndarray], Tuple[float, np.ndarray]]

INIT_BUFFER = 75
TERM_BUFFER = 50
BASE_WINDOW = 25


class DualAveraging:
    """Step-size adaptation by dual averaging (gamma=0.05, t0=10, kappa=0.75)."""

    def __init__(self, target: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(1.0)

    def restart(self, step_size: float):
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.mu = np.log(10.0 * step_size)

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return float(np.exp(x))

    def final_step_size(self) -> float:
        return float(np.exp(self.x_bar))


def warmup_windows(n_warmup: int) -> List[Tuple[int, int]]:
    """Slow adaptation windows as [start, end) iteration ranges."""
    init_buffer, term_buffer, base_window = INIT_BUFFER, TERM_BUFFER, BASE_WINDOW
    if init_buffer + term_buffer + base_window > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    last = n_warmup - term_buffer
    windows, start, size = [], init_buffer, base_window
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


def regularized_variance(samples: np.ndarray) -> np.ndarray:
    n = samples.shape[0]
    variance = samples.var(axis=0, ddof=1) if n > 1 else np.ones(samples.shape[1])
    return (n / (n + 5.0)) * variance + 1e-3 * (5.0 / (n + 5.0))


@dataclass
class _Point:
    q: np.ndarray
    p: np.ndarray
    lp: float
    grad: np.ndarray


@dataclass
class _Subtree:
    valid: bool
    proposal: Optional[_Point]
    p_sharp_beg: np.ndarray
    p_sharp_end: np.ndarray
    p_beg: np.ndarray
    p_end: np.ndarray
    rho: np.ndarray
    log_sum_weight: float


def _criterion(p_sharp_minus, p_sharp_plus, rho) -> bool:
    return float(p_sharp_plus @ rho) > 0 and float(p_sharp_minus @ rho) > 0


class NutsTransition:
    """One multinomial NUTS transition from a given point."""

    def __init__(self, target: LogDensity, step_size: float, inv_metric: np.ndarray,
                 rng: np.random.Generator, max_depth: int, max_delta_h: float):
        self.target = target
        self.step_size = step_size
        self.inv_metric = inv_metric
        self.rng = rng
        self.max_depth = max_depth
        self.max_delta_h = max_delta_h
        self.n_leapfrog = 0
        self.sum_metro_prob = 0.0
        self.divergent = False

    def hamiltonian(self, z: _Point) -> float:
        h = -z.lp + 0.5 * float(z.p @ (self.inv_metric * z.p))
        return np.inf if np.isnan(h) else h

    def leapfrog(self, z: _Point, direction: int) -> _Point:
        eps = direction * self.step_size
        p = z.p + 0.5 * eps * z.grad
        q = z.q + eps * self.inv_metric * p
        try:
            lp, grad = self.target(q)
        except (FloatingPointError, NumericalError):
            lp, grad = -np.inf, np.zeros_like(q)
        if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
            return _Point(q, p, -np.inf, np.zeros_like(q))
        return _Point(q, p + 0.5 * eps * grad, float(lp), grad)

    def build_tree(self, depth: int, z: _Point, direction: int, h0: float) -> Tuple[_Subtree, _Point]:
        if depth == 0:
            z = self.leapfrog(z, direction)
            self.n_leapfrog += 1
            h = self.hamiltonian(z)
            if h - h0 > self.max_delta_h:
                self.divergent = True
            delta = h0 - h
            self.sum_metro_prob += 1.0 if delta > 0 else float(np.exp(delta))
            p_sharp = self.inv_metric * z.p
            tree = _Subtree(
                valid=not self.divergent, proposal=z, p_sharp_beg=p_sharp, p_sharp_end=p_sharp,
                p_beg=z.p, p_end=z.p, rho=z.p.copy(), log_sum_weight=delta,
            )
            return tree, z

        init, z = self.build_tree(depth - 1, z, direction, h0)
        if not init.valid:
            return init, z
        final, z = self.build_tree(depth - 1, z, direction, h0)
        if not final.valid:
            return final, z

        log_sum_weight = np.logaddexp(init.log_sum_weight, final.log_sum_weight)
        proposal = init.proposal
        if self.rng.uniform() < np.exp(final.log_sum_weight - log_sum_weight):
            proposal = final.proposal

        rho = init.rho + final.rho
        persist = _criterion(init.p_sharp_beg, final.p_sharp_end, rho)
        persist &= _criterion(init.p_sharp_beg, final.p_sharp_beg, init.rho + final.p_beg)
        persist &= _criterion(init.p_sharp_end, final.p_sharp_end, final.rho + init.p_end)
        tree = _Subtree(
            valid=persist, proposal=proposal, p_sharp_beg=init.p_sharp_beg, p_sharp_end=final.p_sharp_end,
            p_beg=init.p_beg, p_end=final.p_end, rho=rho, log_sum_weight=log_sum_weight,
        )
        return tree, z

    def run(self, q: np.ndarray, lp: float, grad: np.ndarray) -> dict:
        p = self.rng.normal(size=q.shape) / np.sqrt(self.inv_metric)
        z0 = _Point(q, p, lp, grad)
        h0 = self.hamiltonian(z0)
        sample = z0
        z_fwd = z_bck = z0

        p_sharp = self.inv_metric * p
        # forward/backward ends and the momenta one step inside them
        p_sharp_fwd_fwd = p_sharp_fwd_bck = p_sharp_bck_fwd = p_sharp_bck_bck = p_sharp
        p_fwd_fwd = p_fwd_bck = p_bck_fwd = p_bck_bck = p
        rho = p.copy()
        log_sum_weight = 0.0
        depth = 0

        while depth < self.max_depth:
            if self.rng.uniform() > 0.5:
                rho_bck = rho
                p_bck_fwd, p_sharp_bck_fwd = p_fwd_bck, p_sharp_fwd_bck
                tree, z_fwd = self.build_tree(depth, z_fwd, +1, h0)
                rho_fwd = tree.rho
                p_sharp_fwd_bck, p_sharp_fwd_fwd = tree.p_sharp_beg, tree.p_sharp_end
                p_fwd_bck, p_fwd_fwd = tree.p_beg, tree.p_end
            else:
                rho_fwd = rho
                p_fwd_bck, p_sharp_fwd_bck = p_bck_fwd, p_sharp_bck_fwd
                tree, z_bck = self.build_tree(depth, z_bck, -1, h0)
                rho_bck = tree.rho
                p_sharp_bck_fwd, p_sharp_bck_bck = tree.p_sharp_beg, tree.p_sharp_end
                p_bck_fwd, p_bck_bck = tree.p_beg, tree.p_end

            if not tree.valid:
                break
            depth += 1

            if tree.log_sum_weight > log_sum_weight:
                sample = tree.proposal
            elif self.rng.uniform() < np.exp(tree.log_sum_weight - log_sum_weight):
                sample = tree.proposal
            log_sum_weight = np.logaddexp(log_sum_weight, tree.log_sum_weight)

            rho = rho_bck + rho_fwd
            persist = _criterion(p_sharp_bck_bck, p_sharp_fwd_fwd, rho)
            persist &= _criterion(p_sharp_bck_bck, p_sharp_fwd_bck, rho_bck + p_fwd_bck)
            persist &= _criterion(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_fwd + p_bck_fwd)
            if not persist:
                break

        return {
            "q": sample.q,
            "lp": sample.lp,
            "grad": sample.grad,
            "accept_stat": self.sum_metro_prob / max(self.n_leapfrog, 1),
            "divergent": self.divergent,
            "depth": depth,
            "n_leapfrog": self.n_leapfrog,
        }


def init_step_size(target: LogDensity, q, lp, grad, step_size: float, inv_metric: np.ndarray,
                   rng: np.random.Generator) -> float:
    """Double or halve the step size until one leapfrog step crosses 0.8 acceptance."""
    direction = 0
    for _ in range(100):
        probe = NutsTransition(target, step_size, inv_metric, rng, max_depth=0, max_delta_h=np.inf)
        p = rng.normal(size=q.shape) / np.sqrt(inv_metric)
        z0 = _Point(q, p, lp, grad)
        h0 = probe.hamiltonian(z0)
        delta_h = h0 - probe.hamiltonian(probe.leapfrog(z0, +1))
        if direction == 0:
            direction = 1 if delta_h > np.log(0.8) else -1
        elif direction == 1 and not delta_h > np.log(0.8):
            break
        elif direction == -1 and not delta_h < np.log(0.8):
            break
        step_size = step_size * 2.0 if direction == 1 else step_size / 2.0
        if step_size > 1e7 or step_size < 1e-12:
            raise InitializationFailure(f"Step size search diverged (step size {step_size:.3g})")
    return step_size


def pilot_optimize(target: LogDensity, start: np.ndarray, iterations: int) -> np.ndarray:
    """Short L-BFGS ascent of the log density used as the pilot-run centre."""

    def negative(u):
        try:
            lp, grad = target(u)
        except (FloatingPointError, NumericalError):
            return np.inf, np.zeros_like(u)
        if not np.isfinite(lp):
            return np.inf, np.zeros_like(u)
        return -lp, -grad

    result = minimize(negative, start, jac=True, method="L-BFGS-B", options={"maxiter": iterations})
    if not np.all(np.isfinite(result.x)) or not np.isfinite(result.fun):
        logger.warning("Pilot optimisation ended at a non-finite point, falling back to the start point")
        return start
    logger.info(f"Pilot optimisation finished after {result.nit} iterations, log density {-result.fun:.4f}")
    return result.x


def find_initial_point(target: LogDensity, center: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator,
                       radius: float) -> Tuple[np.ndarray, float, np.ndarray]:
    """Jitter around ``center`` until the log density and gradient are finite."""

    def candidate(current_radius, attempt):
        q = center + rng.uniform(-current_radius, current_radius, size=center.shape)
        try:
            lp, grad = target(q)
        except (FloatingPointError, NumericalError) as e:
            raise NonFiniteCandidate(str(e))
        if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
            raise NonFiniteCandidate(f"log density {lp} at attempt {attempt + 1}")
        return q, float(lp), np.asarray(grad)

    return exponential_backoff_sync(candidate, max_retries=cfg.init_attempts, initial_radius=radius)


def run_chain(target: LogDensity, cfg: SamplerConfig, start: Tuple[np.ndarray, float, np.ndarray],
              rng: np.random.Generator, chain: int, run_id: str) -> dict:
    """Warm up and sample one chain; only post-warmup iterations are returned."""
    q, lp, grad = start
    dim = q.shape[0]
    inv_metric = np.ones(dim)
    step_size = init_step_size(target, q, lp, grad, 1.0, inv_metric, rng)
    adaptation = DualAveraging(cfg.target_acceptance)
    adaptation.restart(step_size)

    windows = dict(warmup_windows(cfg.n_warmup))
    window_start, window_end = None, None
    window_samples: List[np.ndarray] = []
    every = max(settings.progress_every, 1)
    warmup_divergences = 0

    for iteration in range(cfg.n_warmup):
        if iteration in windows:
            window_start, window_end = iteration, windows[iteration]
            window_samples = []
        step = NutsTransition(target, step_size, inv_metric, rng, cfg.max_tree_depth, cfg.divergence_threshold)
        result = step.run(q, lp, grad)
        q, lp, grad = result["q"], result["lp"], result["grad"]
        warmup_divergences += int(result["divergent"])
        step_size = adaptation.update(result["accept_stat"])

        if window_start is not None and iteration < window_end:
            window_samples.append(q)
            if iteration == window_end - 1:
                inv_metric = regularized_variance(np.asarray(window_samples))
                step_size = init_step_size(target, q, lp, grad, step_size, inv_metric, rng)
                adaptation.restart(step_size)
                logger.debug(f"Chain {chain}: metric updated after window [{window_start}, {window_end})")
                window_start = None

        if (iteration + 1) % every == 0:
            emit_sampling_progress(run_id, "warmup", {
                "chain": chain, "iteration": iteration + 1, "step_size": f"{step_size:.4g}",
                "divergences": warmup_divergences,
            })

    step_size = adaptation.final_step_size()
    logger.info(f"Chain {chain}: warm-up done, step size {step_size:.4g}, {warmup_divergences} warm-up divergences")

    samples = np.empty((cfg.n_draws, dim))
    lps = np.empty(cfg.n_draws)
    divergent = np.zeros(cfg.n_draws, dtype=bool)
    accept = np.empty(cfg.n_draws)
    depth = np.empty(cfg.n_draws, dtype=np.int64)
    for draw in range(cfg.n_draws):
        step = NutsTransition(target, step_size, inv_metric, rng, cfg.max_tree_depth, cfg.divergence_threshold)
        result = step.run(q, lp, grad)
        q, lp, grad = result["q"], result["lp"], result["grad"]
        samples[draw], lps[draw] = q, lp
        divergent[draw] = result["divergent"]
        accept[draw] = result["accept_stat"]
        depth[draw] = result["depth"]
        if (draw + 1) % every == 0:
            emit_sampling_progress(run_id, "sampling", {
                "chain": chain, "iteration": draw + 1, "divergences": int(divergent[: draw + 1].sum()),
            })

    emit_sampling_progress(run_id, "chain_complete", {"chain": chain, "divergences": int(divergent.sum())})
    return {
        "samples": samples, "lp": lps, "divergent": divergent, "accept_stat": accept,
        "tree_depth": depth, "step_size": step_size, "inv_metric": inv_metric,
    }


def run_chains(
    target: LogDensity,
    cfg: SamplerConfig,
    dim: Optional[int] = None,
    init_center: Optional[np.ndarray] = None,
    names: Optional[Sequence[str]] = None,
    run_id: Optional[str] = None,
    max_workers: Optional[int] = None,
) -> PosteriorDraws:
    """
    Draw ``cfg.n_chains`` chains from ``target``.

    Args:
        target: Callable returning (log density, gradient) on the unconstrained space
        cfg: Sampler settings
        dim: Dimension; defaults to ``target.dim``
        init_center: Point to jitter around for ``user`` and ``pilot`` init modes
        names: Coordinate names stored with the draws
        run_id: Identifier used in progress events
        max_workers: Thread cap for concurrent chains; defaults to ``settings.max_workers``

    Returns:
        Post-warmup draws with per-chain adaptation results

    Raises:
        InitializationFailure: No finite starting point was found
    """
    dim = dim if dim is not None else target.dim
    run_id = run_id or generate_run_id("fit")
    rngs = child_rngs(cfg.seed, cfg.n_chains)

    if cfg.init_mode == "random" or init_center is None:
        if cfg.init_mode != "random":
            logger.warning(f"init_mode={cfg.init_mode} without a start point, using random initialisation")
        center, radius = np.zeros(dim), cfg.init_radius
    else:
        center, radius = np.asarray(init_center, dtype=np.float64), 0.1 * cfg.init_radius
    if cfg.init_mode == "pilot":
        pilot_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).generate_state(1)[0])
        q0, _, _ = find_initial_point(target, center, cfg, pilot_rng, cfg.init_radius)
        center = pilot_optimize(target, q0, cfg.pilot_iterations)

    starts = [find_initial_point(target, center, cfg, rng, radius) for rng in rngs]
    add_active_run(run_id, {"n_chains": cfg.n_chains, "n_warmup": cfg.n_warmup, "n_draws": cfg.n_draws, "dim": dim})
    logger.info(f"Sampling {cfg.n_chains} chains ({cfg.n_warmup} warm-up + {cfg.n_draws} draws, dim {dim})")

    try:
        with ThreadPoolExecutor(max_workers=max(1, min(cfg.n_chains, max_workers or settings.max_workers))) as pool:
            futures = [
                pool.submit(run_chain, target, cfg, start, rng, chain + 1, run_id)
                for chain, (start, rng) in enumerate(zip(starts, rngs))
            ]
            chains = [future.result() for future in futures]
    finally:
        remove_active_run(run_id)

    draws = PosteriorDraws(
        unconstrained=np.stack([c["samples"] for c in chains]),
        lp=np.stack([c["lp"] for c in chains]),
        divergent=np.stack([c["divergent"] for c in chains]),
        accept_stat=np.stack([c["accept_stat"] for c in chains]),
        tree_depth=np.stack([c["tree_depth"] for c in chains]),
        step_size=np.array([c["step_size"] for c in chains]),
        inv_metric=np.stack([c["inv_metric"] for c in chains]),
        names=list(names) if names is not None else None,
    )
    divergences = draws.divergences_per_chain()
    if divergences.sum() > 0:
        logger.warning(f"Divergent transitions per chain: {divergences.tolist()}")
    return draws


class SamplerService:
    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or settings.max_workers

    def sample(self, target: LogDensity, cfg: SamplerConfig, init_center: Optional[np.ndarray] = None,
               names: Optional[Sequence[str]] = None, run_id: Optional[str] = None) -> PosteriorDraws:
        """Run every chain of ``cfg`` on at most ``max_workers`` threads."""
        return run_chains(target, cfg, init_center=init_center, names=names, run_id=run_id,
                          max_workers=self.max_workers)


# Global sampler service instance
sampler_service = SamplerService()
