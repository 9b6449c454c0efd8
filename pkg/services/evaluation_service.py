"""
Held-out ELPD and pairwise model comparison over replicated hold-out plans.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.special import logsumexp

from config.settings import settings
from models.domain import ModelFlags, ModelParams, NeighborhoodGraph, ObservationPanel
from models.errors import CellNotHeldOut, InsufficientObserved, PlanMismatch
from models.schemas import ElpdResult, HeldOutCell, HoldoutPlan, RunConfig, SamplerConfig
from services.decode_service import draw_marginals
from services.inference_service import fit_posterior
from utils.helpers import invlogit


class Replication(NamedTuple):
    plan: HoldoutPlan
    result_a: ElpdResult
    result_b: ElpdResult


def make_holdout(panel: ObservationPanel, fraction: float, seed: int,
                 replication: int = 0) -> Tuple[ObservationPanel, HoldoutPlan]:
    """
    Hide a uniform random share of observed cells.

    Each site's first observation stays visible so the masked panel keeps the
    original first-observation indices. Held-out cells are excluded from the
    missingness likelihood.

    Raises:
        InsufficientObserved: Not enough eligible cells for the requested share
    """
    observed = panel.observed
    n_observed = int(observed.sum())
    n_hold = max(1, int(round(fraction * n_observed)))
    eligible = observed.copy()
    seen = panel.first_obs >= 0
    eligible[np.flatnonzero(seen), panel.first_obs[seen]] = False
    candidates = np.argwhere(eligible)
    if n_observed == 0 or n_hold > candidates.shape[0]:
        raise InsufficientObserved(
            f"Cannot hold out {n_hold} cells: {candidates.shape[0]} eligible of {n_observed} observed"
        )

    rng = np.random.default_rng(seed)
    chosen = candidates[np.sort(rng.choice(candidates.shape[0], size=n_hold, replace=False))]
    y = np.array(panel.y, copy=True)
    excluded = np.zeros(y.shape, dtype=bool)
    cells = []
    for i, t in chosen:
        cells.append(HeldOutCell(site=int(i), time=int(t), y_true=int(y[i, t])))
        y[i, t] = np.nan
        excluded[i, t] = True

    masked = ObservationPanel.from_outcomes(
        y, start_month=panel.start_month, r_excluded=excluded | panel.r_excluded, first_obs=panel.first_obs,
    )
    plan = HoldoutPlan(cells=cells, fraction=fraction, replication=replication, seed=seed)
    logger.info(f"Held out {n_hold} of {n_observed} observed cells (replication {replication})")
    return masked, plan


def pointwise_elpd(draws: ModelParams, masked: ObservationPanel, plan: HoldoutPlan,
                   flags: ModelFlags = ModelFlags(), chunk: int = 500) -> ElpdResult:
    """
    Log of the draw-averaged predictive probability of every held-out outcome.

    The state at a held-out cell is weighted by the smoothed marginals of the
    masked panel under each draw.

    Raises:
        CellNotHeldOut: A plan cell is still observed in ``masked``
    """
    sites = np.array([c.site for c in plan.cells], dtype=np.int64)
    times = np.array([c.time for c in plan.cells], dtype=np.int64)
    y_true = np.array([c.y_true for c in plan.cells], dtype=np.float64)
    for c in plan.cells:
        if c.site >= masked.n_sites or c.time >= masked.n_times or masked.observed[c.site, c.time] \
                or not masked.r_excluded[c.site, c.time]:
            raise CellNotHeldOut(f"Cell (site {c.site + 1}, time {c.time + 1}) is not held out in this panel")

    month = masked.month_of[times] - 1
    n_draws = int(np.shape(draws.mu)[0])
    log_p = np.empty((n_draws, sites.size))
    for start in range(0, n_draws, chunk):
        part = ModelParams(*(np.asarray(v)[start:start + chunk] for v in draws))
        weights = draw_marginals(part, masked, flags)[:, times, :]  # (k, C, S)
        eta = (np.asarray(part.mu)[:, None, :] + np.asarray(part.lam)[:, sites, None]
               + np.asarray(part.phi)[:, :, sites].transpose(0, 2, 1) + np.asarray(part.gamma)[:, month, None])
        prob_one = invlogit(eta)
        likelihood = np.where(y_true[None, :, None] == 1.0, prob_one, 1.0 - prob_one)
        log_p[start:start + chunk] = np.log(np.sum(weights * likelihood, axis=2))

    pointwise = logsumexp(log_p, axis=0) - np.log(n_draws)
    total = float(pointwise.sum())
    logger.info(f"Held-out ELPD {total:.4f} over {sites.size} cells (replication {plan.replication})")
    return ElpdResult(total=total, fingerprint=plan.fingerprint, replication=plan.replication,
                      pointwise=pointwise.tolist())


def pairwise_elpd_diff(results_a: Sequence[ElpdResult], results_b: Sequence[ElpdResult]) -> Tuple[float, float]:
    """
    Mean and standard error of per-replication ELPD differences (a minus b).

    Raises:
        PlanMismatch: Replication counts or hold-out plans differ
    """
    if len(results_a) != len(results_b) or not results_a:
        raise PlanMismatch(f"Got {len(results_a)} and {len(results_b)} replications")
    for a, b in zip(results_a, results_b):
        if a.fingerprint != b.fingerprint or a.replication != b.replication:
            raise PlanMismatch(f"Replication {a.replication} was evaluated on different hold-out plans")
    diffs = np.array([a.total - b.total for a, b in zip(results_a, results_b)])
    se = float(diffs.std(ddof=1) / np.sqrt(diffs.size)) if diffs.size > 1 else float("nan")
    return float(diffs.mean()), se


def run_replications(
    panel: ObservationPanel,
    graph: NeighborhoodGraph,
    n_replications: int,
    fraction: float,
    model_a: Tuple[int, ModelFlags],
    model_b: Tuple[int, ModelFlags],
    cfg: SamplerConfig,
    seed: Optional[int] = None,
) -> List[Replication]:
    """
    Fit two model variants on matched hold-out replications.

    Args:
        model_a, model_b: (number of states, flags) of each variant
        cfg: Sampler settings shared by every fit
    """
    seed = cfg.seed if seed is None else seed

    def one(replication: int) -> Replication:
        masked, plan = make_holdout(panel, fraction, seed + replication, replication)
        results = []
        for label, (n_states, flags) in (("a", model_a), ("b", model_b)):
            fit_cfg = cfg.model_copy(update={"seed": cfg.seed + 1000 * replication})
            fit = fit_posterior(masked, graph, n_states, flags, fit_cfg, run_id=f"elpd_r{replication}_{label}")
            results.append(pointwise_elpd(fit.constrained, masked, plan, flags))
        return Replication(plan=plan, result_a=results[0], result_b=results[1])

    workers = max(1, settings.max_workers // max(cfg.n_chains, 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        replications = list(pool.map(one, range(n_replications)))
    mean, se = pairwise_elpd_diff([r.result_a for r in replications], [r.result_b for r in replications])
    logger.success(f"ELPD difference over {n_replications} replications: {mean:.3f} (SE {se:.3f})")
    return replications


class Comparison(NamedTuple):
    replications: List[Replication]
    difference: float  # mean ELPD of the configured model minus the comparison model
    se: float


class EvaluationService:
    def compare(self, panel: ObservationPanel, graph: NeighborhoodGraph, cfg: RunConfig) -> Comparison:
        """Replicated hold-out comparison of the configured model against its ``compare_*`` variant."""
        replications = run_replications(
            panel, graph, cfg.elpd_replications, cfg.elpd_fraction,
            (cfg.n_states, cfg.flags), (cfg.comparison_states, cfg.comparison_flags), cfg.sampler_config(),
        )
        mean, se = pairwise_elpd_diff([r.result_a for r in replications], [r.result_b for r in replications])
        return Comparison(replications=replications, difference=mean, se=se)


# Global evaluation service instance
evaluation_service = EvaluationService()
