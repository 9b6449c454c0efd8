import time
from typing import NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger

from models.domain import ModelFlags, ModelParams, NeighborhoodGraph, ObservationPanel, PosteriorDraws
from models.errors import NonFinite
from models.schemas import RunConfig, SamplerConfig
from services.likelihood_service import likelihood_service
from services.parameter_transforms import ParamLayout, check_invariants, constrained_draws, take_draw, unconstrain
from services.sampler_service import sampler_service


class FitResult(NamedTuple):
    draws: PosteriorDraws
    layout: ParamLayout
    constrained: ModelParams  # leading draw axis


def fit_posterior(
    panel: ObservationPanel,
    graph: NeighborhoodGraph,
    n_states: int,
    flags: ModelFlags,
    cfg: SamplerConfig,
    init_params: Optional[ModelParams] = None,
    run_id: Optional[str] = None,
) -> FitResult:
    """Compile the target for one model variant, sample it and constrain the draws."""
    target = likelihood_service.target(panel, graph, n_states, flags)
    layout = target.layout
    center = unconstrain(init_params, layout) if init_params is not None else None
    draws = sampler_service.sample(target, cfg, init_center=center, names=layout.names, run_id=run_id)
    constrained = constrained_draws(draws, layout)
    # spot-check the first and last draw of every chain
    for k in np.unique(np.r_[np.arange(draws.n_chains) * draws.n_draws, np.arange(1, draws.n_chains + 1) * draws.n_draws - 1]):
        check_invariants(take_draw(constrained, int(k)), flags)
    logger.info(f"Fitted S={n_states} model ({flags}) with {draws.n_chains}x{draws.n_draws} draws")
    return FitResult(draws=draws, layout=layout, constrained=constrained)


def evaluate_once(panel: ObservationPanel, graph: NeighborhoodGraph, n_states: int, flags: ModelFlags,
                  params: Optional[ModelParams] = None) -> Tuple[float, float]:
    """
    Dry run of the target: log density and gradient at one point.

    The point is ``params`` or the origin of the unconstrained space. The
    first call compiles; the returned time is that of a second, compiled call.

    Returns:
        Log density (posterior plus log-Jacobian) and seconds per evaluation
    """
    target = likelihood_service.target(panel, graph, n_states, flags)
    layout = target.layout
    u = unconstrain(params, layout) if params is not None else np.zeros(layout.dim)
    value, grad = target(u)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFinite(f"Log density {value} or its gradient is non-finite at the starting point")
    started = time.perf_counter()
    target(u)
    elapsed = time.perf_counter() - started
    logger.info(f"Log density {value:.6f} over {layout.dim} coordinates, {elapsed:.4f}s per evaluation")
    return value, elapsed


class InferenceService:
    """Posterior fits of the model variant a run configuration selects."""

    def fit(self, panel: ObservationPanel, graph: NeighborhoodGraph, cfg: RunConfig,
            init_params: Optional[ModelParams] = None, run_id: Optional[str] = None) -> FitResult:
        return fit_posterior(panel, graph, cfg.n_states, cfg.flags, cfg.sampler_config(), init_params, run_id)

    def dry_run(self, panel: ObservationPanel, graph: NeighborhoodGraph, cfg: RunConfig,
                init_params: Optional[ModelParams] = None) -> Tuple[float, float]:
        return evaluate_once(panel, graph, cfg.n_states, cfg.flags, init_params)


# Global inference service instance
inference_service = InferenceService()
