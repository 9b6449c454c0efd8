"""
The engine's stages as run by the command line and the pipeline workflow.

Each stage reads its inputs from the run configuration and the output
directory, writes its artifacts and returns a small dict of what it produced.
"""

from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from loguru import logger

from models.domain import NeighborhoodGraph, ObservationPanel, StateTrajectory, TrajectoryBundle
from models.errors import ConfigError, LengthMismatch
from models.schemas import RunConfig
from services.changepoint_service import changepoint_service
from services.decode_service import decode_service
from services.diagnostics_service import diagnostics_service
from services.evaluation_service import evaluation_service
from services.graph_service import graph_service
from services.inference_service import inference_service
from services.parameter_transforms import batch_to_rows
from services.predict_service import predict_service
from services.report_service import report_service
from services.simulation_service import simulation_service
from services.storage_service import (
    ADAPTATION_FILE,
    BUNDLE_FILE,
    DIAGNOSTICS_FILE,
    DRAWS_FILE,
    EDGES_FILE,
    PANEL_FILE,
    TRAJECTORY_FILE,
    TRUE_PARAMS_FILE,
    TRUE_TRAJECTORY_FILE,
    VITERBI_FILE,
    StorageService,
    load_panel,
    read_params_file,
)
from utils.helpers import generate_run_id, log_step


class RunService:
    def load_inputs(self, cfg: RunConfig, storage: StorageService) -> Tuple[ObservationPanel, NeighborhoodGraph]:
        """
        Panel and graph from the configured paths, falling back to simulated files
        in the output directory.

        Raises:
            ConfigError: No panel or edge file is available
            LengthMismatch: Panel and graph disagree on the number of sites
        """
        panel_path = cfg.panel_path or (storage.path(PANEL_FILE) if storage.exists(PANEL_FILE) else None)
        edges_path = cfg.edges_path or (storage.path(EDGES_FILE) if storage.exists(EDGES_FILE) else None)
        if panel_path is None:
            raise ConfigError("panel_path is not set and no simulated panel exists", code="MISSING_PATH")
        if edges_path is None:
            raise ConfigError("edges_path is not set and no simulated edge list exists", code="MISSING_PATH")

        # simulated files are always one-based
        base = cfg.index_base if cfg.panel_path else 1
        panel = load_panel(panel_path, cfg.n_sites, cfg.n_times, base, cfg.start_month)
        graph = graph_service.load(edges_path, panel.n_sites, cfg.index_base if cfg.edges_path else 1,
                                   labels_path=cfg.labels_path, labels_base=base)
        if graph.n_sites != panel.n_sites:
            raise LengthMismatch(f"Graph has {graph.n_sites} sites, panel has {panel.n_sites}")
        return panel, graph

    def _draws(self, cfg: RunConfig, storage: StorageService):
        batch, _ = storage.read_draws(DRAWS_FILE)
        n_states = int(np.shape(batch.mu)[1])
        if n_states != cfg.n_states:
            raise ConfigError(f"Draws have S={n_states} but n_states={cfg.n_states}", code="STATE_MISMATCH")
        return batch

    def simulate(self, cfg: RunConfig, storage: StorageService) -> Dict[str, Any]:
        """Simulate a panel with its truth and write it in the ingestion format."""
        result = simulation_service.simulate(cfg)
        written = [
            storage.write_panel(result.panel),
            storage.write_edges(result.graph),
            storage.write_params(result.params, TRUE_PARAMS_FILE),
            storage.write_trajectory(result.trajectory, TRUE_TRAJECTORY_FILE),
        ]
        log_step("simulate", {"n_sites": result.panel.n_sites, "n_times": result.panel.n_times, "n_states": cfg.n_states})
        return {"files": written, "missingness": result.panel.missingness_report()}

    def fit(self, cfg: RunConfig, storage: StorageService, dry_run: bool = False) -> Dict[str, Any]:
        """Sample the posterior and write draws, diagnostics and adaptation tables."""
        panel, graph = self.load_inputs(cfg, storage)
        init_params = None
        if cfg.init_mode == "user":
            if not cfg.init_path:
                raise ConfigError("init_mode=user needs init_path", code="MISSING_PATH")
            init_params = read_params_file(cfg.init_path)
            if init_params.n_states != cfg.n_states or init_params.n_sites != panel.n_sites:
                raise LengthMismatch(
                    f"Initial point has S={init_params.n_states}, N={init_params.n_sites}; "
                    f"expected S={cfg.n_states}, N={panel.n_sites}"
                )

        if dry_run:
            value, seconds = inference_service.dry_run(panel, graph, cfg, init_params)
            logger.success(f"Dry run passed: log density {value:.6f}, {seconds:.4f}s per evaluation")
            return {"log_density": value, "seconds_per_evaluation": seconds}

        fit = inference_service.fit(panel, graph, cfg, init_params, run_id=generate_run_id("fit"))
        summary = diagnostics_service.summarize(fit.draws, fit.layout, rows=batch_to_rows(fit.constrained))
        written = [
            storage.write_draws(fit.draws, fit.constrained, fit.layout, DRAWS_FILE),
            storage.write_frame(summary, DIAGNOSTICS_FILE),
            storage.write_frame(fit.draws.adaptation_frame(), ADAPTATION_FILE),
        ]
        return {"files": written, **diagnostics_service.check(summary, fit.draws)}

    def decode(self, cfg: RunConfig, storage: StorageService) -> Dict[str, Any]:
        """Modal states, Viterbi path at the posterior mean and a sampled trajectory bundle."""
        storage.require(DRAWS_FILE)
        panel, _ = self.load_inputs(cfg, storage)
        decoded = decode_service.decode(self._draws(cfg, storage), panel, cfg)
        written = [
            storage.write_modal_trajectory(decoded.modal, decoded.modal_prob, decoded.marginals, TRAJECTORY_FILE),
            storage.write_trajectory(decoded.viterbi_path, VITERBI_FILE),
            storage.write_bundle(decoded.bundle, BUNDLE_FILE),
        ]
        return {"files": written, "occupancy": decoded.occupancy.tolist(), "modal_probability": decoded.summary}

    def _conditioning(self, cfg: RunConfig, storage: StorageService,
                      modal: StateTrajectory) -> Union[StateTrajectory, TrajectoryBundle]:
        if cfg.predictive_conditioning == "modal":
            return modal
        return storage.read_bundle(BUNDLE_FILE, cfg.n_states)

    def predict(self, cfg: RunConfig, storage: StorageService) -> Dict[str, Any]:
        """Every posterior-predictive table and chart."""
        storage.require(DRAWS_FILE, TRAJECTORY_FILE)
        panel, _ = self.load_inputs(cfg, storage)
        batch = self._draws(cfg, storage)
        modal, _ = storage.read_modal_trajectory(TRAJECTORY_FILE)
        frames = predict_service.tables(batch, panel, modal, self._conditioning(cfg, storage, modal), cfg)
        written = [storage.write_frame(frame, name) for name, frame in frames.items()]
        written += report_service.charts(storage)
        return {"files": written}

    def changepoint(self, cfg: RunConfig, storage: StorageService,
                    bundle: Optional[TrajectoryBundle] = None) -> Dict[str, Any]:
        """Fit the left-to-right change-point model to the sampled trajectory bundle."""
        bundle = bundle or storage.read_bundle(BUNDLE_FILE, cfg.n_states)
        fit = changepoint_service.fit(bundle, cfg.changepoint_priors())
        written = [storage.write_frame(frame, name) for name, frame in changepoint_service.frames(fit).items()]
        return {"files": written, "map_changepoint": fit.map_changepoint, "interval": fit.interval}

    def elpd(self, cfg: RunConfig, storage: StorageService) -> Dict[str, Any]:
        """Replicated hold-out comparison of the configured model against the ``compare_*`` variant."""
        panel, graph = self.load_inputs(cfg, storage)
        comparison = evaluation_service.compare(panel, graph, cfg)
        plans = [r.plan for r in comparison.replications]
        written = [storage.write_holdout_plans(plans)]
        written += list(storage.write_elpd(
            plans,
            [r.result_a for r in comparison.replications],
            [r.result_b for r in comparison.replications],
            comparison.difference,
            comparison.se,
        ))
        return {"files": written, "difference": comparison.difference, "se": comparison.se}

    def report(self, cfg: RunConfig, storage: StorageService) -> Dict[str, Any]:
        return {"files": [report_service.build(storage)]}


# Global run service instance
run_service = RunService()
