import hashlib
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from models.domain import ModelFlags


class SamplerConfig(BaseModel):
    n_chains: int = Field(default=4, ge=1)
    n_warmup: int = Field(default=5000, ge=100)
    n_draws: int = Field(default=10000, ge=1)
    seed: int = 20240101
    target_acceptance: float = Field(default=0.8, gt=0.0, lt=1.0)
    max_tree_depth: int = Field(default=10, ge=1, le=15)
    init_mode: Literal["random", "user", "pilot"] = "random"
    init_radius: float = Field(default=2.0, gt=0.0)
    init_attempts: int = Field(default=100, ge=1)
    pilot_iterations: int = Field(default=200, ge=1)
    divergence_threshold: float = Field(default=1000.0, gt=0.0)


class ChangepointPriors(BaseModel):
    """Conjugate priors and run length of the change-point Gibbs sampler."""

    emission_concentration: float = Field(default=1.0, gt=0.0)
    switch_alpha: float = Field(default=1.0, gt=0.0)
    switch_beta: float = Field(default=1.0, gt=0.0)
    n_iterations: int = Field(default=1000, ge=2)
    n_burnin: int = Field(default=200, ge=0)
    seed: int = 20240101

    @model_validator(mode="after")
    def _burnin_below_iterations(self):
        if self.n_burnin >= self.n_iterations:
            raise ValueError("n_burnin must be smaller than n_iterations")
        return self


class RunConfig(BaseModel):
    """Every key of the flat run configuration file."""

    panel_path: Optional[str] = None
    edges_path: Optional[str] = None
    labels_path: Optional[str] = None
    init_path: Optional[str] = None
    output_dir: str = "output"

    n_sites: Optional[int] = Field(default=None, ge=1)
    n_times: Optional[int] = Field(default=None, ge=1)
    n_states: int = Field(default=5, ge=1)
    start_month: int = Field(default=1, ge=1, le=12)
    index_base: Literal[0, 1] = 1
    seed: int = 20240101

    # sampler
    n_chains: int = Field(default=4, ge=1)
    n_warmup: int = Field(default=5000, ge=100)
    n_draws: int = Field(default=10000, ge=1)
    target_acceptance: float = Field(default=0.8, gt=0.0, lt=1.0)
    max_tree_depth: int = Field(default=10, ge=1, le=15)
    init_mode: Literal["random", "user", "pilot"] = "random"
    init_radius: float = Field(default=2.0, gt=0.0)
    pilot_iterations: int = Field(default=200, ge=1)

    # model flags
    shared_sigma_phi: bool = False
    model_missingness: bool = True
    spatial_field: bool = True

    # predictive summaries
    predictive_reps: int = Field(default=1, ge=1)
    predictive_conditioning: Literal["sampled", "modal"] = "sampled"
    bundle_size: int = Field(default=1000, ge=1)

    # change point
    cp_iterations: int = Field(default=1000, ge=2)
    cp_burnin: int = Field(default=200, ge=0)

    # held-out evaluation
    elpd_fraction: float = Field(default=0.01, gt=0.0, lt=0.5)
    elpd_replications: int = Field(default=10, ge=1)
    compare_n_states: Optional[int] = Field(default=None, ge=1)
    compare_shared_sigma_phi: Optional[bool] = None
    compare_model_missingness: Optional[bool] = None
    compare_spatial_field: Optional[bool] = None

    # simulation
    sim_graph: Literal["path", "grid", "custom"] = "grid"
    sim_grid_rows: int = Field(default=5, ge=1)
    sim_grid_cols: int = Field(default=6, ge=1)
    sim_missingness: Literal["none", "state"] = "state"
    sim_blackout_max: int = Field(default=0, ge=0)
    sim_params: Literal["recovery", "prior"] = "recovery"

    @property
    def flags(self) -> ModelFlags:
        return ModelFlags(
            shared_sigma_phi=self.shared_sigma_phi,
            model_missingness=self.model_missingness,
            spatial_field=self.spatial_field,
        )

    @property
    def comparison_flags(self) -> ModelFlags:
        return ModelFlags(
            shared_sigma_phi=self.shared_sigma_phi if self.compare_shared_sigma_phi is None else self.compare_shared_sigma_phi,
            model_missingness=self.model_missingness if self.compare_model_missingness is None else self.compare_model_missingness,
            spatial_field=self.spatial_field if self.compare_spatial_field is None else self.compare_spatial_field,
        )

    @property
    def comparison_states(self) -> int:
        return self.n_states if self.compare_n_states is None else self.compare_n_states

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            n_chains=self.n_chains,
            n_warmup=self.n_warmup,
            n_draws=self.n_draws,
            seed=self.seed,
            target_acceptance=self.target_acceptance,
            max_tree_depth=self.max_tree_depth,
            init_mode=self.init_mode,
            init_radius=self.init_radius,
            pilot_iterations=self.pilot_iterations,
        )

    def changepoint_priors(self) -> ChangepointPriors:
        return ChangepointPriors(n_iterations=self.cp_iterations, n_burnin=self.cp_burnin, seed=self.seed)


class SimulationScenario(BaseModel):
    """Generative settings for a synthetic panel."""

    n_states: int = Field(ge=1)
    n_sites: int = Field(ge=2)
    n_times: int = Field(ge=2)
    graph: Literal["path", "grid", "custom"] = "path"
    grid_shape: Optional[Tuple[int, int]] = None
    edges: Optional[List[Tuple[int, int]]] = None
    missingness: Literal["none", "state"] = "state"
    blackout: Optional[List[int]] = None
    blackout_max: int = Field(default=0, ge=0)
    start_month: int = Field(default=1, ge=1, le=12)
    shared_sigma_phi: bool = False
    spatial_field: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _consistent_dimensions(self):
        if self.graph == "grid":
            if self.grid_shape is None or self.grid_shape[0] * self.grid_shape[1] != self.n_sites:
                raise ValueError("grid_shape must multiply to n_sites for a grid graph")
        if self.graph == "custom" and not self.edges:
            raise ValueError("custom graph needs an edge list")
        if self.blackout is not None and len(self.blackout) != self.n_sites:
            raise ValueError("blackout needs one start index per site")
        return self

    @property
    def flags(self) -> ModelFlags:
        return ModelFlags(
            shared_sigma_phi=self.shared_sigma_phi,
            model_missingness=self.missingness == "state",
            spatial_field=self.spatial_field,
        )


class HeldOutCell(BaseModel):
    site: int = Field(ge=0)
    time: int = Field(ge=0)
    y_true: int = Field(ge=0, le=1)


class HoldoutPlan(BaseModel):
    cells: List[HeldOutCell]
    fraction: float = Field(gt=0.0, lt=0.5)
    replication: int = 0
    seed: int = 0

    @field_validator("cells")
    @classmethod
    def _no_duplicates(cls, cells: List[HeldOutCell]) -> List[HeldOutCell]:
        keys = {(c.site, c.time) for c in cells}
        if len(keys) != len(cells):
            raise ValueError("held-out cells must be unique")
        return cells

    @property
    def fingerprint(self) -> str:
        """Stable identifier of the held-out cell set."""
        keys = sorted((c.site, c.time) for c in self.cells)
        payload = ";".join(f"{i},{t}" for i, t in keys)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ElpdResult(BaseModel):
    total: float
    fingerprint: str
    replication: int = 0
    pointwise: List[float] = Field(default_factory=list)
