import numpy as np
import pytest

from models.domain import PosteriorDraws
from models.errors import DegenerateInput
from services.diagnostics_service import DiagnosticsService, diagnostics_service, ess, rhat, summarize_draws
from services.parameter_transforms import ParamLayout


def _ar1(rng, n_chains, n_draws, phi):
    x = np.empty((n_chains, n_draws))
    x[:, 0] = rng.normal(size=n_chains) / np.sqrt(1 - phi ** 2)
    noise = rng.normal(size=(n_chains, n_draws))
    for t in range(1, n_draws):
        x[:, t] = phi * x[:, t - 1] + noise[:, t]
    return x


def test_rhat_iid_chains_is_near_one(rng):
    chains = rng.normal(size=(4, 1000))
    assert 0.99 <= rhat(chains) <= 1.01


def test_rhat_detects_shifted_chain(rng):
    chains = rng.normal(size=(4, 1000))
    chains[0] += 5.0
    assert rhat(chains) > 1.5


def test_rhat_constant_is_nan():
    assert np.isnan(rhat(np.ones((4, 100))))


def test_rhat_needs_two_chains(rng):
    with pytest.raises(DegenerateInput):
        rhat(rng.normal(size=(1, 100)))


def test_rhat_rejects_too_few_draws(rng):
    with pytest.raises(DegenerateInput):
        rhat(rng.normal(size=(4, 3)))


def test_ess_iid_close_to_draw_count(rng):
    chains = rng.normal(size=(4, 1000))
    assert abs(ess(chains) - 4000) / 4000 < 0.15


def test_ess_ar1_matches_integrated_autocorrelation(rng):
    phi = 0.9
    chains = _ar1(rng, 4, 5000, phi)
    nominal = chains.size * (1 - phi) / (1 + phi)
    assert abs(ess(chains) - nominal) / nominal < 0.3


def test_tail_ess_is_positive(rng):
    chains = rng.normal(size=(4, 500))
    value = ess(chains, "tail")
    assert np.isfinite(value) and value > 0


def test_ess_constant_is_nan():
    assert np.isnan(ess(np.zeros((2, 50))))


def test_ess_unknown_kind(rng):
    with pytest.raises(DegenerateInput):
        ess(rng.normal(size=(2, 50)), "middle")


def test_summary_table_layout(rng):
    layout = ParamLayout(n_states=2, n_sites=3)
    n_chains, n_draws = 2, 40
    u = rng.normal(scale=0.3, size=(n_chains, n_draws, layout.dim))
    draws = PosteriorDraws(
        unconstrained=u, lp=rng.normal(size=(n_chains, n_draws)),
        divergent=np.zeros((n_chains, n_draws), dtype=bool), accept_stat=np.full((n_chains, n_draws), 0.8),
        tree_depth=np.full((n_chains, n_draws), 3), step_size=np.full(n_chains, 0.5),
        inv_metric=np.ones((n_chains, layout.dim)),
    )
    summary = summarize_draws(draws, layout)
    assert list(summary.columns) == ["param", "mean", "sd", "q2.5", "q97.5", "ess_bulk", "ess_tail", "rhat"]
    assert summary["param"].tolist() == layout.constrained_names() + ["lp__"]
    mean_rows = summary[summary["param"].str.startswith("mu[")]
    assert np.all(np.isfinite(mean_rows["rhat"]))
    assert np.all(summary["q2.5"] <= summary["q97.5"])


def test_check_reports_worst_rhat_and_divergences(rng):
    layout = ParamLayout(n_states=1, n_sites=2)
    n_chains, n_draws = 2, 30
    u = rng.normal(scale=0.3, size=(n_chains, n_draws, layout.dim))
    u[1] += 3.0
    divergent = np.zeros((n_chains, n_draws), dtype=bool)
    divergent[0, [3, 7]] = True
    draws = PosteriorDraws(
        unconstrained=u, lp=rng.normal(size=(n_chains, n_draws)), divergent=divergent,
        accept_stat=np.full((n_chains, n_draws), 0.8), tree_depth=np.full((n_chains, n_draws), 3),
        step_size=np.full(n_chains, 0.5), inv_metric=np.ones((n_chains, layout.dim)),
    )
    summary = diagnostics_service.summarize(draws, layout)
    result = diagnostics_service.check(summary, draws)
    assert result["divergences"] == 2
    assert result["max_rhat"] == pytest.approx(summary["rhat"].max())
    assert result["max_rhat"] > diagnostics_service.rhat_warning
    assert DiagnosticsService(rhat_warning=2.0).rhat_warning == 2.0
