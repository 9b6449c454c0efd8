import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import enumerate_marginals, random_panel, random_params, stack_params, zero_params
from models.domain import ModelFlags, ObservationPanel
from models.errors import CellNotHeldOut, InsufficientObserved, PlanMismatch
from models.schemas import ElpdResult, RunConfig, SamplerConfig
from services.evaluation_service import (
    Replication,
    evaluation_service,
    make_holdout,
    pairwise_elpd_diff,
    pointwise_elpd,
    run_replications,
)
from services.graph_service import path_graph
from services.likelihood_service import emission_matrix
from utils.helpers import invlogit


def _full_panel(rng, n_sites, n_times):
    return ObservationPanel.from_outcomes((rng.uniform(size=(n_sites, n_times)) < 0.4).astype(np.float64))


def test_single_cell_holdout(rng):
    panel = _full_panel(rng, 2, 5)
    masked, plan = make_holdout(panel, 0.1, seed=1)
    assert len(plan.cells) == 1
    cell = plan.cells[0]
    assert np.isnan(masked.y).sum() == 1
    assert np.isnan(masked.y[cell.site, cell.time])
    assert masked.r_excluded[cell.site, cell.time]
    assert cell.y_true == int(panel.y[cell.site, cell.time])
    np.testing.assert_array_equal(masked.first_obs, panel.first_obs)


def test_holdout_count_follows_fraction(rng):
    panel = _full_panel(rng, 100, 300)
    _, plan = make_holdout(panel, 0.01, seed=2)
    assert len(plan.cells) == 300
    assert all(c.time > 0 for c in plan.cells)


def test_holdout_overlap_across_seeds(rng):
    panel = _full_panel(rng, 50, 40)
    _, first = make_holdout(panel, 0.2, seed=3)
    _, second = make_holdout(panel, 0.2, seed=4)
    overlap = len({(c.site, c.time) for c in first.cells} & {(c.site, c.time) for c in second.cells})
    expected = 400 ** 2 / 1950
    assert abs(overlap - expected) < 35
    assert first.fingerprint != second.fingerprint


def test_holdout_needs_eligible_cells():
    y = np.array([[1.0, np.nan, np.nan], [np.nan, 0.0, np.nan]])
    with pytest.raises(InsufficientObserved):
        make_holdout(ObservationPanel.from_outcomes(y), 0.3, seed=0)


def test_known_half_probability():
    panel = ObservationPanel.from_outcomes(np.ones((2, 3)))
    masked, plan = make_holdout(panel, 0.25, seed=5)
    result = pointwise_elpd(stack_params(zero_params(1, 2)), masked, plan)
    np.testing.assert_allclose(result.pointwise, np.log(0.5))
    assert result.total == pytest.approx(len(plan.cells) * np.log(0.5))
    assert result.fingerprint == plan.fingerprint


def test_matches_enumerated_state_posterior(rng):
    graph = path_graph(3)
    panel = random_panel(3, 5, rng, missing=0.1)
    masked, plan = make_holdout(panel, 0.2, seed=6)
    params = [random_params(2, graph, rng) for _ in range(3)]
    result = pointwise_elpd(stack_params(*params), masked, plan)

    expected = []
    for cell in plan.cells:
        per_draw = []
        for p in params:
            weights = enumerate_marginals(emission_matrix(masked, p), p.rho, p.A)[cell.time]
            month = masked.month_of[cell.time] - 1
            prob = invlogit(p.mu + p.lam[cell.site] + p.phi[:, cell.site] + p.gamma[month])
            per_draw.append(np.log(np.sum(weights * (prob if cell.y_true == 1 else 1 - prob))))
        expected.append(logsumexp(per_draw) - np.log(len(params)))
    np.testing.assert_allclose(result.pointwise, expected, atol=1e-10)
    assert np.all(np.array(result.pointwise) < 0) and np.isfinite(result.total)


def test_unmasked_panel_is_rejected(rng):
    panel = _full_panel(rng, 3, 6)
    _, plan = make_holdout(panel, 0.2, seed=7)
    with pytest.raises(CellNotHeldOut):
        pointwise_elpd(stack_params(zero_params(1, 3)), panel, plan)


def _result(total, fingerprint="abc", replication=0):
    return ElpdResult(total=total, fingerprint=fingerprint, replication=replication)


def test_identical_models_have_zero_difference():
    results = [_result(-10.0, replication=0), _result(-12.5, replication=1)]
    assert pairwise_elpd_diff(results, results) == (0.0, 0.0)
    mean, se = pairwise_elpd_diff(results[:1], results[:1])
    assert mean == 0.0 and np.isnan(se)


def test_difference_mean_and_standard_error():
    a = [_result(-10.0, replication=0), _result(-11.0, replication=1), _result(-9.0, replication=2)]
    b = [_result(-12.0, replication=0), _result(-12.0, replication=1), _result(-12.0, replication=2)]
    mean, se = pairwise_elpd_diff(a, b)
    diffs = np.array([2.0, 1.0, 3.0])
    assert mean == pytest.approx(2.0)
    assert se == pytest.approx(diffs.std(ddof=1) / np.sqrt(3))


def test_mismatched_plans_are_rejected():
    with pytest.raises(PlanMismatch):
        pairwise_elpd_diff([_result(-1.0)], [_result(-1.0, fingerprint="other")])
    with pytest.raises(PlanMismatch):
        pairwise_elpd_diff([_result(-1.0), _result(-1.0, replication=1)], [_result(-1.0)])
    with pytest.raises(PlanMismatch):
        pairwise_elpd_diff([], [])


@pytest.mark.slow
def test_replications_pair_plans(rng):
    graph = path_graph(4)
    panel = random_panel(4, 12, rng, missing=0.1)
    cfg = SamplerConfig(n_chains=1, n_warmup=150, n_draws=100, seed=8)
    replications = run_replications(panel, graph, 2, 0.1, (2, ModelFlags()), (1, ModelFlags()), cfg)
    assert len(replications) == 2
    for rep in replications:
        assert rep.result_a.fingerprint == rep.result_b.fingerprint == rep.plan.fingerprint
        assert np.isfinite(rep.result_a.total) and np.isfinite(rep.result_b.total)


def test_evaluation_service_compares_configured_variants(rng, monkeypatch):
    graph = path_graph(4)
    panel = random_panel(4, 12, rng, missing=0.1)
    calls = {}

    def fake_replications(panel_, graph_, n_replications, fraction, model_a, model_b, sampler_cfg):
        calls.update(n=n_replications, fraction=fraction, a=model_a, b=model_b, seed=sampler_cfg.seed)
        replications = []
        for k, (total_a, total_b) in enumerate([(-10.0, -12.0), (-11.0, -12.0)]):
            _, plan = make_holdout(panel_, fraction, 7 + k, k)
            replications.append(Replication(
                plan=plan,
                result_a=ElpdResult(total=total_a, fingerprint=plan.fingerprint, replication=k),
                result_b=ElpdResult(total=total_b, fingerprint=plan.fingerprint, replication=k),
            ))
        return replications

    monkeypatch.setattr("services.evaluation_service.run_replications", fake_replications)
    cfg = RunConfig(n_states=3, compare_spatial_field=False, elpd_replications=2, elpd_fraction=0.1, seed=31)
    comparison = evaluation_service.compare(panel, graph, cfg)
    assert calls == {"n": 2, "fraction": 0.1, "a": (3, ModelFlags()), "b": (3, ModelFlags(spatial_field=False)), "seed": 31}
    assert comparison.difference == pytest.approx(1.5)
    assert comparison.se == pytest.approx(0.5)
    assert len(comparison.replications) == 2
