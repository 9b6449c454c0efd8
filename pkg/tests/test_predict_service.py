import numpy as np
import pytest

from conftest import random_panel, random_params, stack_params, zero_params
from models.domain import ObservationPanel, StateTrajectory, TrajectoryBundle
from models.errors import EmptyState, IndexOutOfRange, MissingTrajectory
from models.schemas import RunConfig
from services.graph_service import path_graph
from services.predict_service import (
    cell_probabilities,
    missingness_curve,
    observed_proportion,
    predict_service,
    predictive_proportion,
    seasonal_summary,
    site_missingness,
    state_probability_map,
    state_summary_table,
    transition_summary,
)
from services.storage_service import MISSINGNESS_FILE, PROPORTION_FILE, STATE_TABLE_FILE, state_map_file
from utils.helpers import invlogit


def _modal(states):
    return StateTrajectory(states=np.asarray(states), kind="modal")


def test_zero_predictor_gives_half(rng):
    panel = random_panel(200, 5, rng)
    draws = stack_params(*([zero_params(1, 200)] * 400))
    series = predictive_proportion(draws, panel, _modal([1] * 5), rng)
    np.testing.assert_allclose(series.mean, 0.5, atol=0.01)
    assert np.all(series.lower <= series.mean) and np.all(series.mean <= series.upper)


def test_certain_zero_probability_gives_zero(rng):
    panel = random_panel(10, 4, rng)
    draws = stack_params(zero_params(1, 10)._replace(mu=np.array([-60.0])))
    series = predictive_proportion(draws, panel, _modal([1] * 4), rng)
    np.testing.assert_array_equal(series.mean, 0.0)


def test_predictive_mean_matches_cell_probabilities(rng):
    graph = path_graph(6)
    panel = random_panel(6, 8, rng)
    draws = stack_params(*(random_params(3, graph, rng) for _ in range(40)))
    bundle = TrajectoryBundle(states=rng.integers(1, 4, size=(40, 8)), n_categories=3, draw_index=np.arange(40))
    series = predictive_proportion(draws, panel, bundle, rng, reps=50)
    expected = cell_probabilities(draws, np.arange(40), bundle.states - 1, panel.month_of - 1).mean(axis=(0, 1))
    assert np.all(np.abs(series.mean - expected) < 4 * series.mc_se + 1e-12)


def test_doubling_replications_is_stable(rng):
    graph = path_graph(5)
    panel = random_panel(5, 6, rng)
    draws = stack_params(*(random_params(2, graph, rng) for _ in range(30)))
    trajectory = _modal(rng.integers(1, 3, size=6))
    single = predictive_proportion(draws, panel, trajectory, np.random.default_rng(1), reps=20)
    double = predictive_proportion(draws, panel, trajectory, np.random.default_rng(2), reps=40)
    assert np.all(np.abs(single.mean - double.mean) < 4 * np.hypot(single.mc_se, double.mc_se) + 1e-12)


def test_predictive_needs_trajectories(rng):
    panel = random_panel(3, 4, rng)
    draws = stack_params(zero_params(1, 3))
    with pytest.raises(MissingTrajectory):
        predictive_proportion(draws, panel, None, rng)
    with pytest.raises(MissingTrajectory):
        predictive_proportion(draws, panel, TrajectoryBundle(states=np.ones((2, 4)), n_categories=1), rng)
    with pytest.raises(MissingTrajectory):
        predictive_proportion(draws, panel, _modal([1] * 3), rng)


def test_observed_proportion_skips_missing():
    y = np.array([[1.0, np.nan], [0.0, np.nan], [1.0, np.nan]])
    observed = observed_proportion(ObservationPanel.from_outcomes(y))
    assert observed[0] == pytest.approx(2 / 3)
    assert np.isnan(observed[1])


def test_state_map_single_time_without_season(rng):
    graph = path_graph(4)
    p = random_params(2, graph, rng)._replace(gamma=np.zeros(12))
    panel = ObservationPanel.from_outcomes(np.array([[1.0], [0.0], [np.nan], [1.0]]))
    frame = state_probability_map(stack_params(p), _modal([2]), 2, panel)
    np.testing.assert_allclose(frame["value"], invlogit(p.mu[1] + p.lam + p.phi[1]))
    assert frame["flag"].tolist() == ["ok", "ok", "missing", "ok"]


def test_state_map_empty_and_out_of_range(rng):
    draws = stack_params(random_params(3, path_graph(3), rng))
    panel = random_panel(3, 4, rng)
    with pytest.raises(EmptyState):
        state_probability_map(draws, _modal([1, 1, 2, 2]), 3, panel)
    with pytest.raises(IndexOutOfRange):
        state_probability_map(draws, _modal([1, 1, 2, 2]), 4, panel)


def test_state_map_chunking_matches_direct_average(rng):
    graph = path_graph(4)
    draws = stack_params(*(random_params(2, graph, rng) for _ in range(7)))
    panel = random_panel(4, 14, rng, start_month=3)
    modal = _modal([1, 2, 2, 1, 2, 2, 2, 1, 1, 2, 1, 2, 2, 1])
    assigned = np.flatnonzero(modal.states == 2)
    eta = (draws.mu[:, 1, None, None] + draws.lam[:, :, None] + draws.phi[:, 1, :, None]
           + draws.gamma[:, None, panel.month_of[assigned] - 1])
    expected = invlogit(eta).mean(axis=(0, 2))

    whole = state_probability_map(draws, modal, 2, panel)
    for chunk in (1, 3):
        np.testing.assert_allclose(state_probability_map(draws, modal, 2, panel, chunk=chunk)["value"], whole["value"])
    np.testing.assert_allclose(whole["value"], expected)


def test_missingness_curve_values():
    base = zero_params(2, 3)
    frame = missingness_curve(stack_params(base._replace(xi=np.array([-0.75, 0.0]), beta=np.array([-1.23, 0.0]))), 2)
    first = frame[frame["state"] == 1]["mean"].to_numpy()
    flat = frame[frame["state"] == 2]["mean"].to_numpy()
    np.testing.assert_allclose(first, [0.321, 0.121], atol=1e-3)
    np.testing.assert_allclose(flat, 0.5)


def test_missingness_curve_bands_are_ordered(rng):
    draws = stack_params(*(random_params(2, path_graph(3), rng) for _ in range(20)))
    frame = missingness_curve(draws, 10)
    assert len(frame) == 20
    assert np.all(frame["q2.5"] <= frame["mean"]) and np.all(frame["mean"] <= frame["q97.5"])
    assert frame["mean"].between(0, 1).all()


def test_state_table_single_state_all_observed(rng):
    y = (rng.uniform(size=(5, 6)) < 0.3).astype(np.float64)
    panel = ObservationPanel.from_outcomes(y)
    draws = stack_params(*(random_params(1, path_graph(5), rng) for _ in range(5)))
    table = state_summary_table(draws, _modal([1] * 6), panel)
    assert table.loc[0, "observed_outcome"] == pytest.approx(y.mean())
    assert table.loc[0, "observed_missing"] == 0.0
    assert table.loc[0, "flag"] == "ok"


def test_state_table_flags_empty_state(rng):
    draws = stack_params(random_params(3, path_graph(3), rng))
    table = state_summary_table(draws, _modal([1, 2, 2, 1]), random_panel(3, 4, rng))
    assert table["flag"].tolist() == ["ok", "ok", "empty"]
    assert np.isnan(table.loc[2, "outcome_mean"])


def test_state_table_matches_truth_with_large_panel(rng):
    p = zero_params(2, 50)._replace(mu=np.array([-2.0, 0.5]), mu1=-2.0, muS=0.5)
    states = np.repeat([0, 1], 200)
    prob = invlogit(p.mu[states])
    y = (rng.uniform(size=(50, 400)) < prob[None, :]).astype(np.float64)
    panel = ObservationPanel.from_outcomes(y)
    table = state_summary_table(stack_params(p), _modal(states + 1), panel)
    np.testing.assert_allclose(table["observed_outcome"], table["outcome_mean"], atol=0.01)


def test_seasonal_summary(rng):
    draws = stack_params(*(random_params(2, path_graph(3), rng) for _ in range(50)))
    frame = seasonal_summary(draws)
    assert frame["mean"].sum() == pytest.approx(0.0, abs=1e-10)
    assert np.all(frame["q2.5"] <= frame["q25"]) and np.all(frame["q75"] <= frame["q97.5"])
    zero = seasonal_summary(stack_params(zero_params(1, 2)))
    np.testing.assert_array_equal(zero["mean"], 0.0)


def test_transition_summary(rng):
    draws = stack_params(*(random_params(3, path_graph(3), rng) for _ in range(20)))
    frame = transition_summary(draws)
    assert len(frame) == 9
    np.testing.assert_allclose(frame.groupby("from")["mean"].sum(), 1.0)


def test_site_missingness():
    y = np.array([[np.nan, 1.0, np.nan, 0.0], [np.nan] * 4])
    frame = site_missingness(ObservationPanel.from_outcomes(y))
    assert frame["missing_share"].tolist() == [0.5, 1.0]
    assert frame.loc[0, "post_first_missing_share"] == pytest.approx(1 / 3)
    assert np.isnan(frame.loc[1, "post_first_missing_share"])
    assert frame["first_obs"].tolist() == [2, -1]


def test_predict_service_tables_skip_empty_states(rng):
    graph = path_graph(3)
    panel = random_panel(3, 6, rng)
    draws = stack_params(*(random_params(3, graph, rng) for _ in range(4)))
    modal = _modal([1, 1, 2, 2, 2, 1])
    frames = predict_service.tables(draws, panel, modal, modal, RunConfig(n_states=3, seed=4))
    assert state_map_file(1) in frames and state_map_file(2) in frames
    assert state_map_file(3) not in frames
    assert MISSINGNESS_FILE in frames
    assert frames[PROPORTION_FILE].shape[0] == 6
    assert frames[STATE_TABLE_FILE]["flag"].tolist() == ["ok", "ok", "empty"]

    without = predict_service.tables(draws, panel, modal, modal, RunConfig(n_states=3, seed=4, model_missingness=False))
    assert MISSINGNESS_FILE not in without
