import numpy as np
import pytest

from models.errors import InitializationFailure
from utils.helpers import central_interval, child_rngs, generate_run_id
from utils.progress import add_active_run, emit_sampling_progress, get_active_run, remove_active_run
from utils.retry_helpers import NonFiniteCandidate, exponential_backoff_sync


def test_backoff_shrinks_radius_until_success():
    radii = []

    def candidate(radius, attempt):
        radii.append(radius)
        if attempt < 12:
            raise NonFiniteCandidate("inf")
        return attempt

    assert exponential_backoff_sync(candidate, initial_radius=2.0, shrink_every=10) == 12
    assert radii[0] == 2.0 and radii[9] == 2.0
    assert radii[10] == 1.0


def test_backoff_gives_up():
    def never(radius, attempt):
        raise NonFiniteCandidate("inf")

    with pytest.raises(InitializationFailure):
        exponential_backoff_sync(never, max_retries=5)


def test_other_errors_are_not_retried():
    calls = []

    def broken(radius, attempt):
        calls.append(attempt)
        raise KeyError("bad")

    with pytest.raises(KeyError):
        exponential_backoff_sync(broken)
    assert calls == [0]


def test_progress_tracking():
    run_id = generate_run_id("test")
    assert run_id.startswith("test_")
    add_active_run(run_id, {"n_chains": 2})
    emit_sampling_progress(run_id, "warmup", {"chain": 1, "iteration": 100})
    emit_sampling_progress(run_id, "sampling", {"chain": 1, "iteration": 200})
    session = get_active_run(run_id)
    assert session["events"] == 2
    assert session["last_event"] == {"event_type": "sampling", "chain": 1, "iteration": 200}
    remove_active_run(run_id)
    assert get_active_run(run_id) == {}


def test_central_interval_and_child_rngs():
    lower, upper = central_interval(np.arange(101.0), mass=0.9)
    assert lower == pytest.approx(5.0) and upper == pytest.approx(95.0)
    first, second = child_rngs(3, 2)
    assert first.normal() != second.normal()
    assert child_rngs(3, 2)[0].normal() == np.random.default_rng(np.random.SeedSequence(3).spawn(2)[0]).normal()
