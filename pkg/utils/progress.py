"""
Progress tracking for long-running sampling jobs.
"""
import threading
import time
from typing import Any, Dict

from loguru import logger

# Active sampling sessions keyed by run id
active_runs: Dict[str, Dict[str, Any]] = {}
_lock = threading.Lock()


def emit_sampling_progress(run_id: str, event_type: str, data: Dict[str, Any]):
    """
    Emit a progress event for a sampling run.

    Args:
        run_id: Identifier of the sampling session
        event_type: Kind of event (e.g. 'warmup', 'sampling', 'chain_complete')
        data: Event payload (chain, iteration, step size, divergences...)
    """
    with _lock:
        session = active_runs.get(run_id)
        if session is not None:
            session.setdefault("events", 0)
            session["events"] += 1
            session["last_event"] = {"event_type": event_type, **data}
            session["updated_at"] = time.time()

    details = " ".join(f"{key}={value}" for key, value in data.items())
    logger.info(f"[{run_id}] {event_type} {details}")


def add_active_run(run_id: str, session_data: Dict[str, Any]):
    """Start tracking a sampling session."""
    with _lock:
        active_runs[run_id] = {**session_data, "started_at": time.time()}
    logger.debug(f"Started tracking sampling run {run_id}")


def get_active_run(run_id: str) -> Dict[str, Any]:
    """Get data for an active sampling session."""
    with _lock:
        return dict(active_runs.get(run_id, {}))


def remove_active_run(run_id: str):
    """Stop tracking a finished session."""
    with _lock:
        session = active_runs.pop(run_id, None)
    if session is not None:
        elapsed = time.time() - session["started_at"]
        logger.debug(f"Stopped tracking sampling run {run_id} after {elapsed:.1f}s")
