import json
import uuid
from datetime import datetime, timezone
from typing import Any, Dict, Optional

import numpy as np
from loguru import logger
from scipy.special import expit

UTC = timezone.utc  # alias of datetime.UTC (3.11+); keeps 3.10 compatible


def generate_run_id(prefix: str = "run") -> str:
    """Generate a unique run identifier."""
    return f"{prefix}_{uuid.uuid4().hex[:12]}"


def create_timestamp() -> str:
    """Create a formatted timestamp."""
    return datetime.now(UTC).isoformat()


def log_step(step: str, details: Dict[str, Any], result: Optional[Dict[str, Any]] = None):
    """Log a pipeline step with timestamps."""
    logger.info(f"Step - {step} - {create_timestamp()}")
    logger.debug(f"Inputs: {json.dumps(details, indent=2, default=str)}")
    if result:
        logger.debug(f"Result: {json.dumps(result, indent=2, default=str)}")


def invlogit(x):
    """Inverse logit link."""
    return expit(x)


def central_interval(values: np.ndarray, mass: float = 0.95, axis: int = 0):
    """Lower and upper quantiles of the central interval holding ``mass``."""
    tail = (1.0 - mass) / 2.0
    lower, upper = np.quantile(values, [tail, 1.0 - tail], axis=axis)
    return lower, upper


def child_rngs(seed: int, n: int):
    """Independent generators derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
