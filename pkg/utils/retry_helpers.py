"""
Bounded retry utilities for numerical initialisation.

Each attempt draws a new candidate at a jitter radius that shrinks
geometrically with the attempt count.
"""

from typing import Any, Callable, Optional, Tuple

from loguru import logger

from models.errors import InitializationFailure


class RetryableError(Exception):
    """Base exception for attempts that may succeed with a fresh candidate."""
    pass


class NonFiniteCandidate(RetryableError):
    """The candidate point evaluated to a non-finite value or gradient."""
    pass


def exponential_backoff_sync(
    func: Callable,
    *args,
    max_retries: int = 100,
    initial_radius: float = 2.0,
    min_radius: float = 1e-3,
    shrink_base: float = 2.0,
    shrink_every: int = 10,
    retryable_exceptions: Optional[Tuple[type, ...]] = None,
    **kwargs
) -> Any:
    """
    Call ``func(radius, attempt, *args, **kwargs)`` until it succeeds.

    Args:
        func: Function producing a candidate at the given jitter radius
        max_retries: Maximum number of attempts
        initial_radius: Jitter radius of the first attempt
        min_radius: Lower bound on the radius
        shrink_base: Factor the radius is divided by every ``shrink_every`` attempts
        shrink_every: Attempts between radius reductions
        retryable_exceptions: Exception types that trigger another attempt

    Returns:
        The result of the first successful call

    Raises:
        InitializationFailure: All attempts raised a retryable exception
    """
    if retryable_exceptions is None:
        retryable_exceptions = (RetryableError, FloatingPointError)

    last_exception: Optional[BaseException] = None
    for attempt in range(max_retries):
        radius = max(initial_radius / shrink_base ** (attempt // shrink_every), min_radius)
        try:
            result = func(radius, attempt, *args, **kwargs)
            if attempt > 0:
                logger.info(f"Initialisation succeeded on attempt {attempt + 1} (radius {radius:.3g})")
            return result
        except retryable_exceptions as e:
            last_exception = e
            logger.debug(f"Attempt {attempt + 1} failed for {func.__name__}: {e}")

    logger.error(f"All {max_retries} initialisation attempts exhausted for {func.__name__}")
    raise InitializationFailure(
        f"No finite starting point found after {max_retries} attempts (last error: {last_exception})"
    )
