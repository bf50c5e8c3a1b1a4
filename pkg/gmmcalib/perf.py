import logging
from contextlib import contextmanager
from time import perf_counter

logger = logging.getLogger(__name__)


@contextmanager
def timer(description: str | None = None):
    """Context manager for logging the execution time of code blocks.

    Args:
        description: Optional description of what is being timed

    Yields:
        None

    Example:
        with timer("Joint registration"):
            joint_register(observations, config)
    """
    start = perf_counter()
    try:
        yield
    finally:
        elapsed = (perf_counter() - start) * 1000
        if description:
            logger.info(f"{description}: {elapsed:.1f} ms")
        else:
            logger.info(f"Elapsed time: {elapsed:.1f} ms")
