import logging
import time
from contextlib import contextmanager

from django.conf import settings

logger = logging.getLogger("fsod.performance")


@contextmanager
def track_duration(label, threshold=None, **extra):
    """
    Log operations (episodes, evaluation groups) that run slower than the
    configured threshold.

    Yields a dict that receives the measured ``duration`` on exit.
    """
    threshold = threshold or getattr(settings, "FSOD_SLOW_EPISODE_SECONDS", 5.0)
    record = {}
    start = time.perf_counter()
    try:
        yield record
    finally:
        duration = time.perf_counter() - start
        record["duration"] = duration

        if duration >= threshold:
            log_data = {"label": label, "duration": f"{duration:.2f}s", **extra}
            logger.warning(f"Slow operation: {label} ({duration:.2f}s)", extra=log_data)

            if duration >= threshold * 5:
                logger.error(
                    f"Very slow operation: {label} ({duration:.2f}s)", extra=log_data
                )
