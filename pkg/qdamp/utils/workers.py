"""Ordered thread-pool map for independent scan points and trajectories."""
import logging
from concurrent.futures import ThreadPoolExecutor

from qdamp.config import get_setting

logger = logging.getLogger(__name__)


def map_ordered(fn, items, threads=None):
    """
    Apply fn to every item and return results in input order.
    threads <= 1 runs inline; exceptions propagate from the first failing item.
    """
    items = list(items)
    threads = get_setting('DEFAULT_THREADS') if threads is None else int(threads)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    logger.info('running %d tasks on %d threads', len(items), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, item) for item in items]
        return [f.result() for f in futures]
