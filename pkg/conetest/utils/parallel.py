import logging
from concurrent.futures import ThreadPoolExecutor

logger = logging.getLogger(__name__)


def ordered_map(func, items, workers=1):
    """
    Apply func to every item, optionally on a thread pool

    Results come back in input order whatever the worker count, so callers
    that seed each item by its index get identical output for any `workers`.

    Args:
        func (callable): Function of one item
        items (iterable): Work items
        workers (int): Number of threads; 1 runs inline

    Returns:
        list: func(item) for each item, in order
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    logger.debug(f"Running {len(items)} tasks on {workers} threads")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def chunked(n, size):
    """Split range(n) into consecutive (start, stop) pairs of at most `size`"""
    return [(start, min(start + size, n)) for start in range(0, n, size)]
