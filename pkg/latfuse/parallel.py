"""Worker-count configuration and deterministic fan-out."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "LATFUSE_THREADS"

_num_threads: Optional[int] = None


def _threads_from_env() -> int:
    value = os.getenv(THREADS_ENV)
    if not value:
        return 1
    try:
        threads = int(value)
    except ValueError:
        logger.warning("Ignoring %s=%r: not an integer", THREADS_ENV, value)
        return 1
    return max(threads, 1)


def set_num_threads(threads: Optional[int]) -> None:
    """Cap the worker count; None falls back to LATFUSE_THREADS, then 1"""
    global _num_threads
    if threads is not None and threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    _num_threads = threads


def get_num_threads() -> int:
    if _num_threads is not None:
        return _num_threads
    return _threads_from_env()


def map_ordered(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """
    Apply `fn` to each item, returning results in input order.

    Each item is handled by exactly one worker, so as long as `fn` is
    sequential inside, results do not depend on the worker count.
    """
    items = list(items)
    threads = min(get_num_threads(), len(items))
    if threads <= 1:
        return [fn(item) for item in items]
    logger.debug("Fanning %d tasks out to %d workers", len(items), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
