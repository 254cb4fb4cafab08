"""
Order-preserving parallel map over independent work items.
"""

import os
import pickle
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from typing import Callable, List, Optional, Sequence, TypeVar

from loguru import logger
from tqdm import tqdm

T = TypeVar("T")
R = TypeVar("R")


def resolve_workers(workers: Optional[int]) -> int:
    """None or 0 means one worker per CPU."""
    if not workers:
        return os.cpu_count() or 1
    return max(1, int(workers))


def _run_serial(function: Callable[[T], R], items: Sequence[T], progress: bool, description: str) -> List[R]:
    return [function(item) for item in tqdm(items, desc=description, disable=not progress, file=sys.stderr)]


def map_ordered(
    function: Callable[[T], R],
    items: Sequence[T],
    workers: int = 1,
    chunksize: int = 1,
    progress: bool = False,
    description: str = "",
) -> List[R]:
    """
    Apply a picklable function to every item, returning results in item order.

    Results never depend on the worker count: each item must carry its own
    random stream. A process pool that cannot start or breaks falls back to
    serial execution.

    Args:
        function: Module-level callable (must pickle)
        items: Work items
        workers: Process count; 1 runs in-process
        chunksize: Items per pool task
        progress: Show a tqdm progress bar on stderr
        description: Progress bar label

    Returns:
        List of results aligned with items
    """
    items = list(items)
    mode = "parallel" if workers > 1 and len(items) > 1 else "serial"
    logger.debug(f"Mapping {len(items)} items in {mode} mode with {workers if mode == 'parallel' else 1} workers")
    start_time = time.time()

    if mode == "serial":
        results = _run_serial(function, items, progress, description)
    else:
        try:
            with ProcessPoolExecutor(max_workers=min(workers, len(items))) as executor:
                iterator = executor.map(function, items, chunksize=max(1, chunksize))
                results = list(tqdm(iterator, total=len(items), desc=description,
                                    disable=not progress, file=sys.stderr))
        except (BrokenProcessPool, OSError, pickle.PicklingError, AttributeError) as e:
            logger.warning(f"Parallel execution failed: {e}, falling back to serial mode")
            results = _run_serial(function, items, progress, description)

    elapsed = time.time() - start_time
    rate = len(items) / elapsed if elapsed > 0 else 0
    logger.debug(f"Completed {len(items)} items in {elapsed:.3f}s ({rate:,.1f} items/sec, {mode} mode)")
    return results
