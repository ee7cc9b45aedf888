import logging
import multiprocessing
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, List, Optional, Sequence

logger = logging.getLogger(__name__)

# Rows per work item. Fixed so that results never depend on the worker count.
DEFAULT_CHUNK_ROWS = 16


class ThreadPool:
    """Thread pool for row-parallel quantization work with deterministic chunking."""

    def __init__(self, max_workers: Optional[int] = None):
        """
        Initialize thread pool.

        Args:
            max_workers: Maximum number of worker threads. If None, uses CPU count
                (capped at 8). A value of 1 runs everything on the calling thread.
        """
        self.max_workers = max(1, max_workers or min(multiprocessing.cpu_count(), 8))
        self.executor = ThreadPoolExecutor(max_workers=self.max_workers) if self.max_workers > 1 else None

    @staticmethod
    def create_batches(n_items: int, batch_size: int = DEFAULT_CHUNK_ROWS) -> List[slice]:
        """Split range(n_items) into consecutive slices of at most batch_size."""
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        return [slice(i, min(i + batch_size, n_items)) for i in range(0, n_items, batch_size)]

    def map_ordered(self, func: Callable, items: Sequence, *args, **kwargs) -> List[Any]:
        """
        Execute func over items in parallel and return results in input order.

        Args:
            func: Function called as func(item, *args, **kwargs)
            items: Items to process
            *args, **kwargs: Additional arguments for the function

        Returns:
            List of results aligned with items. The first worker exception is re-raised.
        """
        if not items:
            return []
        if self.executor is None or len(items) == 1:
            return [func(item, *args, **kwargs) for item in items]

        futures = [self.executor.submit(func, item, *args, **kwargs) for item in items]
        return [future.result() for future in futures]

    def map_rows(self, func: Callable, n_rows: int, *args, batch_size: int = DEFAULT_CHUNK_ROWS, **kwargs) -> List[Any]:
        """Run func(row_slice, *args) over fixed-size row batches, results in row order."""
        return self.map_ordered(func, self.create_batches(n_rows, batch_size), *args, **kwargs)

    def shutdown(self, wait: bool = True) -> None:
        """Shutdown the thread pool."""
        if self.executor is not None:
            self.executor.shutdown(wait=wait)
            self.executor = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.shutdown()


_serial_pool: Optional[ThreadPool] = None


def get_serial_pool() -> ThreadPool:
    """Shared single-threaded pool used when callers pass none."""
    global _serial_pool
    if _serial_pool is None:
        _serial_pool = ThreadPool(max_workers=1)
    return _serial_pool
