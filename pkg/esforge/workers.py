"""
Thread pool for independent evaluations.

Named worker threads (`Worker-<i>`) drain a shared queue of indexed jobs and
store results by index, so output order never depends on scheduling. With a
single worker the jobs run inline on the calling thread.
"""

import logging
import queue
import threading
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

from esforge.constants import ESFORGE_THREADS

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# Seconds a worker waits on an empty queue before re-checking for shutdown
WORKER_POLL_TIMEOUT = 0.1


class WorkerPool:
    """
    Runs `fn(item)` for every item across a fixed number of threads.

    Usage:
        pool = WorkerPool(workers=4)
        rewards = pool.map(evaluate_member, range(population_size))
    """

    def __init__(self, workers: Optional[int] = None, name: str = "pool"):
        """
        Initialize the pool.

        Args:
            workers: Thread count; defaults to ESFORGE_THREADS
            name: Label used in log messages
        """
        self.workers = max(1, int(workers if workers is not None else ESFORGE_THREADS))
        self.name = name

    @property
    def is_serial(self) -> bool:
        return self.workers == 1

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """
        Apply fn to every item; results come back in item order.

        Raises:
            Exception: The error of the lowest-index failing item, after all
                workers have stopped
        """
        items = list(items)
        if self.is_serial or len(items) <= 1:
            return [fn(item) for item in items]

        jobs: "queue.Queue[Tuple[int, T]]" = queue.Queue()
        for index, item in enumerate(items):
            jobs.put((index, item))

        results: List[Optional[R]] = [None] * len(items)
        errors: List[Tuple[int, BaseException]] = []
        errors_lock = threading.Lock()
        stop = threading.Event()

        def worker_loop() -> None:
            thread_name = threading.current_thread().name
            logger.debug(f"[{self.name}] {thread_name} started")
            while not stop.is_set():
                try:
                    index, item = jobs.get(timeout=WORKER_POLL_TIMEOUT)
                except queue.Empty:
                    break
                try:
                    results[index] = fn(item)
                except BaseException as e:
                    with errors_lock:
                        errors.append((index, e))
                    stop.set()
                finally:
                    jobs.task_done()
            logger.debug(f"[{self.name}] {thread_name} stopped")

        threads = []
        for i in range(min(self.workers, len(items))):
            worker = threading.Thread(target=worker_loop, name=f"Worker-{i}", daemon=True)
            worker.start()
            threads.append(worker)
        for worker in threads:
            worker.join()

        if errors:
            index, error = min(errors, key=lambda pair: pair[0])
            logger.error(f"[{self.name}] job {index} failed: {error}")
            raise error
        return results  # type: ignore[return-value]
