from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

from src.helper.clock import log
from src.interfaces.client_executor import ClientExecutorInterface

T = TypeVar("T")
R = TypeVar("R")


class ThreadPoolClientExecutor(ClientExecutorInterface):
    """Runs client updates on a pool of worker threads.

    numpy releases the GIL inside its kernels, so local updates of different
    clients overlap. Results are returned in input order whatever order the
    workers finish in.
    """

    def __init__(self, threads: int):
        self.threads = threads
        self._pool = ThreadPoolExecutor(max_workers=threads, thread_name_prefix="client")
        log(f"ThreadPoolClientExecutor: started {threads} worker threads")

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        futures = [self._pool.submit(fn, item) for item in items]
        return [future.result() for future in futures]

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)
        log("ThreadPoolClientExecutor: workers stopped")
