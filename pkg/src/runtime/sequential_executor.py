from typing import Callable, List, Sequence, TypeVar

from src.interfaces.client_executor import ClientExecutorInterface

T = TypeVar("T")
R = TypeVar("R")


class SequentialExecutor(ClientExecutorInterface):
    """Runs client updates one after another in the calling thread"""

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        return [fn(item) for item in items]

    def shutdown(self) -> None:
        pass
