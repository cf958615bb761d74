from abc import ABC, abstractmethod
from typing import Callable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


class ClientExecutorInterface(ABC):
    @abstractmethod
    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Apply fn to every item; results come back in input order"""
        pass

    @abstractmethod
    def shutdown(self) -> None:
        """Release any worker resources"""
        pass
