from abc import ABC, abstractmethod
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from src.app.nn import Gradients, ModelParams


class OptimizerInterface(ABC):
    @abstractmethod
    def reset(self) -> None:
        """Forget any accumulated state (called at the start of every local round)"""
        pass

    @abstractmethod
    def step(self, params: "ModelParams", grads: "Gradients") -> "ModelParams":
        """Return the parameters after one update with `grads`"""
        pass
