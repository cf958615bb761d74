import src.config as config
from src.app.errors import DimensionMismatch
from src.app.nn import Gradients, ModelParams
from src.interfaces.optimizer import OptimizerInterface


class SgdOptimizer(OptimizerInterface):
    """Plain gradient step w <- w - eta * g; no state between steps."""

    def __init__(self, learning_rate: float = config.SGD_LEARNING_RATE):
        self.learning_rate = learning_rate

    def reset(self) -> None:
        pass

    def step(self, params: ModelParams, grads: Gradients) -> ModelParams:
        if not params.same_shape(grads):
            raise DimensionMismatch(f"SGD shapes differ: params {params.layer_widths}, grads {grads.layer_widths}")
        return params.map(lambda w, g: w - self.learning_rate * g, grads)
