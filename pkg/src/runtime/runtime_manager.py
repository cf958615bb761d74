from typing import Optional

import src.config as config
from src.app.errors import InvalidConfig
from src.helper.clock import log
from src.interfaces.client_executor import ClientExecutorInterface
from src.interfaces.optimizer import OptimizerInterface


class RuntimeManager:
    """Loads the pluggable pieces of a training run.

    Local training talks to an OptimizerInterface and the federated loop
    hands client work to a ClientExecutorInterface. This class picks the
    concrete implementation from the run configuration, so fed.py never
    imports a specific optimizer or executor.
    """

    def load_optimizer(
        self,
        name: str = config.LOCAL_OPTIMIZER,
        learning_rate: Optional[float] = None,
        beta1: float = config.ADAM_BETA1,
        beta2: float = config.ADAM_BETA2,
        epsilon: float = config.ADAM_EPSILON,
    ) -> OptimizerInterface:
        """Load the local optimizer by name.

        "adam" returns the Adam optimizer used by the demand model; "sgd"
        returns the literal w - eta * g step of the FedAvg local update.

        Returns:
            An instance of either AdamOptimizer or SgdOptimizer
        """
        if name == "adam":
            from src.optimizer.adam_optimizer import AdamHyper, AdamOptimizer

            rate = config.LEARNING_RATE if learning_rate is None else learning_rate
            log(f"RuntimeManager: loading Adam optimizer (lr={rate}, beta1={beta1}, beta2={beta2}, eps={epsilon})")
            return AdamOptimizer(AdamHyper(rate, beta1, beta2, epsilon))
        if name == "sgd":
            from src.optimizer.sgd_optimizer import SgdOptimizer

            rate = config.SGD_LEARNING_RATE if learning_rate is None else learning_rate
            log(f"RuntimeManager: loading SGD optimizer (lr={rate})")
            return SgdOptimizer(rate)
        raise InvalidConfig("model.local_optimizer", f"expected 'adam' or 'sgd', got {name!r}")

    def load_executor(self, threads: int = 1) -> ClientExecutorInterface:
        """Load the client executor for `threads` workers.

        One thread keeps everything in the calling thread; more threads use a
        pool. Both return results in input order.

        Returns:
            An instance of either SequentialExecutor or ThreadPoolClientExecutor
        """
        if threads < 1:
            raise InvalidConfig("threads", f"must be >= 1, got {threads}")
        if threads == 1:
            from src.runtime.sequential_executor import SequentialExecutor

            log("RuntimeManager: loading sequential client executor")
            return SequentialExecutor()
        from src.runtime.thread_pool_executor import ThreadPoolClientExecutor

        log(f"RuntimeManager: loading thread pool client executor ({threads} threads)")
        return ThreadPoolClientExecutor(threads)
