from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

import src.config as config
from src.app.errors import DimensionMismatch
from src.app.nn import Gradients, ModelParams
from src.interfaces.optimizer import OptimizerInterface


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = config.ADAM_LEARNING_RATE
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    epsilon: float = config.ADAM_EPSILON


@dataclass(frozen=True)
class AdamState:
    m: ModelParams
    v: ModelParams
    step_count: int = 0
    hyper: AdamHyper = AdamHyper()

    @classmethod
    def fresh(cls, params: ModelParams, hyper: Optional[AdamHyper] = None) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, hyper or AdamHyper())


def adam_step(params: ModelParams, grads: Gradients, state: AdamState) -> Tuple[ModelParams, AdamState]:
    """One Adam update with bias correction; inputs are left untouched.

    Raises:
        DimensionMismatch: grads or moments do not have the parameter shapes
    """
    if not (params.same_shape(grads) and params.same_shape(state.m) and params.same_shape(state.v)):
        raise DimensionMismatch(f"Adam shapes differ: params {params.layer_widths}, grads {grads.layer_widths}")

    hyper = state.hyper
    t = state.step_count + 1
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t

    m = state.m.map(lambda m_, g: hyper.beta1 * m_ + (1.0 - hyper.beta1) * g, grads)
    v = state.v.map(lambda v_, g: hyper.beta2 * v_ + (1.0 - hyper.beta2) * (g * g), grads)
    updated = params.map(
        lambda w, m_, v_: w - hyper.learning_rate * (m_ / bc1) / (np.sqrt(v_ / bc2) + hyper.epsilon),
        m,
        v,
    )
    return updated, AdamState(m, v, t, hyper)


class AdamOptimizer(OptimizerInterface):
    """Adam owning its state; moments are created lazily from the first params seen."""

    def __init__(self, hyper: Optional[AdamHyper] = None):
        self.hyper = hyper or AdamHyper()
        self.state: Optional[AdamState] = None

    def reset(self) -> None:
        self.state = None

    def step(self, params: ModelParams, grads: Gradients) -> ModelParams:
        if self.state is None:
            self.state = AdamState.fresh(params, self.hyper)
        params, self.state = adam_step(params, grads, self.state)
        return params
