"""
Parameter update rules.

Each step reads ``param.grad`` and re-points the trainable leaf at its updated
values via ``Tensor.assign``. State lives in plain dataclasses keyed by
parameter name so a training run can be inspected or restarted.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from shrinknet.options import OptimizerKind, TrainOptions
from shrinknet.tensor import Tensor
from shrinknet.util import DimensionError, DivergenceError


@dataclass
class AdamState:
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class SgdState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def _checked_grad(name: str, param: Tensor) -> np.ndarray:
    grad = param.grad if param.grad is not None else np.zeros(param.shape, param.dtype)
    if grad.shape != param.shape:
        raise DimensionError(
            f"gradient of {name} has shape {list(grad.shape)}, parameter has {list(param.shape)}"
        )
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(
            f"non-finite gradient for parameter {name}; try a smaller learning rate",
            parameter=name,
        )
    return grad


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """
    One bias-corrected Adam update of every parameter.

    All gradients are checked before any parameter moves, so a divergence
    leaves the model at its previous values.
    """
    grads = {name: _checked_grad(name, p) for name, p in params.items()}
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param in params.items():
        grad = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = grad * (1 - beta1) if m is None else beta1 * m + (1 - beta1) * grad
        v = grad * grad * (1 - beta2) if v is None else beta2 * v + (1 - beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.assign(param.values - update.astype(param.dtype))
    return state


def sgd_step(
    params: Mapping[str, Tensor],
    state: SgdState,
    lr: float = 1e-2,
    momentum: float = 0.0,
) -> SgdState:
    grads = {name: _checked_grad(name, p) for name, p in params.items()}
    for name, param in params.items():
        velocity = state.velocity.get(name)
        velocity = grads[name] if velocity is None else momentum * velocity + grads[name]
        state.velocity[name] = velocity
        param.assign(param.values - (lr * velocity).astype(param.dtype))
    return state


class Optimizer:
    """Binds an update rule, its hyperparameters and its state to a parameter set."""

    def __init__(self, params: Mapping[str, Tensor], options: TrainOptions):
        self.params = dict(params)
        self.kind = options.optimizer
        self.learning_rate = options.learning_rate
        self.momentum = options.momentum
        self.state = AdamState() if self.kind is OptimizerKind.adam else SgdState()

    def step(self) -> None:
        if isinstance(self.state, AdamState):
            adam_step(self.params, self.state, self.learning_rate)
        else:
            sgd_step(self.params, self.state, self.learning_rate, self.momentum)
