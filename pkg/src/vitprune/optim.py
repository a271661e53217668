"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float) -> float:
    """Cosine decay from ``base_lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    if total_steps < 1:
        raise UsageError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise UsageError(f"step must be >= 0, got {step}")
    if step >= total_steps:
        return min_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators plus the shared step counter."""

    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adaptive-moment updates with bias correction and decoupled decay.

    Weight decay multiplies the parameter by ``1 - lr * wd`` before the
    moment update and is applied only to parameters registered with
    ``decay=True`` (projection weights; never gates, biases, or norms).
    """

    def __init__(self, params: list[tuple[str, Tensor, bool]],
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()
        for name, tensor, _ in self.params:
            self.state.first_moment[name] = np.zeros_like(tensor.data)
            self.state.second_moment[name] = np.zeros_like(tensor.data)

    def zero_grad(self) -> None:
        for _, tensor, _ in self.params:
            tensor.grad = None

    def step(self, lr_now: float) -> None:
        """Apply one update using the current gradients at rate ``lr_now``."""
        if lr_now < 0:
            raise UsageError(f"learning rate must be >= 0, got {lr_now}")
        self.state.step += 1
        t = self.state.step
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, tensor, decay in self.params:
            grad = tensor.grad
            if grad is None:
                grad = np.zeros_like(tensor.data)
            if grad.shape != tensor.data.shape:
                raise UsageError(
                    f"gradient shape {grad.shape} does not match parameter "
                    f"'{name}' shape {tensor.data.shape}")
            if decay and self.weight_decay:
                tensor.data *= 1.0 - lr_now * self.weight_decay
            m = self.state.first_moment[name]
            v = self.state.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            tensor.data -= lr_now * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step": self.state.step,
            "first_moment": {k: v.copy() for k, v in self.state.first_moment.items()},
            "second_moment": {k: v.copy() for k, v in self.state.second_moment.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.state.step = int(state["step"])
        for name, _, _ in self.params:
            self.state.first_moment[name] = np.array(state["first_moment"][name],
                                                     dtype=np.float64)
            self.state.second_moment[name] = np.array(state["second_moment"][name],
                                                      dtype=np.float64)
