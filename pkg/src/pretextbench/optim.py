"""Adam optimizer over :class:`~pretextbench.tensor.Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    A ``None`` gradient is treated as zero (the moments still decay).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise DimensionError("adam_step: params, grads and moment buffers differ in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if m.shape != p.shape or (g is not None and np.shape(g) != p.shape):
            raise DimensionError(
                f"adam_step: parameter {p.shape} vs gradient "
                f"{None if g is None else np.shape(g)} vs moment {m.shape}"
            )
    state.step_count += 1
    t = state.step_count
    b1, b2 = DTYPE(state.beta1), DTYPE(state.beta2)
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    step_size = DTYPE(lr / c1)
    inv_c2 = DTYPE(1.0 / np.sqrt(c2))
    eps = DTYPE(state.epsilon)
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps), with one scratch buffer
        buf = np.multiply(g, 1 - b1)
        m *= b1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1 - b2
        v *= b2
        v += buf
        np.sqrt(v, out=buf)
        buf *= inv_c2
        buf += eps
        np.divide(m, buf, out=buf)
        buf *= step_size
        p.data -= buf
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
