"""Adam optimizer with L2-style weight decay.

Weight decay is added to the gradient before the moment updates (classic
Adam+L2, not the decoupled variant): g <- g + wd * p.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


@dataclass
class AdamState:
    """Per-parameter moment accumulators and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState) -> AdamState:
    """One Adam update, in place on the parameter tensors.

    Initializes zero moments on first use; `state.t` increases by exactly 1.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise DimensionError("adam_step: params/grads/state length mismatch")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise DimensionError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


class Adam:
    """Object wrapper around `adam_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1],
                               eps=eps, weight_decay=weight_decay)

    def step(self):
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads.append(g)
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def reset_moments(self):
        self.state.m = []
        self.state.v = []
        self.state.t = 0
