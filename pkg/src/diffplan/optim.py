"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """Apply one Adam update in place and return the (mutated) state."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data, dtype=DTYPE) for p in self.params]
        adam_step(self.params, grads, self.state)


def fit(model, loss_fn, steps: int, lr: float = 3e-4, log_every: int = 0, log=None) -> list[float]:
    """Run ``steps`` Adam updates on ``loss_fn(step) -> scalar Tensor``; returns the loss trace."""
    from .tensor import backward

    params = model.parameters()
    opt = Adam(params, lr=lr)
    trace = []
    for step in range(steps):
        loss = loss_fn(step)
        opt.zero_grad()
        backward(loss, params)
        opt.step()
        trace.append(loss.item())
        if log is not None and log_every and (step % log_every == 0 or step == steps - 1):
            log(step, trace[-1])
    return trace
