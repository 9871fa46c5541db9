from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..nn import Linear, Module
from ..tensor import Tensor, parameter


class ConditionEmbedding(Module):
    """Projects a condition vector to ``dim``; dropped rows use a learned null token.

    The null token is a parameter rather than a zero vector so that a
    legitimate condition value of 0 stays distinguishable from "no condition".
    """

    def __init__(self, cond_dim: int, dim: int, rng: np.random.Generator):
        self.cond_dim = cond_dim
        self.proj = Linear(cond_dim, dim, rng)
        self.null = parameter(rng.normal(0.0, 0.02, dim))

    def forward(self, cond, drop, batch: int) -> Tensor:
        null = T.reshape(self.null, (1, -1))
        if cond is None:
            return T.mul(null, np.ones((batch, 1)))
        c = self.proj(T.as_tensor(cond))
        if drop is None:
            return c
        mask = np.asarray(drop, dtype=bool).reshape(-1, 1)
        return T.where(mask, null, c)


def check_cond(cond, cond_dim: int, batch: int):
    if cond is None:
        return None
    if cond_dim == 0:
        raise ValueError("condition given to a model built with cond_dim=0")
    c = T.as_tensor(cond)
    if c.shape != (batch, cond_dim):
        raise ValueError(f"condition must have shape ({batch}, {cond_dim}), got {c.shape}")
    return c


def timesteps(t, batch: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.ndim == 0:
        t = np.full(batch, int(t))
    if t.shape != (batch,):
        raise ValueError(f"timesteps must have shape ({batch},), got {t.shape}")
    return t
