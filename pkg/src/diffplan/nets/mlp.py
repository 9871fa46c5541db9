from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..nn import MLP, Module, TimestepEmbedding
from ..tensor import Tensor
from .common import check_cond, timesteps
from .spec import DenoiserSpec


class MLPDenoiser(Module):
    """3-layer MLP over [x, time embedding, condition] with a 2-layer time embedding.

    Inputs of rank > 2 are flattened per example and reshaped back, so the
    same body serves as a trajectory backbone and as the action-diffusion
    head of the inverse dynamics.
    """

    def __init__(self, spec: DenoiserSpec, x_dim: int, rng: np.random.Generator, t_dim: int = 32):
        self.spec = spec
        self.x_dim = x_dim
        self.time = TimestepEmbedding(t_dim, rng)
        if spec.cond_dim:
            self.null = T.parameter(rng.normal(0.0, 0.02, spec.cond_dim))
        h = spec.hidden
        self.body = MLP([x_dim + t_dim + spec.cond_dim, h, h, x_dim], rng)

    def forward(self, x, t, cond=None, drop=None) -> Tensor:
        x = T.as_tensor(x)
        B = x.shape[0]
        flat = T.reshape(x, (B, -1))
        if flat.shape[1] != self.x_dim:
            raise ValueError(f"expected {self.x_dim} features per example, got {flat.shape[1]}")
        c = check_cond(cond, self.spec.cond_dim, B)
        parts = [flat, self.time(timesteps(t, B))]
        if self.spec.cond_dim:
            null = T.mul(T.reshape(self.null, (1, -1)), np.ones((B, 1)))
            if c is None:
                c = null
            elif drop is not None:
                c = T.where(np.asarray(drop, dtype=bool).reshape(-1, 1), null, c)
            parts.append(c)
        out = self.body(T.concat(parts, axis=1))
        return T.reshape(out, x.shape)


def mlp_denoise(model: MLPDenoiser, x, t, cond=None) -> Tensor:
    return model(x, t, cond)
