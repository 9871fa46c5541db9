"""Trajectory critics (return regressors) and inverse-dynamics networks."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..nn import MLP, LayerNorm, Linear, Module, TimestepEmbedding
from ..tensor import Tensor, parameter
from .common import timesteps
from .dit1d import FeedForward, SelfAttention
from .mlp import MLPDenoiser
from .spec import DenoiserSpec
from .unet1d import UNetEncoder


class UNetCritic(Module):
    """U-Net1D down path, mean-pooled over time, then a linear value head."""

    def __init__(self, spec: DenoiserSpec, x_dim: int, rng: np.random.Generator, noised: bool = False):
        self.encoder = UNetEncoder(spec, x_dim, rng)
        self.head = Linear(self.encoder.mid_dim, 1, rng)
        self.noised = noised

    def forward(self, x, t=None) -> Tensor:
        x = T.as_tensor(x)
        B, H, _ = x.shape
        self.encoder.check_horizon(H)
        emb = self.encoder.embed(np.zeros(B, dtype=np.int64) if t is None else t, None, None, B)
        h, _ = self.encoder(T.transpose(x, (0, 2, 1)), emb)
        return T.reshape(self.head(T.mean(h, axis=2)), (B,))


class TransformerBlock(Module):
    def __init__(self, hidden: int, head_dim: int, rng: np.random.Generator, ratio: int = 4):
        self.norm1 = LayerNorm(hidden)
        self.attn = SelfAttention(hidden, head_dim, rng)
        self.norm2 = LayerNorm(hidden)
        self.mlp = FeedForward(hidden, ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerCritic(Module):
    """Pre-LN transformer; the value is a linear projection of the first token."""

    def __init__(self, x_dim: int, horizon: int, rng: np.random.Generator, hidden: int = 64, blocks: int = 2,
                 head_dim: int = 32, noised: bool = False):
        self.embed = Linear(x_dim, hidden, rng)
        self.pos = parameter(rng.normal(0.0, 0.02, (horizon, hidden)))
        self.time = TimestepEmbedding(hidden, rng) if noised else None
        self.blocks = [TransformerBlock(hidden, head_dim, rng) for _ in range(blocks)]
        self.norm = LayerNorm(hidden)
        self.head = Linear(hidden, 1, rng)
        self.hidden = hidden
        self.noised = noised

    def forward(self, x, t=None) -> Tensor:
        x = T.as_tensor(x)
        B = x.shape[0]
        h = self.embed(x) + self.pos
        if self.time is not None:
            tt = np.zeros(B, dtype=np.int64) if t is None else timesteps(t, B)
            h = h + T.reshape(self.time(tt), (B, 1, self.hidden))
        for blk in self.blocks:
            h = blk(h)
        return T.reshape(self.head(self.norm(h[:, 0])), (B,))


class RegressionInvDyn(Module):
    """Plain MLP inverse dynamics: (s, s') -> a."""

    def __init__(self, in_dim: int, act_dim: int, rng: np.random.Generator, hidden: int = 256):
        self.net = MLP([in_dim, hidden, hidden, act_dim], rng)

    def forward(self, pair) -> Tensor:
        return self.net(T.as_tensor(pair))


def diffusion_invdyn(in_dim: int, act_dim: int, rng: np.random.Generator, hidden: int = 256) -> MLPDenoiser:
    """Action-diffusion MLP conditioned on the (s, s') pair."""
    spec = DenoiserSpec(backbone="MLP", hidden=hidden, head_dim=1, cond_dim=in_dim)
    return MLPDenoiser(spec, act_dim, rng)
