"""1-D diffusion transformer: tokens are trajectory rows, conditioning via adaptive LayerNorm."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..nn import LayerNorm, Linear, Module, TimestepEmbedding
from ..tensor import Tensor, parameter
from .common import ConditionEmbedding, check_cond, timesteps
from .spec import DenoiserSpec


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    # shift/scale: [B, hidden] broadcast over tokens
    B, hd = shift.shape
    return x * (T.reshape(scale, (B, 1, hd)) + 1.0) + T.reshape(shift, (B, 1, hd))


class SelfAttention(Module):
    def __init__(self, hidden: int, head_dim: int, rng: np.random.Generator):
        self.heads = hidden // head_dim
        self.head_dim = head_dim
        self.qkv = Linear(hidden, 3 * hidden, rng)
        self.proj = Linear(hidden, hidden, rng)
        self.last_weights: np.ndarray | None = None

    def forward(self, x: Tensor, capture: bool = False) -> Tensor:
        B, H, hd = x.shape
        qkv = T.transpose(T.reshape(self.qkv(x), (B, H, 3, self.heads, self.head_dim)), (2, 0, 3, 1, 4))
        out = T.attention(qkv[0], qkv[1], qkv[2], capture=capture)
        if capture:
            self.last_weights = out.cache.mean(axis=1)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, H, hd))
        return self.proj(out)


class FeedForward(Module):
    def __init__(self, hidden: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(hidden, hidden * ratio, rng)
        self.fc2 = Linear(hidden * ratio, hidden, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class DiTBlock(Module):
    def __init__(self, hidden: int, head_dim: int, ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(hidden, affine=False)
        self.attn = SelfAttention(hidden, head_dim, rng)
        self.norm2 = LayerNorm(hidden, affine=False)
        self.mlp = FeedForward(hidden, ratio, rng)
        # adaLN-Zero: the block starts as the identity
        self.ada = Linear(hidden, 6 * hidden, rng, zero=True)
        self.hidden = hidden

    def forward(self, x: Tensor, c: Tensor, capture: bool = False) -> Tensor:
        hd = self.hidden
        mod = self.ada(T.silu(c))
        sh1, sc1, g1 = mod[:, :hd], mod[:, hd : 2 * hd], mod[:, 2 * hd : 3 * hd]
        sh2, sc2, g2 = mod[:, 3 * hd : 4 * hd], mod[:, 4 * hd : 5 * hd], mod[:, 5 * hd :]
        B = x.shape[0]
        x = x + T.reshape(g1, (B, 1, hd)) * self.attn(modulate(self.norm1(x), sh1, sc1), capture)
        x = x + T.reshape(g2, (B, 1, hd)) * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x


class DiT1D(Module):
    """x: [B, H, D] -> [B, H, D]; ``attention_maps`` holds head-averaged weights after a captured call."""

    def __init__(self, spec: DenoiserSpec, x_dim: int, horizon: int, rng: np.random.Generator):
        self.spec = spec
        self.x_dim = x_dim
        self.horizon = horizon
        h = spec.hidden
        self.embed = Linear(x_dim, h, rng)
        self.pos = parameter(rng.normal(0.0, 0.02, (horizon, h)))
        self.time = TimestepEmbedding(h, rng)
        self.cond = ConditionEmbedding(spec.cond_dim, h, rng) if spec.cond_dim else None
        self.blocks = [DiTBlock(h, spec.head_dim, spec.mlp_ratio, rng) for _ in range(spec.blocks)]
        self.final_norm = LayerNorm(h, affine=False)
        self.final_ada = Linear(h, 2 * h, rng, zero=True)
        self.out = Linear(h, x_dim, rng, zero=True)

    def forward(self, x, t, cond=None, drop=None, capture_attention: bool = False) -> Tensor:
        x = T.as_tensor(x)
        B, H, D = x.shape
        if D != self.x_dim or H != self.horizon:
            raise ValueError(f"expected input [B, {self.horizon}, {self.x_dim}], got {x.shape}")
        c = self.time(timesteps(t, B))
        cc = check_cond(cond, self.spec.cond_dim, B)
        if self.cond is not None:
            c = c + self.cond(cc, drop, B)
        h = self.embed(x) + self.pos
        for blk in self.blocks:
            h = blk(h, c, capture_attention)
        hd = self.spec.hidden
        mod = self.final_ada(T.silu(c))
        h = modulate(self.final_norm(h), mod[:, :hd], mod[:, hd:])
        return self.out(h)

    def attention_maps(self) -> list[np.ndarray]:
        """Per-layer [B, H, H] head-averaged weights from the last captured forward."""
        maps = [blk.attn.last_weights for blk in self.blocks]
        if any(m is None for m in maps):
            raise RuntimeError("no attention captured; call with capture_attention=True")
        return maps


def dit1d_denoise(model: DiT1D, x, t, cond=None, capture_attention: bool = False):
    out = model(x, t, cond, capture_attention=capture_attention)
    return out, (model.attention_maps() if capture_attention else None)
