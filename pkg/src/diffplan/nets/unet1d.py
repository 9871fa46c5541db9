"""Temporal 1-D U-Net in the Diffuser lineage: conv residual blocks with FiLM time injection."""

from __future__ import annotations

import math

import numpy as np

from .. import tensor as T
from ..nn import Conv1d, GroupNorm, Linear, MLP, Module, sinusoidal_embedding
from ..tensor import Tensor
from .common import ConditionEmbedding, check_cond, timesteps
from .spec import DenoiserSpec


def _groups(channels: int, preferred: int = 8) -> int:
    return math.gcd(channels, preferred)


class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        self.conv = Conv1d(c_in, c_out, kernel, rng)
        self.norm = GroupNorm(_groups(c_out), c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.mish(self.norm(self.conv(x)))


class ResidualBlock(Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, kernel: int, rng: np.random.Generator):
        self.block1 = ConvBlock(c_in, c_out, kernel, rng)
        self.block2 = ConvBlock(c_out, c_out, kernel, rng)
        self.film = Linear(emb_dim, 2 * c_out, rng)
        self.skip = Conv1d(c_in, c_out, 1, rng) if c_in != c_out else None
        self.c_out = c_out

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.block1(x)
        ss = T.reshape(self.film(T.mish(emb)), (emb.shape[0], 2 * self.c_out, 1))
        scale, shift = ss[:, : self.c_out], ss[:, self.c_out :]
        h = h * (scale + 1.0) + shift
        h = self.block2(h)
        return h + (self.skip(x) if self.skip is not None else x)


class Downsample(Module):
    """Conv(k=3) evaluated at every other position (stride-2 conv, padding 1)."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.conv = Conv1d(c, c, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)[:, :, ::2]


class Upsample(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        self.conv = Conv1d(c, c, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.repeat(x, 2, axis=2))


def min_horizon(channel_mult) -> int:
    return 2 ** (len(channel_mult) - 1)


class UNetEncoder(Module):
    """Time embedding, down path and middle blocks; shared by the denoiser and the U-Net critic."""

    def __init__(self, spec: DenoiserSpec, in_dim: int, rng: np.random.Generator):
        self.spec = spec
        base = spec.base_channels
        dims = [in_dim] + [base * m for m in spec.channel_mult]
        self.in_out = list(zip(dims[:-1], dims[1:]))
        self.emb_dim = base
        self.time_mlp = MLP([base, base * 4, base], rng)
        self.cond = ConditionEmbedding(spec.cond_dim, base, rng) if spec.cond_dim else None
        n = len(self.in_out)
        self.downs = []
        for i, (c_in, c_out) in enumerate(self.in_out):
            stage = [
                ResidualBlock(c_in, c_out, base, spec.kernel, rng),
                ResidualBlock(c_out, c_out, base, spec.kernel, rng),
            ]
            if i < n - 1:
                stage.append(Downsample(c_out, rng))
            self.downs.append(stage)
        mid = dims[-1]
        self.mid1 = ResidualBlock(mid, mid, base, spec.kernel, rng)
        self.mid2 = ResidualBlock(mid, mid, base, spec.kernel, rng)
        self.mid_dim = mid

    def check_horizon(self, H: int) -> None:
        need = min_horizon(self.spec.channel_mult)
        if H < need or H % need:
            raise ValueError(
                f"horizon {H} cannot be downsampled {len(self.spec.channel_mult) - 1} times; "
                f"minimum H is {need} and H must be a multiple of {need}"
            )

    def embed(self, t, cond, drop, B: int) -> Tensor:
        emb = self.time_mlp(Tensor(sinusoidal_embedding(timesteps(t, B), self.emb_dim)))
        c = check_cond(cond, self.spec.cond_dim, B)
        if self.cond is not None:
            emb = emb + self.cond(c, drop, B)
        return emb

    def forward(self, x: Tensor, emb: Tensor) -> tuple[Tensor, list[Tensor]]:
        skips = []
        h = x
        for stage in self.downs:
            h = stage[0](h, emb)
            h = stage[1](h, emb)
            skips.append(h)
            if len(stage) == 3:
                h = stage[2](h)
        h = self.mid1(h, emb)
        h = self.mid2(h, emb)
        return h, skips


class UNet1D(Module):
    """x: [B, H, D] -> [B, H, D]."""

    def __init__(self, spec: DenoiserSpec, x_dim: int, rng: np.random.Generator):
        self.spec = spec
        self.x_dim = x_dim
        self.encoder = UNetEncoder(spec, x_dim, rng)
        base = spec.base_channels
        self.ups = []
        for c_in, c_out in reversed(self.encoder.in_out[1:]):
            self.ups.append(
                [
                    ResidualBlock(c_out * 2, c_in, base, spec.kernel, rng),
                    ResidualBlock(c_in, c_in, base, spec.kernel, rng),
                    Upsample(c_in, rng),
                ]
            )
        self.final_block = ConvBlock(base, base, spec.kernel, rng)
        self.final_conv = Conv1d(base, x_dim, 1, rng)

    def forward(self, x, t, cond=None, drop=None) -> Tensor:
        x = T.as_tensor(x)
        B, H, D = x.shape
        if D != self.x_dim:
            raise ValueError(f"expected feature dim {self.x_dim}, got {D}")
        self.encoder.check_horizon(H)
        emb = self.encoder.embed(t, cond, drop, B)
        h, skips = self.encoder(T.transpose(x, (0, 2, 1)), emb)
        for res1, res2, up in self.ups:
            h = T.concat([h, skips.pop()], axis=1)
            h = up(res2(res1(h, emb), emb))
        out = self.final_conv(self.final_block(h))
        return T.transpose(out, (0, 2, 1))
