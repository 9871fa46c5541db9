from __future__ import annotations

import numpy as np

from .attention import AttentionDump, long_range_mass
from .critic import RegressionInvDyn, TransformerCritic, UNetCritic, diffusion_invdyn
from .dit1d import DiT1D, dit1d_denoise
from .mlp import MLPDenoiser, mlp_denoise
from .spec import BACKBONES, DenoiserSpec
from .unet1d import UNet1D, min_horizon


def build_denoiser(spec: DenoiserSpec, x_dim: int, horizon: int, rng: np.random.Generator):
    """Trajectory denoiser for [B, horizon, x_dim] inputs."""
    if spec.backbone == "DiT1D":
        return DiT1D(spec, x_dim, horizon, rng)
    if spec.backbone == "UNet1D":
        need = min_horizon(spec.channel_mult)
        if horizon < need or horizon % need:
            raise ValueError(f"UNet1D needs H a multiple of {need}; minimum H is {need}, got {horizon}")
        return UNet1D(spec, x_dim, rng)
    return MLPDenoiser(spec, x_dim * horizon, rng)


def unet1d_denoise(model: UNet1D, x, t, cond=None):
    return model(x, t, cond)


__all__ = [
    "AttentionDump",
    "BACKBONES",
    "DenoiserSpec",
    "DiT1D",
    "MLPDenoiser",
    "RegressionInvDyn",
    "TransformerCritic",
    "UNet1D",
    "UNetCritic",
    "build_denoiser",
    "diffusion_invdyn",
    "dit1d_denoise",
    "long_range_mass",
    "mlp_denoise",
    "unet1d_denoise",
]
