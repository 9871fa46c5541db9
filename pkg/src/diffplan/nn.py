"""Module containers and the basic layers the backbones are built from."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter


class Module:
    """Attribute-registered parameter container (torch-like, minus the magic)."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, val in vars(self).items():
            _collect(val, f"{prefix}{key}", out)
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for n, p in named.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: expected shape {p.shape}, got {state[n].shape}")
            p.data[...] = state[n]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _collect(val, name: str, out: list) -> None:
    if isinstance(val, Tensor):
        if val.requires_grad:
            out.append((name, val))
    elif isinstance(val, Module):
        out.extend(val.named_parameters(name + "."))
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            _collect(item, f"{name}.{i}", out)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        bound = 1.0 / math.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out) if zero else rng.uniform(-bound, bound, n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-6):
        self.eps = eps
        self.weight = parameter(np.ones(dim)) if affine else None
        self.bias = parameter(np.zeros(dim)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        self.groups = groups
        self.eps = eps
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.weight = parameter(rng.uniform(-bound, bound, (c_out, c_in, kernel)))
        self.bias = parameter(rng.uniform(-bound, bound, c_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = parameter(rng.normal(0.0, std, (n, dim)))

    def forward(self, idx) -> Tensor:
        return T.embedding(self.weight, idx)


class MLP(Module):
    """Stack of Linear layers with an activation between them."""

    def __init__(self, dims: list[int], rng: np.random.Generator, act=T.mish, zero_last: bool = False):
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(dims) - 2) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos features of integer timesteps, shape [B, dim]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class TimestepEmbedding(Module):
    """Sinusoidal features followed by the 2-layer embedding MLP."""

    def __init__(self, dim: int, rng: np.random.Generator, freq_dim: int | None = None):
        self.freq_dim = freq_dim or dim
        self.net = MLP([self.freq_dim, dim * 2, dim], rng)

    def forward(self, t) -> Tensor:
        return self.net(Tensor(sinusoidal_embedding(t, self.freq_dim)))


def randomize_(module: Module, rng: np.random.Generator, scale: float = 0.5, zeros_only: bool = False) -> None:
    """Overwrite parameters with uniform noise in [-scale, scale] (test helper).

    With ``zeros_only`` only all-zero tensors (zero-init heads, biases) are
    filled, so gradients reach every parameter while the default init keeps
    activations in a well-conditioned range.
    """
    for p in module.parameters():
        if not zeros_only or not p.data.any():
            p.data[...] = rng.uniform(-scale, scale, p.shape)
