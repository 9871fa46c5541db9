"""Noise schedules, forward noising, denoising losses and DDPM/DDIM samplers.

Samplers work on numpy arrays and call a *denoise function*
``eps_fn(x_t, t) -> eps`` that returns a noise estimate for a batch at one
integer timestep. ``model_eps_fn`` adapts a denoiser network to that form
(including clean-target networks); the guidance module builds guided ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

EpsFn = Callable[[np.ndarray, int], np.ndarray]

SCHEDULES = ("linear", "cosine")
SOLVERS = ("DDPM", "DDIM")
PREDICTS = ("noise", "clean")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray  # posterior std of q(x_{t-1} | x_t, x_0)

    def sqrt_ab(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bars[t])

    def sqrt_1mab(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bars[t])

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() >= self.T):
            raise ValueError(f"timestep out of range [0, {self.T}): {t.min()}..{t.max()}")
        return t


def make_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear betas (rescaled by 1000/T so short chains still reach noise) or the cosine schedule."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(beta_start * scale, min(beta_end * scale, 0.999), T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; choose from {SCHEDULES}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bars))
    return NoiseSchedule(kind, T, betas, alphas, alpha_bars, sigmas)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` scalar or one per batch row."""
    x0, eps = np.asarray(x0, dtype=float), np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} differs from data shape {x0.shape}")
    t = schedule.check_t(t)
    return _bcast(schedule.sqrt_ab(t), x0.ndim) * x0 + _bcast(schedule.sqrt_1mab(t), x0.ndim) * eps


@dataclass(frozen=True)
class Inpaint:
    """Known clean entries: wherever ``mask`` is true the sample is pinned to ``values``."""

    mask: np.ndarray
    values: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.mask, self.values, x)


def first_state_inpaint(states: np.ndarray, horizon: int, x_dim: int) -> Inpaint:
    """Pin the first ``Ds`` columns of row 0 to ``states`` ([B, Ds])."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    B, ds = states.shape
    mask = np.zeros((B, horizon, x_dim), dtype=bool)
    mask[:, 0, :ds] = True
    values = np.zeros((B, horizon, x_dim))
    values[:, 0, :ds] = states
    return Inpaint(mask, values)


def training_loss(
    model,
    x0,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    predict: str = "noise",
    cond=None,
    p_uncond: float = 0.0,
    inpaint_mask: np.ndarray | None = None,
) -> Tensor:
    """Denoising MSE with a uniform timestep per example.

    Entries under ``inpaint_mask`` are given their clean value in x_t (as at
    sampling time) and carry no loss weight. With a condition, each row's
    condition is replaced by the null token with probability ``p_uncond``.
    """
    if predict not in PREDICTS:
        raise ValueError(f"predict must be one of {PREDICTS}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    B = x0.shape[0]
    t = rng.integers(0, schedule.T, B)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, schedule)
    weight = None
    if inpaint_mask is not None:
        mask = np.broadcast_to(inpaint_mask, x0.shape)
        x_t = np.where(mask, x0, x_t)
        weight = (~mask).astype(float)
    drop = None
    if cond is not None:
        drop = rng.random(B) < p_uncond
    out = model(x_t, t, cond, drop) if cond is not None else model(x_t, t)
    target = eps if predict == "noise" else x0
    return T.mse_loss(out, target, weight)


def to_eps(raw: np.ndarray, x_t: np.ndarray, t: int, schedule: NoiseSchedule, predict: str) -> np.ndarray:
    if predict == "noise":
        return raw
    return (x_t - schedule.sqrt_ab(t) * raw) / schedule.sqrt_1mab(t)


def model_eps_fn(model, schedule: NoiseSchedule, predict: str = "noise", cond=None) -> EpsFn:
    """Plain (unguided) denoise function; with ``cond`` the conditional branch."""

    def eps_fn(x_t: np.ndarray, t: int) -> np.ndarray:
        tt = np.full(x_t.shape[0], t, dtype=np.int64)
        with no_grad():
            raw = (model(x_t, tt, cond) if cond is not None else model(x_t, tt)).data
        return to_eps(raw, x_t, t, schedule, predict)

    return eps_fn


@dataclass(frozen=True)
class SamplerSpec:
    solver: str = "DDIM"
    steps: int = 20
    temperature: float = 1.0
    clip: bool = True  # clamp the implied clean estimate to the normalized data range

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.steps < 1:
            raise ValueError("sampling steps must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def timestep_subsequence(T_: int, steps: int) -> np.ndarray:
    """``steps`` evenly spaced timesteps of [0, T), descending, always ending at 0."""
    if steps > T_:
        raise ValueError(f"sampling steps ({steps}) exceed training T ({T_})")
    seq = np.unique(np.round(np.linspace(0, T_ - 1, steps)).astype(np.int64))
    return seq[::-1]


def _x0_hat(x_t, eps, t, schedule, clip):
    x0 = (x_t - schedule.sqrt_1mab(t) * eps) / schedule.sqrt_ab(t)
    if clip:
        x0 = np.clip(x0, -1.0, 1.0)
        eps = (x_t - schedule.sqrt_ab(t) * x0) / schedule.sqrt_1mab(t)
    return x0, eps


def _initial(shape, spec: SamplerSpec, rng, x_init, inpaint):
    if x_init is not None:
        x = np.array(x_init, dtype=float)
        if x.shape != tuple(shape):
            raise ValueError(f"initial latent shape {x.shape} != {tuple(shape)}")
    else:
        x = spec.temperature * rng.standard_normal(shape)
    return inpaint.apply(x) if inpaint is not None else x


def ddim_sample(
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    spec: SamplerSpec,
    shape,
    rng: np.random.Generator | None = None,
    inpaint: Inpaint | None = None,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM; temperature only scales the initial latent."""
    seq = timestep_subsequence(schedule.T, spec.steps)
    x = _initial(shape, spec, rng if rng is not None else np.random.default_rng(), x_init, inpaint)
    for i, t in enumerate(seq):
        x0, eps = _x0_hat(x, eps_fn(x, int(t)), t, schedule, spec.clip)
        if i + 1 < len(seq):
            ab_prev = schedule.alpha_bars[seq[i + 1]]
            x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        else:
            x = x0
        if inpaint is not None:
            x = inpaint.apply(x)
    return x


def ddpm_sample(
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    spec: SamplerSpec,
    shape,
    rng: np.random.Generator,
    inpaint: Inpaint | None = None,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Ancestral sampling over an evenly spaced timestep subsequence.

    Skipping steps uses the exact posterior between the two kept timesteps;
    with ``steps == T`` this is the textbook DDPM chain. Injected noise is
    scaled by the temperature.
    """
    seq = timestep_subsequence(schedule.T, spec.steps)
    x = _initial(shape, spec, rng, x_init, inpaint)
    for i, t in enumerate(seq):
        x0, _ = _x0_hat(x, eps_fn(x, int(t)), t, schedule, spec.clip)
        if i + 1 < len(seq):
            ab_t, ab_s = schedule.alpha_bars[t], schedule.alpha_bars[seq[i + 1]]
            beta = 1.0 - ab_t / ab_s
            mean = (math.sqrt(ab_s) * beta / (1.0 - ab_t)) * x0 + (math.sqrt(ab_t / ab_s) * (1.0 - ab_s) / (1.0 - ab_t)) * x
            std = math.sqrt(beta * (1.0 - ab_s) / (1.0 - ab_t))
            x = mean + spec.temperature * std * rng.standard_normal(x.shape)
        else:
            x = x0
        if inpaint is not None:
            x = inpaint.apply(x)
    return x


def sample(eps_fn: EpsFn, schedule: NoiseSchedule, spec: SamplerSpec, shape, rng, inpaint=None, x_init=None):
    solver = ddim_sample if spec.solver == "DDIM" else ddpm_sample
    return solver(eps_fn, schedule, spec, shape, rng, inpaint, x_init)
