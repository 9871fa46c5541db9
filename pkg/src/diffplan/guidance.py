"""Guided sampling: classifier guidance, classifier-free guidance and
Monte Carlo sampling with selection, plus the trajectory critic they use."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diffusion import EpsFn, NoiseSchedule, q_sample, to_eps
from .nets import DenoiserSpec, TransformerCritic, UNetCritic
from .optim import fit
from .tensor import Tensor, no_grad

ALGOS = ("None", "CG", "CFG", "MCSS")
CRITIC_BODIES = ("Transformer", "UNet1D")


@dataclass(frozen=True)
class GuidanceSpec:
    algo: str = "MCSS"
    w: float = 1.0
    target_return: float = 1.0
    p_uncond: float = 0.1
    candidates: int = 50

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"guidance algo must be one of {ALGOS}, got {self.algo!r}")
        if self.w < 0:
            raise ValueError("guidance scale w must be >= 0")
        if self.candidates < 1:
            raise ValueError("candidate count must be >= 1")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")


@dataclass(frozen=True)
class CriticSpec:
    body: str = "Transformer"
    noised: bool = False
    train_steps: int = 2000
    hidden: int = 64
    blocks: int = 2
    head_dim: int = 32
    base_channels: int = 16
    batch: int = 128
    lr: float = 3e-4

    def __post_init__(self):
        if self.body not in CRITIC_BODIES:
            raise ValueError(f"critic body must be one of {CRITIC_BODIES}, got {self.body!r}")


def build_critic(spec: CriticSpec, x_dim: int, horizon: int, rng: np.random.Generator):
    if spec.body == "Transformer":
        return TransformerCritic(x_dim, horizon, rng, spec.hidden, spec.blocks, spec.head_dim, noised=spec.noised)
    body = DenoiserSpec(backbone="UNet1D", base_channels=spec.base_channels)
    return UNetCritic(body, x_dim, rng, noised=spec.noised)


def critic_values(critic, x: np.ndarray, t=None) -> np.ndarray:
    with no_grad():
        return critic(x, t).data.copy()


# -- classifier-free guidance -------------------------------------------------


def cfg_combine(eps_u: np.ndarray, eps_c: np.ndarray, w: float) -> np.ndarray:
    """eps_u + w (eps_c - eps_u), written so w=0 and w=1 return the branches bit-exactly."""
    return (1.0 - w) * eps_u + w * eps_c


def cfg_denoise(model, x_t: np.ndarray, t: int, cond: np.ndarray, w: float, schedule: NoiseSchedule,
                predict: str = "noise") -> np.ndarray:
    if not getattr(getattr(model, "spec", None), "cond_dim", 0):
        raise ValueError("classifier-free guidance needs a model built with a condition input")
    B = x_t.shape[0]
    tt = np.full(B, t, dtype=np.int64)
    cond = np.broadcast_to(np.asarray(cond, dtype=float), (B, model.spec.cond_dim))
    with no_grad():
        raw_u = model(x_t, tt).data
        raw_c = model(x_t, tt, cond).data
    eps_u = to_eps(raw_u, x_t, t, schedule, predict)
    eps_c = to_eps(raw_c, x_t, t, schedule, predict)
    return cfg_combine(eps_u, eps_c, w)


def cfg_eps_fn(model, cond, w: float, schedule: NoiseSchedule, predict: str = "noise") -> EpsFn:
    return lambda x_t, t: cfg_denoise(model, x_t, t, cond, w, schedule, predict)


# -- classifier guidance ------------------------------------------------------


def critic_input_grad(critic, x_t: np.ndarray, t: int) -> np.ndarray:
    """Gradient of the summed critic value with respect to the noised input."""
    x = Tensor(x_t, requires_grad=True)
    v = critic(x, np.full(x_t.shape[0], t, dtype=np.int64))
    T.backward(T.tsum(v), [x])
    return x.grad


def cg_denoise(model, critic, x_t: np.ndarray, t: int, w: float, schedule: NoiseSchedule,
               predict: str = "noise") -> np.ndarray:
    """eps - w * sigma_t * grad_x V(x_t, t) with sigma_t = sqrt(1 - abar_t)."""
    if not getattr(critic, "noised", False):
        raise ValueError("classifier guidance needs a critic trained on noised inputs (noised=True)")
    tt = np.full(x_t.shape[0], t, dtype=np.int64)
    with no_grad():
        eps = to_eps(model(x_t, tt).data, x_t, t, schedule, predict)
    if w == 0:
        return eps - 0.0
    grad = critic_input_grad(critic, x_t, t)
    return eps - w * schedule.sqrt_1mab(t) * grad


def cg_eps_fn(model, critic, w: float, schedule: NoiseSchedule, predict: str = "noise") -> EpsFn:
    return lambda x_t, t: cg_denoise(model, critic, x_t, t, w, schedule, predict)


# -- Monte Carlo sampling with selection --------------------------------------


def select_best(values: np.ndarray) -> int:
    """Index of the highest value; ties go to the lowest index."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("no candidates to select from")
    return int(np.argmax(values))


def mcss_select(sample_fn, critic, N: int, rng: np.random.Generator):
    """Draw N candidate plans with ``sample_fn(N, rng) -> [N, H, D]`` and keep the critic's favourite.

    Returns (best plan, its index, all critic values).
    """
    if N < 1:
        raise ValueError(f"MCSS needs N >= 1, got {N}")
    plans = sample_fn(N, rng)
    if N == 1:
        return plans[0], 0, np.zeros(1)
    values = critic_values(critic, plans)
    i = select_best(values)
    return plans[i], i, values


# -- critic training ----------------------------------------------------------


def train_critic(
    segments: np.ndarray,
    targets: np.ndarray,
    spec: CriticSpec,
    schedule: NoiseSchedule | None,
    rng: np.random.Generator,
    steps: int | None = None,
    log=None,
):
    """Regress normalized returns from (optionally noised) trajectory segments."""
    segments = np.asarray(segments, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if segments.shape[0] == 0:
        raise ValueError("cannot train a critic on an empty dataset")
    if spec.noised and schedule is None:
        raise ValueError("a noised critic needs the diffusion schedule")
    n, H, D = segments.shape
    critic = build_critic(spec, D, H, rng)
    bs = min(spec.batch, n)

    def loss_fn(step):
        idx = rng.integers(0, n, bs)
        x = segments[idx]
        t = None
        if spec.noised:
            t = rng.integers(0, schedule.T, bs)
            x = q_sample(x, t, rng.standard_normal(x.shape), schedule)
        return T.mse_loss(critic(x, t), targets[idx])

    fit(critic, loss_fn, spec.train_steps if steps is None else steps, spec.lr, log_every=500 if log else 0, log=log)
    return critic
