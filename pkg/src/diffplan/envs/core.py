"""Scripted behaviour policies, dataset generation, score references and
batched policy evaluation shared by every built-in environment."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..dataset import EpisodeRecord, OfflineDataset
from .maze import PointMaze
from .stage import StageTask

NOISE_STD = 0.3
REFERENCE_EPISODES = 200


def make_env(name: str, reward_mode: str = "sparse", max_steps: int | None = None):
    """``umaze`` / ``medium`` / ``large`` point mazes or ``stagetask``."""
    if name == "stagetask":
        return StageTask(max_steps=max_steps or 120, reward_mode=reward_mode)
    return PointMaze(name, reward_mode, max_steps)


class RowStreams:
    """Per-row random streams: draws for row block i come from ``gens[i]`` only.

    Samplers call ``standard_normal(shape)`` with ``shape[0] == len(gens) * rows_per``,
    so results for one episode do not depend on which other episodes share the batch.
    """

    def __init__(self, gens: list[np.random.Generator], rows_per: int = 1):
        self.gens = gens
        self.rows_per = rows_per

    def standard_normal(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if shape[0] != len(self.gens) * self.rows_per:
            raise ValueError(f"batch of {shape[0]} rows does not match {len(self.gens)} streams x {self.rows_per}")
        return np.concatenate([g.standard_normal((self.rows_per,) + shape[1:]) for g in self.gens])


# -- scripted policies --------------------------------------------------------


class Policy:
    """Batched policy: ``act`` gets the live episodes' states, rng streams and ids."""

    def reset(self, n: int) -> None:
        pass

    def act(self, states: np.ndarray, streams: list[np.random.Generator], ids: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError


class ExpertPolicy(Policy):
    def __init__(self, env):
        self.env = env

    def act(self, states, streams, ids, t):
        return self.env.expert_action(states)


class NoisyExpertPolicy(Policy):
    def __init__(self, env, std: float = NOISE_STD):
        self.env, self.std = env, std

    def act(self, states, streams, ids, t):
        a = self.env.expert_action(states)
        noise = np.stack([g.normal(0.0, self.std, a.shape[1]) for g in streams])
        return np.clip(a + noise, -1.0, 1.0)


class RandomPolicy(Policy):
    def __init__(self, env):
        self.env = env

    def act(self, states, streams, ids, t):
        return np.stack([g.uniform(-1.0, 1.0, self.env.action_dim) for g in streams])


def rollout(env, policy: Policy, seeds: list, random_start: bool = False, record: bool = False):
    """Run one episode per seed in lockstep. Returns (returns, successes, lengths, episodes or None)."""
    n = len(seeds)
    streams = [np.random.default_rng(s) for s in seeds]
    states = np.concatenate([env.reset(g, 1, random_start) for g in streams])
    policy.reset(n)
    returns = np.zeros(n)
    success = np.zeros(n, dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    logs = [([], [], []) for _ in range(n)] if record else None
    for t in range(env.max_steps):
        ids = np.nonzero(active)[0]
        if ids.size == 0:
            break
        s = states[ids]
        a = np.asarray(policy.act(s, [streams[i] for i in ids], ids, t), dtype=float)
        if a.shape != (len(ids), env.action_dim):
            raise ValueError(f"policy returned actions of shape {a.shape}, expected {(len(ids), env.action_dim)}")
        a = np.clip(a, -1.0, 1.0)
        nxt, r, done = env.step(s, a)
        if record:
            for k, i in enumerate(ids):
                logs[i][0].append(s[k])
                logs[i][1].append(a[k])
                logs[i][2].append(r[k])
        states[ids] = nxt
        returns[ids] += r
        lengths[ids] += 1
        success[ids[done]] = True
        active[ids[done]] = False
    episodes = None
    if record:
        episodes = [
            EpisodeRecord(np.array(S), np.array(A), np.array(R), terminated=bool(success[i]), truncated=not success[i])
            for i, (S, A, R) in enumerate(logs)
        ]
    return returns, success, lengths, episodes


# -- datasets and references --------------------------------------------------


def _split(episodes: int, mix) -> list[int]:
    """Integer episode counts per policy by largest remainder."""
    raw = np.asarray(mix, dtype=float) * episodes
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: episodes - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass(frozen=True)
class ScoreReference:
    random_return: float
    expert_return: float

    def normalize(self, ret) -> np.ndarray:
        return 100.0 * (np.asarray(ret, dtype=float) - self.random_return) / (self.expert_return - self.random_return)

    def to_dict(self) -> dict:
        return asdict(self)


def score_reference(env, seed: int, episodes: int = REFERENCE_EPISODES) -> ScoreReference:
    """Mean returns of the scripted expert and of uniform random actions from the evaluation starts."""
    exp, _, _, _ = rollout(env, ExpertPolicy(env), [[seed, 1, i] for i in range(episodes)])
    rnd, _, _, _ = rollout(env, RandomPolicy(env), [[seed, 2, i] for i in range(episodes)])
    ref = ScoreReference(float(rnd.mean()), float(exp.mean()))
    if not ref.expert_return > ref.random_return:
        raise RuntimeError(f"degenerate score reference for {env.env_id}: {ref}")
    return ref


def generate_dataset(env, mix=(1.0, 0.0, 0.0), episodes: int = 100, seed: int = 0,
                     random_start: bool = True, reference: bool = True) -> OfflineDataset:
    """Roll out expert / noisy-expert / random policies in the proportions ``mix``."""
    mix = tuple(float(m) for m in mix)
    if len(mix) != 3 or min(mix) < 0 or not math.isclose(sum(mix), 1.0, abs_tol=1e-9):
        raise ValueError(f"mix must be three non-negative fractions summing to 1, got {mix}")
    if episodes < 1:
        raise ValueError("need at least one episode")
    counts = _split(episodes, mix)
    policies = [ExpertPolicy(env), NoisyExpertPolicy(env), RandomPolicy(env)]
    kinds = np.repeat(np.arange(3), counts)
    np.random.default_rng([seed, 0]).shuffle(kinds)
    eps: list[EpisodeRecord | None] = [None] * episodes
    for k, pol in enumerate(policies):
        ids = np.nonzero(kinds == k)[0]
        if ids.size:
            _, _, _, recs = rollout(env, pol, [[seed, 3, int(i)] for i in ids], random_start, record=True)
            for i, rec in zip(ids, recs):
                eps[i] = rec
    meta = {
        "env_id": env.env_id,
        "mix": {"expert": mix[0], "noisy": mix[1], "random": mix[2]},
        "episodes": episodes,
        "seed": seed,
        "noise_std": NOISE_STD,
        "max_steps": env.max_steps,
        "reward_mode": env.reward_mode,
        "random_start": random_start,
        "policy_kinds": kinds.tolist(),
    }
    if reference:
        meta["score_reference"] = score_reference(env, seed).to_dict()
    return OfflineDataset(env.env_id, eps, meta)


# -- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    mean_return: float
    stderr: float
    success_rate: float
    normalized_score: float
    returns: tuple[float, ...]

    @property
    def episodes(self) -> int:
        return len(self.returns)


def evaluate_policy(policy: Policy, env, episodes: int, seed: int, reference: ScoreReference,
                    state_dim: int | None = None) -> EvalResult:
    """Run ``episodes`` evaluation episodes in lockstep with per-episode rng streams."""
    if state_dim is not None and state_dim != env.state_dim:
        raise ValueError(f"policy expects state dim {state_dim}, env {env.env_id} has {env.state_dim}")
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rets, succ, _, _ = rollout(env, policy, [[seed, 4, i] for i in range(episodes)])
    se = float(rets.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return EvalResult(float(rets.mean()), se, float(succ.mean()), float(reference.normalize(rets.mean())),
                      tuple(float(r) for r in rets))


def dump_rollouts(path, episodes: list[EpisodeRecord]) -> None:
    """Rollout trajectories as CSV for plotting."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        ds, da = episodes[0].states.shape[1], episodes[0].actions.shape[1]
        w.writerow(["episode", "step"] + [f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)] + ["reward"])
        for e, ep in enumerate(episodes):
            for t in range(len(ep)):
                w.writerow([e, t, *ep.states[t], *ep.actions[t], ep.rewards[t]])


def joint_execute(plans: np.ndarray, state_dim: int, action_dim: int, action_norm=None, row: int = 0) -> np.ndarray:
    """Action columns of plan row ``row`` (the current step), denormalized and clipped to [-1, 1].

    ``plans`` is [B, H, Ds + Da] from a planner trained on state-action segments.
    """
    plans = np.asarray(plans, dtype=float)
    if plans.ndim == 2:
        plans = plans[None]
    if plans.shape[-1] != state_dim + action_dim:
        raise ValueError(
            f"joint execution needs state-action plans of width {state_dim + action_dim}, got {plans.shape[-1]}"
            " (was the planner trained states-only?)"
        )
    a = plans[:, row, state_dim:]
    if action_norm is not None:
        a = action_norm.inverse(a)
    return np.clip(a, -1.0, 1.0)
