"""The planner bundle: training every component from an offline dataset,
saving/loading it, and executing it as a batched environment policy."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dataset as D
from ..checkpoint import load_checkpoint, save_checkpoint
from ..diffusion import (
    NoiseSchedule,
    SamplerSpec,
    first_state_inpaint,
    make_schedule,
    model_eps_fn,
    sample,
    training_loss,
)
from ..envs import Policy, RowStreams, ScoreReference, joint_execute, make_env
from ..guidance import build_critic, cfg_eps_fn, cg_eps_fn, critic_values, train_critic
from ..nets import RegressionInvDyn, build_denoiser, diffusion_invdyn
from ..optim import fit
from ..tensor import mse_loss, no_grad
from .config import RunConfig

BUNDLE_FILE = "bundle.json"


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def env_for(cfg: RunConfig):
    return make_env(cfg["env.name"], cfg["env.reward_mode"], cfg["env.max_steps"] or None)


def build_dataset(cfg: RunConfig, cache_dir: Path | None = None) -> D.OfflineDataset:
    """Generate (or load from ``cache_dir``) the dataset the config describes."""
    from ..envs import generate_dataset

    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"data-{cfg.dataset_key()}.dpds"
        if path.exists():
            return D.load_dataset(path)
    ds = generate_dataset(env_for(cfg), cfg.mix, cfg["dataset.episodes"], cfg["dataset.seed"])
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        D.save_dataset(ds, tmp)
        tmp.replace(path)
    return ds


@dataclass
class Bundle:
    cfg: RunConfig
    seed: int
    planner: object
    critic: object | None
    invdyn: object | None
    state_norm: D.StateNormalizer
    action_norm: D.StateNormalizer
    return_norm: D.ReturnNormalizer
    reference: ScoreReference
    state_dim: int
    action_dim: int
    traces: dict = field(default_factory=dict)
    path: str = ""

    @property
    def joint(self) -> bool:
        return self.cfg["planner.action_mode"] == "joint"

    @property
    def x_dim(self) -> int:
        return self.state_dim + (self.action_dim if self.joint else 0)

    @property
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.cfg["planner.schedule"], self.cfg["planner.diffusion_steps"])

    @property
    def inv_schedule(self) -> NoiseSchedule:
        return make_schedule("linear", self.cfg["invdyn.diffusion_steps"])

    # -- persistence ------------------------------------------------------

    def save(self, out: Path) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"config_hash": self.cfg.config_hash(), "seed": self.seed}
        save_checkpoint(out / "planner.ckpt", self.planner.state_dict(), {**meta, "role": "planner"})
        if self.critic is not None:
            save_checkpoint(out / "critic.ckpt", self.critic.state_dict(), {**meta, "role": "critic"})
        if self.invdyn is not None:
            save_checkpoint(out / "invdyn.ckpt", self.invdyn.state_dict(), {**meta, "role": "invdyn"})
        info = {
            "version": 1,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "seed": self.seed,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "state_norm": self.state_norm.to_dict(),
            "action_norm": self.action_norm.to_dict(),
            "return_norm": [self.return_norm.lo, self.return_norm.hi],
            "reference": self.reference.to_dict(),
            "traces": self.traces,
        }
        (out / BUNDLE_FILE).write_text(json.dumps(info, sort_keys=True, indent=1))
        self.path = str(out)
        return out

    @classmethod
    def load(cls, path) -> Bundle:
        path = Path(path)
        if not (path / BUNDLE_FILE).exists() or not (path / "planner.ckpt").exists():
            raise FileNotFoundError(f"no planner bundle at {path} (need {BUNDLE_FILE} and planner.ckpt)")
        info = json.loads((path / BUNDLE_FILE).read_text())
        cfg = RunConfig(info["config"])
        ds_, da = info["state_dim"], info["action_dim"]
        planner, critic, invdyn = build_models(cfg, ds_, da, np.random.default_rng(0))
        for name, mod in (("planner", planner), ("critic", critic), ("invdyn", invdyn)):
            if mod is None:
                continue
            f = path / f"{name}.ckpt"
            if not f.exists():
                raise FileNotFoundError(f"bundle at {path} is missing {f.name}")
            params, _ = load_checkpoint(f)
            mod.load_state_dict(params)
        return cls(
            cfg, info["seed"], planner, critic, invdyn,
            D.StateNormalizer.from_dict(info["state_norm"]), D.StateNormalizer.from_dict(info["action_norm"]),
            D.ReturnNormalizer(*info["return_norm"]), ScoreReference(**info["reference"]),
            ds_, da, info.get("traces", {}), str(path),
        )


def build_models(cfg: RunConfig, state_dim: int, action_dim: int, rng: np.random.Generator):
    """Fresh (planner, critic or None, inverse dynamics or None) for a config."""
    joint = cfg["planner.action_mode"] == "joint"
    x_dim = state_dim + (action_dim if joint else 0)
    algo = cfg["guidance.algo"]
    spec = cfg.denoiser_spec(cond_dim=1 if algo == "CFG" else 0)
    planner = build_denoiser(spec, x_dim, cfg["planner.horizon"], rng)
    critic = build_critic(cfg.critic_spec(), x_dim, cfg["planner.horizon"], rng) if algo in ("MCSS", "CG") else None
    invdyn = None
    if not joint:
        if cfg["invdyn.body"] == "diffusion":
            invdyn = diffusion_invdyn(2 * state_dim, action_dim, rng, cfg["invdyn.hidden"])
        else:
            invdyn = RegressionInvDyn(2 * state_dim, action_dim, rng, cfg["invdyn.hidden"])
    return planner, critic, invdyn


def _inpaint_mask(H: int, x_dim: int, state_dim: int) -> np.ndarray:
    m = np.zeros((H, x_dim), dtype=bool)
    m[0, :state_dim] = True
    return m


def run_train(cfg: RunConfig, seed: int, out: Path | None = None, dataset: D.OfflineDataset | None = None,
              cache_dir: Path | None = None, log=None) -> Bundle:
    """Train planner, critic (MCSS/CG) and inverse dynamics (separate mode) for one seed."""
    cfg.validate()
    ds = dataset if dataset is not None else build_dataset(cfg, cache_dir)
    env = env_for(cfg)
    if ds.state_dim != env.state_dim or ds.action_dim != env.action_dim:
        raise ValueError(f"dataset dims ({ds.state_dim}, {ds.action_dim}) do not match env {env.env_id}")
    t0 = time.time()
    H, M = cfg["planner.horizon"], cfg["planner.stride"]
    joint = cfg["planner.action_mode"] == "joint"
    algo = cfg["guidance.algo"]

    state_norm = D.fit_state_normalizer(ds) if cfg["dataset.normalize_states"] else D.StateNormalizer.identity(ds.state_dim)
    action_norm = D.StateNormalizer.fit(ds.all_actions())
    returns = D.episode_returns(ds, cfg["dataset.gamma"], cfg["dataset.return_mode"])
    return_norm, _ = D.normalize_returns(list(returns))
    index = D.build_segments(ds, H, M, "joint" if joint else "states-only")
    X = D.gather_segments(ds, index, state_norm, action_norm if joint else None)
    R = return_norm.normalize(D.segment_returns(index, returns))
    ref = ScoreReference(**ds.metadata["score_reference"])

    planner, critic, invdyn = build_models(cfg, ds.state_dim, ds.action_dim, _rng(seed, 1))
    schedule = make_schedule(cfg["planner.schedule"], cfg["planner.diffusion_steps"])
    mask = _inpaint_mask(H, X.shape[2], ds.state_dim)
    n, bs = len(X), min(cfg["planner.batch"], len(X))
    rng = _rng(seed, 2)
    p_uncond = cfg["guidance.p_uncond"]

    def planner_loss(step):
        idx = rng.integers(0, n, bs)
        cond = R[idx, None] if algo == "CFG" else None
        return training_loss(planner, X[idx], schedule, rng, cfg["planner.predict"], cond, p_uncond, mask)

    traces = {"planner": fit(planner, planner_loss, cfg["planner.train_steps"], cfg["planner.lr"], 1000, _tag(log, "planner"))}

    if critic is not None:
        critic = train_critic(X, R, cfg.critic_spec(), schedule, _rng(seed, 3), log=_tag(log, "critic"))

    if invdyn is not None:
        pin, pout = D.invdyn_pairs(ds, M, cfg["dataset.centralize"], state_norm)
        pout = action_norm.apply(pout)
        irng, inv_sched = _rng(seed, 4), make_schedule("linear", cfg["invdyn.diffusion_steps"])
        m, ibs = len(pin), min(cfg["planner.batch"], len(pin))

        def invdyn_loss(step):
            idx = irng.integers(0, m, ibs)
            if cfg["invdyn.body"] == "diffusion":
                return training_loss(invdyn, pout[idx], inv_sched, irng, "noise", pin[idx], 0.0)
            return mse_loss(invdyn(pin[idx]), pout[idx])

        traces["invdyn"] = fit(invdyn, invdyn_loss, cfg["invdyn.train_steps"], cfg["planner.lr"], 1000, _tag(log, "invdyn"))

    traces = {k: [float(v) for v in tr[:: max(1, len(tr) // 200)]] + [float(tr[-1])] for k, tr in traces.items()}
    traces["train_seconds"] = time.time() - t0
    b = Bundle(cfg, seed, planner, critic, invdyn, state_norm, action_norm, return_norm, ref,
               ds.state_dim, ds.action_dim, traces)
    if out is not None:
        b.save(out)
    return b


def _tag(log, name):
    if log is None:
        return None
    return lambda step, loss: log(f"{name} step {step} loss {loss:.5f}")


# -- execution ----------------------------------------------------------------


class PlannerPolicy(Policy):
    """Plan from the current state, pick a plan per the guidance spec, act on it.

    Every ``replan_every`` env steps a fresh plan is sampled with the first
    state inpainted. Between replans the inverse dynamics aims at the plan
    row one stride ahead (separate mode); joint mode reads the planned
    action of the current row.
    """

    def __init__(self, bundle: Bundle, replan_every: int | None = None, sampler: SamplerSpec | None = None):
        self.b = bundle
        cfg = bundle.cfg
        self.replan_every = replan_every or cfg["eval.replan_every"]
        self.sampler = sampler or cfg.sampler_spec()
        self.guidance = cfg.guidance_spec()
        self.H, self.M = cfg["planner.horizon"], cfg["planner.stride"]
        self.schedule = bundle.schedule
        self.predict = cfg["planner.predict"]
        self.last_choice: dict[int, int] = {}

    def reset(self, n: int) -> None:
        self.plans = np.zeros((n, self.H, self.b.x_dim))
        self.since = np.full(n, -1, dtype=np.int64)

    def _eps_fn(self):
        g, b = self.guidance, self.b
        if g.algo == "CFG":
            return cfg_eps_fn(b.planner, np.array([[g.target_return]]), g.w, self.schedule, self.predict)
        if g.algo == "CG":
            return cg_eps_fn(b.planner, b.critic, g.w, self.schedule, self.predict)
        return model_eps_fn(b.planner, self.schedule, self.predict)

    def plan(self, s_norm: np.ndarray, streams: list[np.random.Generator]) -> np.ndarray:
        """[B, H, x_dim] selected plans (normalized) for normalized states ``s_norm``."""
        B = len(s_norm)
        N = self.guidance.candidates if self.guidance.algo == "MCSS" else 1
        shape = (B * N, self.H, self.b.x_dim)
        inpaint = first_state_inpaint(np.repeat(s_norm, N, axis=0), self.H, self.b.x_dim)
        cands = sample(self._eps_fn(), self.schedule, self.sampler, shape, RowStreams(streams, N), inpaint)
        if N == 1:
            return cands
        vals = critic_values(self.b.critic, cands).reshape(B, N)
        best = np.argmax(vals, axis=1)  # first maximum: ties go to the lowest index
        return cands.reshape(B, N, self.H, -1)[np.arange(B), best]

    def invdyn_actions(self, s_norm: np.ndarray, target: np.ndarray, streams) -> np.ndarray:
        b = self.b
        pair = D.pair_input(s_norm, target, b.cfg["dataset.centralize"])
        if b.cfg["invdyn.body"] == "regular":
            with no_grad():
                a = b.invdyn(pair).data
        else:
            spec = SamplerSpec("DDPM", b.cfg["invdyn.sampling_steps"], b.cfg["invdyn.temperature"])
            a = sample(model_eps_fn(b.invdyn, b.inv_schedule, "noise", cond=pair), b.inv_schedule, spec,
                       (len(pair), b.action_dim), RowStreams(streams))
        return np.clip(b.action_norm.inverse(a), -1.0, 1.0)

    def act(self, states, streams, ids, t):
        b = self.b
        s_norm = b.state_norm.apply(states)
        need = np.nonzero((self.since[ids] < 0) | (self.since[ids] >= self.replan_every))[0]
        if need.size:
            self.plans[ids[need]] = self.plan(s_norm[need], [streams[k] for k in need])
            self.since[ids[need]] = 0
        plans = self.plans[ids]
        j = self.since[ids]
        if b.joint:
            rows = np.minimum(j // self.M, self.H - 1)
            acts = np.stack([joint_execute(p, b.state_dim, b.action_dim, b.action_norm, r)[0] for p, r in zip(plans, rows)])
        else:
            rows = np.minimum(1 + j // self.M, self.H - 1)
            target = plans[np.arange(len(ids)), rows, : b.state_dim]
            acts = self.invdyn_actions(s_norm, target, streams)
        self.since[ids] += 1
        return acts
