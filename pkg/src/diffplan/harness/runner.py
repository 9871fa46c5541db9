"""Evaluation rows, the append-only results CSV, ablation sweeps and their
per-axis summaries."""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..diffusion import SamplerSpec, first_state_inpaint, model_eps_fn, sample, timestep_subsequence, to_eps
from ..envs import evaluate_policy
from ..nets import AttentionDump, DiT1D
from ..tensor import no_grad
from .config import SWEEP_AXES, ConfigError, RunConfig
from .dv import Bundle, PlannerPolicy, build_dataset, env_for, run_train

RESULTS_VERSION = 1
WORKERS_ENV = "DV_WORKERS"


@dataclass(frozen=True)
class ResultRow:
    config_hash: str
    seed: int
    mean_return: float
    stderr: float
    normalized_score: float
    success_rate: float
    episodes: int
    wall_time: float
    checkpoint: str
    config: str  # canonical JSON, so summaries can be recomputed from the CSV alone

    def scores(self) -> tuple:
        """Every field except wall time; identical inputs give identical scores."""
        return (self.config_hash, self.seed, self.mean_return, self.stderr, self.normalized_score,
                self.success_rate, self.episodes)

    def run_config(self) -> RunConfig:
        return RunConfig(json.loads(self.config))


COLUMNS = ["results_version"] + [f.name for f in fields(ResultRow)]
_TYPES = {f.name: f.type for f in fields(ResultRow)}


class ResultsCSV:
    """Append-only results file; the first column carries the schema version."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, rows: list[ResultRow]) -> None:
        with self._lock:
            new = not self.path.exists() or self.path.stat().st_size == 0
            if not new:
                with open(self.path, newline="") as f:
                    head = next(csv.reader(f), [])
                if head != COLUMNS:
                    raise ValueError(f"{self.path}: results header {head[:3]}... does not match schema v{RESULTS_VERSION}")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", newline="") as f:
                w = csv.writer(f)
                if new:
                    w.writerow(COLUMNS)
                for r in rows:
                    d = asdict(r)
                    w.writerow([RESULTS_VERSION] + [repr(d[c]) if isinstance(d[c], float) else d[c] for c in COLUMNS[1:]])

    def read(self) -> list[ResultRow]:
        if not self.path.exists():
            raise FileNotFoundError(f"no results file at {self.path}")
        rows = []
        with open(self.path, newline="") as f:
            for rec in csv.DictReader(f):
                if int(rec["results_version"]) != RESULTS_VERSION:
                    raise ValueError(f"{self.path}: unsupported results version {rec['results_version']}")
                vals = {}
                for k, typ in _TYPES.items():
                    raw = rec[k]
                    vals[k] = int(raw) if typ in (int, "int") else float(raw) if typ in (float, "float") else raw
                rows.append(ResultRow(**vals))
        return rows


# -- train / eval -------------------------------------------------------------


def run_eval(bundle: Bundle, episodes: int | None = None, results: ResultsCSV | None = None,
             replan_every: int | None = None, policy=None) -> ResultRow:
    """Evaluate a bundle on its configured env; optionally append the row to ``results``.

    ``policy`` replaces the bundle's planner policy (used for oracle bundles).
    """
    cfg = bundle.cfg
    env = env_for(cfg)
    n = episodes or cfg["eval.episodes"]
    t0 = time.time()
    res = evaluate_policy(policy or PlannerPolicy(bundle, replan_every), env, n, cfg["eval.seed"], bundle.reference,
                          state_dim=bundle.state_dim)
    row = ResultRow(cfg.config_hash(), bundle.seed, res.mean_return, res.stderr, res.normalized_score,
                    res.success_rate, res.episodes, time.time() - t0, bundle.path, cfg.canonical_json())
    if results is not None:
        results.append([row])
    return row


def bundle_dir(root, cfg: RunConfig, seed: int) -> Path:
    return Path(root) / f"{cfg.config_hash()}-s{seed}"


def train_or_load(cfg: RunConfig, seed: int, root, cache_dir=None, log=None) -> Bundle:
    """Reuse a finished bundle for (config, seed) if one exists under ``root``; train it otherwise."""
    out = bundle_dir(root, cfg, seed)
    if (out / "bundle.json").exists():
        b = Bundle.load(out)
        if b.cfg.config_hash() == cfg.config_hash() and b.seed == seed:
            return b
    return run_train(cfg, seed, out, cache_dir=cache_dir, log=log)


def _cell(job) -> ResultRow:
    values, seed, root, cache_dir = job
    cfg = RunConfig(values)
    return run_eval(train_or_load(cfg, seed, root, cache_dir))


# -- sweeps -------------------------------------------------------------------


def parse_axis(text: str) -> tuple[str, list]:
    """``name=v1,v2`` with values parsed by the swept field's type."""
    if "=" not in text:
        raise ConfigError(f"axis must look like name=v1,v2,..., got {text!r}")
    name, raw = text.split("=", 1)
    name = name.strip()
    if name not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {name!r}; choose from {sorted(SWEEP_AXES)}")
    from .config import SCHEMA, _parse

    sec, key = SWEEP_AXES[name]
    vals = [_parse(SCHEMA[sec][key].kind, v) for v in raw.split(",") if v.strip()]
    if not vals:
        raise ConfigError(f"sweep axis {name!r} has no values")
    return name, vals


def sweep_configs(base: RunConfig, axes: dict[str, list]) -> list[RunConfig]:
    """Cross product of the axes over ``base``; validated before anything runs."""
    if not axes:
        raise ConfigError("a sweep needs at least one axis")
    for name, vals in axes.items():
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r}; choose from {sorted(SWEEP_AXES)}")
        if not vals:
            raise ConfigError(f"sweep axis {name!r} has no values")
    names = list(axes)
    out = []
    for combo in itertools.product(*(axes[n] for n in names)):
        cfg = base
        for n, v in zip(names, combo):
            cfg = cfg.with_value(*SWEEP_AXES[n], v)
        out.append(cfg)
    return out


def run_sweep(base: RunConfig, axes: dict[str, list], root, seeds=None, results: ResultsCSV | None = None,
              workers: int | None = None, cache_dir=None) -> list[ResultRow]:
    """One train+eval per (cell, seed). Workers come from ``DV_WORKERS`` unless given."""
    cfgs = sweep_configs(base, axes)
    seeds = list(seeds if seeds is not None else base.seeds)
    if not seeds:
        raise ConfigError("a sweep needs at least one seed")
    cache_dir = Path(cache_dir) if cache_dir is not None else Path(root) / "data"
    # datasets first, serially, so workers only ever read the cache
    for c in {c.dataset_key(): c for c in cfgs}.values():
        build_dataset(c, cache_dir)
    jobs = [(c.values, s, str(root), cache_dir) for c in cfgs for s in seeds]
    workers = workers or int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_cell, jobs))
    else:
        rows = [_cell(j) for j in jobs]
    if results is not None:
        results.append(rows)
    return rows


# -- summaries ----------------------------------------------------------------


@dataclass(frozen=True)
class AxisCell:
    value: object
    mean: float
    stderr: float
    n: int


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return float(x.mean()), se


def summarize(rows: list[ResultRow], axis: str, metric: str = "normalized_score") -> list[AxisCell]:
    """Mean and standard error of ``metric`` per value of a sweep axis, in first-seen order."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    sec, key = SWEEP_AXES[axis]
    groups: dict = {}
    for r in rows:
        v = json.loads(r.config)[sec][key]
        groups.setdefault(v, []).append(getattr(r, metric))
    return [AxisCell(v, *_mean_se(xs), len(xs)) for v, xs in groups.items()]


def format_summary(cells: list[AxisCell], axis: str, metric: str = "normalized_score") -> str:
    """One header row of axis values and one row of ``mean ± se``."""
    head = [axis] + [str(c.value) for c in cells]
    body = [metric] + [f"{c.mean:.1f} ± {c.stderr:.1f}" for c in cells]
    width = [max(len(a), len(b)) for a, b in zip(head, body)]
    line = lambda xs: " | ".join(x.ljust(w) for x, w in zip(xs, width))  # noqa: E731
    return "\n".join([line(head), line(body)])


# -- attention ----------------------------------------------------------------


def dump_attention(bundle: Bundle, out=None, steps=None, layers=None, n_states: int = 16,
                   seed: int = 0) -> AttentionDump:
    """Head-averaged attention of the planner at the requested DDIM steps.

    Plans are sampled (unguided, DDIM) from ``n_states`` reset states of the
    bundle's env; maps are averaged over that batch. ``steps`` index the DDIM
    loop (0 = first, noisiest) and default to all of them; ``layers`` default
    to the first layer only.
    """
    planner = bundle.planner
    if not isinstance(planner, DiT1D):
        raise ValueError(f"attention dumps need a DiT1D planner, bundle has {type(planner).__name__}")
    cfg = bundle.cfg
    spec = cfg.sampler_spec()
    spec = SamplerSpec("DDIM", spec.steps, spec.temperature, spec.clip)
    seq = timestep_subsequence(bundle.schedule.T, spec.steps)
    steps = list(range(len(seq))) if steps is None else sorted(set(int(s) for s in steps))
    layers = [0] if layers is None else sorted(set(int(l) for l in layers))
    if any(s < 0 or s >= len(seq) for s in steps):
        raise ValueError(f"denoise steps must lie in [0, {len(seq)})")
    if any(l < 0 or l >= len(planner.blocks) for l in layers):
        raise ValueError(f"layers must lie in [0, {len(planner.blocks)})")

    H = cfg["planner.horizon"]
    dump = AttentionDump(H, meta={
        "task": cfg["env.name"], "stride": cfg["planner.stride"], "checkpoint": f"{cfg.config_hash()}-s{bundle.seed}",
        "bundle": bundle.path, "n_states": n_states})
    rng = np.random.default_rng([seed, 7])
    s0 = bundle.state_norm.apply(env_for(cfg).reset(rng, n_states))
    base = model_eps_fn(planner, bundle.schedule, cfg["planner.predict"])
    calls = iter(range(len(seq)))

    def eps_fn(x_t, t):
        k = next(calls)
        if k not in steps:
            return base(x_t, t)
        with no_grad():
            raw = planner(x_t, np.full(len(x_t), t, dtype=np.int64), capture_attention=True).data
        maps = planner.attention_maps()
        for layer in layers:
            dump.add(layer, k, maps[layer].mean(axis=0))
        dump.timesteps[k] = int(t)
        return to_eps(raw, x_t, t, bundle.schedule, cfg["planner.predict"])

    sample(eps_fn, bundle.schedule, spec, (n_states, H, bundle.x_dim), rng,
           first_state_inpaint(s0, H, bundle.x_dim))
    dump.check()
    if out is not None:
        dump.save(out)
    return dump
