"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-10 train several planners per seed. Trained bundles are cached
under ``$DIFFPLAN_ACCEPTANCE_DIR`` (default ``~/.cache/diffplan/acceptance``),
keyed by config hash and seed; training is deterministic (criterion 11), so a
cached bundle is byte-for-byte what a fresh run would produce. Delete the
directory to retrain from scratch.
"""

from __future__ import annotations

import copy
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from acceptance_report import report
from oracles import brute_pairs, brute_returns, brute_segments, random_dataset

from diffplan import tensor as T
from diffplan.dataset import build_segments, compute_returns, gather_segments, invdyn_pairs
from diffplan.diffusion import (
    SamplerSpec,
    ddim_sample,
    first_state_inpaint,
    make_schedule,
    model_eps_fn,
    q_sample,
    sample,
    training_loss,
)
from diffplan.gradcheck import finite_diff_check
from diffplan.guidance import cfg_denoise, cg_denoise, mcss_select
from diffplan.harness import Bundle, ResultsCSV, RunConfig, dump_attention, run_eval, train_or_load
from diffplan.harness.dv import build_models
from diffplan.nets import DenoiserSpec, build_denoiser, long_range_mass
from diffplan.nn import randomize_
from diffplan.optim import fit
from diffplan.tensor import no_grad

ROOT = Path(os.environ.get("DIFFPLAN_ACCEPTANCE_DIR", Path.home() / ".cache" / "diffplan" / "acceptance"))
SEEDS = [0, 1, 2, 3, 4]


def bundle(cfg: RunConfig, seed: int) -> Bundle:
    return train_or_load(cfg, seed, ROOT / "bundles", ROOT / "data")


def with_guidance(b: Bundle, algo: str, candidates: int) -> Bundle:
    """Same trained weights, different execution-time selection."""
    out = copy.copy(b)
    out.cfg = b.cfg.with_value("guidance", "algo", algo).with_value("guidance", "candidates", candidates)
    return out


def fmt(xs) -> str:
    return "[" + ", ".join(f"{x:.2f}" for x in xs) + "]"


# -- 1. gradients --------------------------------------------------------------

GRADCHECK = {
    "MLP": (DenoiserSpec(backbone="MLP", hidden=64), 8),
    "UNet1D": (DenoiserSpec(backbone="UNet1D", base_channels=8), 32),
    "DiT1D": (DenoiserSpec(backbone="DiT1D", hidden=64, blocks=2), 4),
}


@pytest.mark.parametrize("backbone", list(GRADCHECK))
def test_criterion_01_gradients(backbone):
    spec, H = GRADCHECK[backbone]
    rng = np.random.default_rng(0)
    m = build_denoiser(spec, 2, H, rng)
    randomize_(m, rng, 0.1, zeros_only=True)
    x, tgt = rng.uniform(-1, 1, (2, H, 2)), rng.uniform(-1, 1, (2, H, 2))
    t0 = time.time()
    rep = finite_diff_check(lambda: T.mse_loss(m(x, np.array([3, 400])), tgt), m.named_parameters())
    secs = time.time() - t0
    ok = rep.passed and secs < 120
    report(1, f"gradcheck {backbone}", ok, f"worst rel err {rep.worst:.2e} over {rep.n_checked} params, {secs:.1f}s")
    assert ok


# -- 2. guidance identities ------------------------------------------------------


def test_criterion_02_guidance_identities():
    t0 = time.time()
    rng = np.random.default_rng(0)
    sched = make_schedule("linear", 100)
    cond_model = build_denoiser(DenoiserSpec(backbone="MLP", hidden=32, cond_dim=1), 2, 4, rng)
    randomize_(cond_model, rng)
    x = rng.normal(size=(3, 4, 2))
    tt = np.full(3, 40)
    with no_grad():
        eps_u = cond_model(x, tt).data
        eps_c = cond_model(x, tt, np.full((3, 1), 0.7)).data
    cfg0 = np.array_equal(cfg_denoise(cond_model, x, 40, [[0.7]], 0.0, sched), eps_u)
    cfg1 = np.array_equal(cfg_denoise(cond_model, x, 40, [[0.7]], 1.0, sched), eps_c)

    class Critic:
        noised = True

        def __call__(self, x, t=None):
            x = T.as_tensor(x)
            return -T.tsum(x * x, axis=(1, 2))

    cg0 = np.array_equal(cg_denoise(cond_model, Critic(), x, 40, 0.0, sched), eps_u)

    state = np.array([[0.1, -0.2]])

    def sampler(n, r):
        inp = first_state_inpaint(np.repeat(state, n, axis=0), 4, 2)
        return sample(model_eps_fn(cond_model, sched), sched, SamplerSpec("DDIM", 5), (n, 4, 2), r, inp)

    plan, idx, _ = mcss_select(sampler, None, 1, np.random.default_rng(3))
    mcss1 = idx == 0 and np.array_equal(plan, sampler(1, np.random.default_rng(3))[0])
    secs = time.time() - t0
    ok = cfg0 and cfg1 and cg0 and mcss1 and secs < 1.0
    report(2, "guidance identities", ok, f"CFG(w=0) {cfg0}, CFG(w=1) {cfg1}, CG(w=0) {cg0}, MCSS(N=1) {mcss1}, {secs:.2f}s")
    assert ok


# -- 3. sampler contracts -----------------------------------------------------


def test_criterion_03_sampler_contracts():
    sched = make_schedule("linear", 1000)
    eps_fn = lambda x, t: np.sin(x + 0.01 * t)  # noqa: E731
    x_T = np.random.default_rng(0).standard_normal((4, 6, 3))
    spec = SamplerSpec("DDIM", 20)
    a = ddim_sample(eps_fn, sched, spec, x_T.shape, np.random.default_rng(1), x_init=x_T)
    b = ddim_sample(eps_fn, sched, spec, x_T.shape, np.random.default_rng(2), x_init=x_T)
    deterministic = np.array_equal(a, b)

    states = np.random.default_rng(3).uniform(-1, 1, (4, 2)) / 3.0
    inp = first_state_inpaint(states, 6, 3)
    pinned = all(
        np.array_equal(sample(eps_fn, sched, SamplerSpec(s, 10), (4, 6, 3), np.random.default_rng(0), inp)[:, 0, :2], states)
        for s in ("DDIM", "DDPM")
    )

    rng = np.random.default_rng(4)
    errs = []
    for t in (10, 250, 800):
        x0 = np.zeros(100_000)
        xt = q_sample(x0, np.full(x0.shape, t), rng.standard_normal(x0.shape), sched)
        errs.append(abs(xt.var() / (1 - sched.alpha_bars[t]) - 1))
    ok = deterministic and pinned and max(errs) < 0.02
    report(3, "sampler contracts", ok, f"DDIM deterministic {deterministic}, inpaint exact {pinned}, "
           f"q_sample var rel err {max(errs):.2%} (max of t=10, 250, 800)")
    assert ok


# -- 4. two-point generative sanity ----------------------------------------------


def test_criterion_04_two_point():
    t0 = time.time()
    rng = np.random.default_rng(0)
    sched = make_schedule("linear", 1000)
    m = build_denoiser(DenoiserSpec(backbone="MLP", hidden=64), 1, 1, rng)
    fit(m, lambda step: training_loss(m, rng.choice([-1.0, 1.0], size=(128, 1, 1)), sched, rng), 10_000, 1e-3)
    x = sample(model_eps_fn(m, sched), sched, SamplerSpec("DDIM", 50), (10_000, 1, 1), np.random.default_rng(1)).ravel()
    inside = np.mean((np.abs(x) >= 0.5) & (np.abs(x) <= 1.5))
    # histogram with one bin per atom (|x - atom| <= 0.25) and one bin for everything else
    p = np.array([np.mean(np.abs(x + 1) <= 0.25), np.mean(np.abs(x - 1) <= 0.25)])
    tv = 0.5 * (np.abs(p - 0.5).sum() + (1 - p.sum()))
    secs = time.time() - t0
    ok = inside >= 0.95 and tv < 0.15 and secs < 600
    report(4, "two-point sanity", ok, f"{inside:.2%} within [0.5,1.5], TV {tv:.3f}, {secs:.0f}s")
    assert ok


# -- 5. dataset oracles ------------------------------------------------------------


def test_criterion_05_dataset_oracles():
    ds = random_dataset(np.random.default_rng(0), n_episodes=50)
    seg_ok = True
    for H, M in ((2, 1), (3, 2), (4, 3)):
        for mode in ("states-only", "joint"):
            idx = build_segments(ds, H, M, mode)
            X = gather_segments(ds, idx)
            ref = brute_segments(ds, H, M, joint=mode == "joint")
            seg_ok &= len(idx) == len(ref) and all(
                (idx.episode[k], idx.anchor[k], idx.pad_count[k]) == (e, t, pad) and np.array_equal(X[k], arr)
                for k, (e, t, arr, pad) in enumerate(ref)
            )
    pair_ok = all(
        all(np.array_equal(u, v) for u, v in zip(invdyn_pairs(ds, M, c), brute_pairs(ds, M, c)))
        for M in (1, 2, 4) for c in (False, True)
    )
    r = np.random.default_rng(1).normal(size=60)
    bell = []
    for mode in ("discount", "iql-maze"):
        R = compute_returns(r, 0.97, mode)
        shaped = r - 1.0 if mode == "iql-maze" else r
        bell.append(max(np.abs(R[:-1] - (shaped[:-1] + 0.97 * R[1:])).max(),
                        np.abs(R - brute_returns(r, 0.97, mode == "iql-maze")).max()))
    ok = seg_ok and pair_ok and max(bell) < 1e-9
    report(5, "dataset oracles", ok, f"segments exact {seg_ok}, pairs exact {pair_ok}, Bellman residual {max(bell):.1e}")
    assert ok


# -- 6. MCSS vs unguided on U-maze ------------------------------------------------

UMAZE_MCSS = RunConfig({
    "env": {"name": "umaze"},
    "dataset": {"expert": 0.4, "noisy": 0.4, "random": 0.2, "episodes": 200},
    "planner": {"backbone": "MLP", "hidden": 512, "horizon": 16, "stride": 4, "train_steps": 20_000, "batch": 64},
    "guidance": {"algo": "MCSS", "candidates": 50},
    "critic": {"hidden": 32, "train_steps": 2000},
    "invdyn": {"hidden": 128, "train_steps": 3000},
    "eval": {"episodes": 100, "replan_every": 4},
})


def test_criterion_06_mcss_beats_unguided():
    t0 = time.time()
    mcss, plain = [], []
    for s in SEEDS:
        b = bundle(UMAZE_MCSS, s)
        mcss.append(run_eval(b).success_rate * 100)
        plain.append(run_eval(with_guidance(b, "None", 1)).success_rate * 100)
    gap = np.mean(mcss) - np.mean(plain)
    ok = gap >= 15
    report(6, "MCSS(N=50) - unguided success", ok, f"MCSS {np.mean(mcss):.1f}% {fmt(mcss)}, unguided {np.mean(plain):.1f}% "
           f"{fmt(plain)}, gap {gap:+.1f} pts, {(time.time() - t0) / 60:.1f} min")
    assert ok


# -- 7, 9, 10. Large layout with a DiT planner ------------------------------------

LARGE = RunConfig({
    "env": {"name": "large"},
    "dataset": {"expert": 0.4, "noisy": 0.4, "random": 0.2, "episodes": 200},
    "planner": {"backbone": "DiT1D", "hidden": 32, "head_dim": 16, "blocks": 2, "horizon": 16, "stride": 4,
                "train_steps": 10_000, "batch": 64},
    "guidance": {"algo": "MCSS", "candidates": 50},
    "critic": {"hidden": 32, "train_steps": 2000},
    "invdyn": {"hidden": 128, "train_steps": 3000},
    "eval": {"episodes": 50, "replan_every": 4},
})
_EVALS: dict = {}


def evaluate(cfg: RunConfig, seed: int):
    """Evaluation is deterministic, so criteria sharing a (config, seed) share its row."""
    key = (cfg.config_hash(), seed)
    if key not in _EVALS:
        _EVALS[key] = run_eval(bundle(cfg, seed))
    return _EVALS[key]


def success(cfg: RunConfig) -> list[float]:
    return [evaluate(cfg, s).success_rate * 100 for s in SEEDS]


def test_criterion_07_stride():
    m4 = success(LARGE)
    m1 = success(LARGE.with_value("planner", "stride", 1))
    ok = np.mean(m4) > np.mean(m1)
    report(7, "Large H=16: stride 4 > stride 1", ok, f"M=4 {np.mean(m4):.1f}% {fmt(m4)}, M=1 {np.mean(m1):.1f}% {fmt(m1)}")
    assert ok


def test_criterion_09_depth():
    d2 = success(LARGE)
    d1 = success(LARGE.with_value("planner", "blocks", 1))
    ok = np.mean(d1) < np.mean(d2)
    report(9, "Large DiT: depth 1 < depth 2", ok, f"depth 1 {np.mean(d1):.1f}% {fmt(d1)}, depth 2 {np.mean(d2):.1f}% {fmt(d2)}")
    assert ok


def test_criterion_10_attention(tmp_path):
    b = bundle(LARGE, 0)
    trained = dump_attention(b, tmp_path / "trained")
    fresh = copy.copy(b)
    fresh.planner = build_models(b.cfg, b.state_dim, b.action_dim, np.random.default_rng([b.seed, 1]))[0]
    untrained = dump_attention(fresh, tmp_path / "untrained")
    rows_ok = all(
        np.abs(A.sum(axis=1) - 1).max() <= 1e-6 and A.min() >= 0 for d in (trained, untrained) for A in d.maps.values()
    )
    n_steps = b.cfg["sampler.steps"]
    every_step = trained.steps == list(range(n_steps)) and all(
        (tmp_path / "trained" / f"attn_l0_s{s:03d}.csv").exists() for s in range(n_steps)
    )
    lr_t = np.mean([long_range_mass(trained.maps[(0, s)]) for s in trained.steps])
    lr_u = np.mean([long_range_mass(untrained.maps[(0, s)]) for s in untrained.steps])
    ok = rows_ok and every_step and lr_t > lr_u
    report(10, "attention dump", ok, f"row-stochastic {rows_ok}, all {n_steps} steps {every_step}, "
           f"long-range mass trained {lr_t:.3f} vs untrained {lr_u:.3f}")
    assert ok


# -- 8. separate vs joint action generation on StageTask -----------------------

STAGE = RunConfig({
    "env": {"name": "stagetask"},
    "dataset": {"expert": 0.5, "noisy": 0.5, "random": 0.0, "episodes": 200},
    "planner": {"backbone": "DiT1D", "hidden": 32, "head_dim": 16, "blocks": 2, "horizon": 16, "stride": 4,
                "train_steps": 10_000, "batch": 64},
    "guidance": {"algo": "None", "candidates": 1},
    "invdyn": {"hidden": 128, "train_steps": 3000},
    "eval": {"episodes": 50, "replan_every": 4},
})


def test_criterion_08_separate_vs_joint():
    score = lambda cfg: [evaluate(cfg, s).normalized_score for s in SEEDS]  # noqa: E731
    sep = score(STAGE)
    joint = score(STAGE.with_value("planner", "action_mode", "joint"))
    ok = np.mean(sep) >= np.mean(joint)
    report(8, "StageTask: separate >= joint", ok, f"separate {np.mean(sep):.1f} {fmt(sep)}, joint {np.mean(joint):.1f} {fmt(joint)}")
    assert ok


# -- 11. reproducibility ----------------------------------------------------------


def test_criterion_11_reproducibility(tmp_path):
    cfg = RunConfig({
        "env": {"name": "umaze"},
        "dataset": {"expert": 0.4, "noisy": 0.4, "random": 0.2, "episodes": 30},
        "planner": {"hidden": 32, "head_dim": 16, "horizon": 8, "stride": 2, "train_steps": 200, "batch": 32},
        "sampler": {"steps": 5},
        "guidance": {"algo": "MCSS", "candidates": 20},
        "critic": {"hidden": 32, "blocks": 1, "train_steps": 100},
        "invdyn": {"hidden": 64, "train_steps": 100, "sampling_steps": 5},
        "eval": {"episodes": 5, "replan_every": 2},
    })
    rows = []
    for run in ("a", "b"):
        b = train_or_load(cfg, 3, tmp_path / run / "bundles", tmp_path / run / "data")
        rows.append(run_eval(b, results=ResultsCSV(tmp_path / run / "results.csv")))
    files = sorted(p.name for p in (tmp_path / "a" / "bundles").glob("*/*.ckpt"))
    same_ckpt = len(files) == 3 and all(
        next((tmp_path / "a" / "bundles").glob(f"*/{f}")).read_bytes() == next((tmp_path / "b" / "bundles").glob(f"*/{f}")).read_bytes()
        for f in files
    )
    a, b = (ResultsCSV(tmp_path / r / "results.csv").read()[0] for r in ("a", "b"))
    same_rows = a.scores() == b.scores() and rows[0].scores() == rows[1].scores() and json.loads(a.config) == json.loads(b.config)
    ok = same_ckpt and same_rows
    report(11, "reproducibility", ok, f"checkpoints bit-identical {same_ckpt} ({', '.join(files)}), result rows identical {same_rows}")
    assert ok
