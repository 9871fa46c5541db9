"""Brute-force reference implementations used as test oracles.

Written loop-by-loop from the definitions, with no shared code with the package.
"""

import numpy as np

from diffplan.dataset import EpisodeRecord, OfflineDataset


def random_dataset(rng, n_episodes=50, max_len=12, ds=3, da=2):
    eps = []
    for _ in range(n_episodes):
        L = int(rng.integers(1, max_len + 1))
        eps.append(EpisodeRecord(rng.normal(size=(L, ds)), rng.normal(size=(L, da)), rng.integers(0, 2, L).astype(float)))
    return OfflineDataset("toy", eps)


def brute_segments(ds, H, M, joint=False):
    """List of (episode, anchor, [H, width] array, pad count)."""
    out = []
    for e, ep in enumerate(ds.episodes):
        L = len(ep)
        for t in range(L):
            rows, pad, hit_end = [], 0, False
            for h in range(H):
                i = t + h * M
                if i >= L - 1:
                    if hit_end:
                        pad += 1
                    hit_end = True
                    i = L - 1
                row = list(ep.states[i])
                if joint:
                    row += list(ep.actions[i])
                rows.append(row)
            out.append((e, t, np.array(rows), pad))
    return out


def brute_pairs(ds, M, centralize):
    xs, ys = [], []
    for ep in ds.episodes:
        for t in range(len(ep)):
            if t + M >= len(ep):
                continue
            s, s2 = ep.states[t], ep.states[t + M]
            xs.append(list(np.zeros_like(s)) + list(s2 - s) if centralize else list(s) + list(s2))
            ys.append(list(ep.actions[t]))
    return np.array(xs), np.array(ys)


def brute_returns(rewards, gamma, shaped):
    r = [x - 1.0 if shaped else x for x in rewards]
    return np.array([sum(gamma**k * r[t + k] for k in range(len(r) - t)) for t in range(len(r))])
