"""Offline datasets: episode records, returns, normalizers, jump-step
segments, inverse-dynamics pairs, and the on-disk container."""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLIP_STEPS = 1000
RETURN_MODES = ("discount", "iql-maze")
SEGMENT_MODES = ("states-only", "joint")
_MAGIC = b"DPDS"
_VERSION = 1


@dataclass
class EpisodeRecord:
    states: np.ndarray  # [L, Ds]
    actions: np.ndarray  # [L, Da]
    rewards: np.ndarray  # [L]
    terminated: bool = False
    truncated: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        L = len(self.states)
        if len(self.actions) != L or len(self.rewards) != L:
            raise ValueError(
                f"episode arrays disagree in length: states {L}, actions {len(self.actions)}, rewards {len(self.rewards)}"
            )
        if self.terminated and self.truncated:
            raise ValueError("an episode cannot be both terminated and truncated")

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class OfflineDataset:
    env_id: str
    episodes: list[EpisodeRecord]
    metadata: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.episodes[0].states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.episodes[0].actions.shape[1]

    @property
    def n_steps(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def all_states(self) -> np.ndarray:
        return np.concatenate([ep.states for ep in self.episodes])

    def all_actions(self) -> np.ndarray:
        return np.concatenate([ep.actions for ep in self.episodes])


# -- returns ------------------------------------------------------------------


def compute_returns(rewards, gamma: float, mode: str = "discount") -> np.ndarray:
    """Discounted return-to-go at every step; ``iql-maze`` subtracts 1 from each reward first."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if mode not in RETURN_MODES:
        raise ValueError(f"return mode must be one of {RETURN_MODES}, got {mode!r}")
    r = np.asarray(rewards, dtype=float).reshape(-1)
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    if mode == "iql-maze":
        r = r - 1.0
    out = np.empty_like(r)
    acc = 0.0
    for i in range(len(r) - 1, -1, -1):
        acc = r[i] + gamma * acc
        out[i] = acc
    return out


@dataclass(frozen=True)
class ReturnNormalizer:
    lo: float
    hi: float

    @property
    def degenerate(self) -> bool:
        return not self.hi > self.lo

    def normalize(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.degenerate:
            return np.zeros_like(r)
        return 2.0 * (r - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.degenerate:
            return np.full_like(z, self.lo)
        return (z + 1.0) * 0.5 * (self.hi - self.lo) + self.lo


def normalize_returns(returns) -> tuple[ReturnNormalizer, np.ndarray]:
    """Min-max map of all returns onto [-1, 1] (everything to 0 if they are all equal)."""
    r = np.concatenate([np.asarray(x, dtype=float).reshape(-1) for x in returns]) if isinstance(returns, list) else np.asarray(returns, dtype=float)
    if r.size == 0:
        raise ValueError("no returns to normalize")
    norm = ReturnNormalizer(float(r.min()), float(r.max()))
    if norm.degenerate:
        warnings.warn("all returns are equal; normalized targets are all 0", RuntimeWarning, stacklevel=2)
    return norm, norm.normalize(r)


def episode_returns(ds: OfflineDataset, gamma: float, mode: str = "discount") -> list[np.ndarray]:
    return [compute_returns(ep.rewards, gamma, mode) for ep in ds.episodes]


# -- state normalizer ---------------------------------------------------------


@dataclass(frozen=True)
class StateNormalizer:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> StateNormalizer:
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            raise ValueError("cannot fit a normalizer on no data")
        return cls(x.min(axis=0), x.max(axis=0))

    @classmethod
    def identity(cls, dim: int) -> StateNormalizer:
        return cls(-np.ones(dim), np.ones(dim))

    def _span(self):
        span = self.hi - self.lo
        return np.where(span > 0, span, 1.0), span > 0

    def apply(self, x) -> np.ndarray:
        span, live = self._span()
        z = 2.0 * (np.asarray(x, dtype=float) - self.lo) / span - 1.0
        return np.where(live, z, 0.0)

    def inverse(self, z) -> np.ndarray:
        span, live = self._span()
        x = (np.asarray(z, dtype=float) + 1.0) * 0.5 * span + self.lo
        return np.where(live, x, self.lo)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> StateNormalizer:
        return cls(np.asarray(d["lo"], dtype=float), np.asarray(d["hi"], dtype=float))


def fit_state_normalizer(ds: OfflineDataset) -> StateNormalizer:
    return StateNormalizer.fit(ds.all_states())


# -- segments -----------------------------------------------------------------


@dataclass
class SegmentIndex:
    """One row per (episode, anchor): the H clamped step indices and padding count."""

    episode: np.ndarray  # [n]
    anchor: np.ndarray  # [n]
    steps: np.ndarray  # [n, H]
    pad_count: np.ndarray  # [n]
    H: int
    M: int
    mode: str

    def __len__(self) -> int:
        return len(self.anchor)


def segment_steps(L: int, t: int, H: int, M: int) -> tuple[np.ndarray, int]:
    raw = t + M * np.arange(H)
    steps = np.minimum(raw, L - 1)
    pad = max(int(np.count_nonzero(steps == L - 1)) - 1, 0)
    return steps, pad


def build_segments(ds: OfflineDataset, H: int, M: int, mode: str = "states-only", clip: int = CLIP_STEPS) -> SegmentIndex:
    """Every anchor of every (clipped) episode; indices past the end repeat the final step."""
    if H < 2 or M < 1:
        raise ValueError(f"need H >= 2 and M >= 1, got H={H}, M={M}")
    if mode not in SEGMENT_MODES:
        raise ValueError(f"segment mode must be one of {SEGMENT_MODES}, got {mode!r}")
    eps, anchors, steps, pads = [], [], [], []
    for e, ep in enumerate(ds.episodes):
        L = min(len(ep), clip)
        if L < 1:
            warnings.warn(f"skipping empty episode {e}", RuntimeWarning, stacklevel=2)
            continue
        t = np.arange(L)
        raw = t[:, None] + M * np.arange(H)[None, :]
        st = np.minimum(raw, L - 1)
        pad = np.maximum(np.count_nonzero(st == L - 1, axis=1) - 1, 0)
        eps.append(np.full(L, e))
        anchors.append(t)
        steps.append(st)
        pads.append(pad)
    if not anchors:
        raise ValueError("dataset has no usable episodes")
    return SegmentIndex(
        np.concatenate(eps), np.concatenate(anchors), np.concatenate(steps), np.concatenate(pads), H, M, mode
    )


def gather_segments(
    ds: OfflineDataset,
    index: SegmentIndex,
    state_norm: StateNormalizer | None = None,
    action_norm: StateNormalizer | None = None,
) -> np.ndarray:
    """Materialize segments as [n, H, Ds] (or [n, H, Ds + Da] in joint mode), in index order."""
    width = ds.state_dim + (ds.action_dim if index.mode == "joint" else 0)
    out = np.empty((len(index), index.H, width))
    for e in np.unique(index.episode):
        ep = ds.episodes[e]
        sel = index.episode == e
        rows = index.steps[sel]
        s = ep.states[rows]
        if state_norm is not None:
            s = state_norm.apply(s)
        if index.mode == "joint":
            a = ep.actions[rows]
            if action_norm is not None:
                a = action_norm.apply(a)
            s = np.concatenate([s, a], axis=-1)
        out[sel] = s
    return out


def segment_returns(index: SegmentIndex, returns: list[np.ndarray]) -> np.ndarray:
    return np.array([returns[e][t] for e, t in zip(index.episode, index.anchor)])


# -- inverse dynamics ---------------------------------------------------------


def invdyn_pairs(ds: OfflineDataset, M: int, centralize: bool = False, state_norm: StateNormalizer | None = None,
                 clip: int = CLIP_STEPS) -> tuple[np.ndarray, np.ndarray]:
    """((s_t, s_{t+M}) -> a_t) within each episode; centralized inputs are (0, s_{t+M} - s_t)."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    xs, ys = [], []
    for ep in ds.episodes:
        L = min(len(ep), clip)
        if L <= M:
            continue
        s = ep.states[:L] if state_norm is None else state_norm.apply(ep.states[:L])
        xs.append(pair_input(s[: L - M], s[M:L], centralize))
        ys.append(ep.actions[: L - M])
    if not xs:
        return np.zeros((0, 2 * ds.state_dim)), np.zeros((0, ds.action_dim))
    return np.concatenate(xs), np.concatenate(ys)


def pair_input(s, s_next, centralize: bool) -> np.ndarray:
    s, s_next = np.asarray(s, dtype=float), np.asarray(s_next, dtype=float)
    if centralize:
        return np.concatenate([np.zeros_like(s), s_next - s], axis=-1)
    return np.concatenate([s, s_next], axis=-1)


# -- storage ------------------------------------------------------------------


def save_dataset(ds: OfflineDataset, path) -> None:
    """Magic, header length, JSON header, then per episode the states/actions/rewards as <f8."""
    header = {
        "version": _VERSION,
        "env_id": ds.env_id,
        "state_dim": ds.state_dim,
        "action_dim": ds.action_dim,
        "n_episodes": len(ds.episodes),
        "episodes": [
            {"length": len(ep), "terminated": bool(ep.terminated), "truncated": bool(ep.truncated)} for ep in ds.episodes
        ],
        "metadata": ds.metadata,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<I", len(hb)) + hb)
        for ep in ds.episodes:
            for arr in (ep.states, ep.actions, ep.rewards):
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path) -> OfflineDataset:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + n])
    if header.get("version") != _VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    ds_, da = header["state_dim"], header["action_dim"]
    if len(header["episodes"]) != header["n_episodes"]:
        raise ValueError(f"{path}: header episode count mismatch")
    need = sum(e["length"] * (ds_ + da + 1) for e in header["episodes"]) * 8
    body = memoryview(blob)[8 + n :]
    if len(body) != need:
        raise ValueError(f"{path}: body has {len(body)} bytes, header dims imply {need}")
    flat = np.frombuffer(body, dtype="<f8")
    eps, off = [], 0
    for e in header["episodes"]:
        L = e["length"]
        s = flat[off : off + L * ds_].reshape(L, ds_)
        off += L * ds_
        a = flat[off : off + L * da].reshape(L, da)
        off += L * da
        r = flat[off : off + L]
        off += L
        eps.append(EpisodeRecord(s.copy(), a.copy(), r.copy(), e["terminated"], e["truncated"]))
    return OfflineDataset(header["env_id"], eps, header["metadata"])


def export_csv(ds: OfflineDataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["episode", "step"]
            + [f"s{i}" for i in range(ds.state_dim)]
            + [f"a{i}" for i in range(ds.action_dim)]
            + ["reward", "terminated", "truncated"]
        )
        for e, ep in enumerate(ds.episodes):
            for t in range(len(ep)):
                last = t == len(ep) - 1
                w.writerow(
                    [e, t, *map(repr, ep.states[t]), *map(repr, ep.actions[t]), repr(ep.rewards[t]),
                     int(last and ep.terminated), int(last and ep.truncated)]
                )
