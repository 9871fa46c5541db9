"""Head-averaged attention maps collected during sampling, and their on-disk form:
one CSV per (layer, denoise step) plus a ``manifest.json``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"


def _name(layer: int, step: int) -> str:
    return f"attn_l{layer}_s{step:03d}.csv"


@dataclass
class AttentionDump:
    """``maps[(layer, step)]`` is an [H, H] row-stochastic matrix."""

    horizon: int
    maps: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    timesteps: dict[int, int] = field(default_factory=dict)  # denoise step -> diffusion timestep
    meta: dict = field(default_factory=dict)

    def add(self, layer: int, step: int, A: np.ndarray) -> None:
        A = np.asarray(A, dtype=float)
        if A.shape != (self.horizon, self.horizon):
            raise ValueError(f"attention map must be [{self.horizon}, {self.horizon}], got {A.shape}")
        self.maps[(layer, step)] = A

    @property
    def steps(self) -> list[int]:
        return sorted({s for _, s in self.maps})

    @property
    def layers(self) -> list[int]:
        return sorted({l for l, _ in self.maps})

    def check(self, tol: float = 1e-6) -> None:
        for key, A in self.maps.items():
            if A.min() < 0 or A.max() > 1 or np.abs(A.sum(axis=1) - 1).max() > tol:
                raise ValueError(f"attention map {key} is not row-stochastic")

    def save(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for (layer, step), A in sorted(self.maps.items()):
            np.savetxt(out / _name(layer, step), A, delimiter=",", fmt="%.10g")
            files.append(_name(layer, step))
        manifest = {**self.meta, "horizon": self.horizon, "layers": self.layers, "steps": self.steps,
                    "timesteps": {str(k): v for k, v in sorted(self.timesteps.items())}, "files": files}
        (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return out

    @classmethod
    def load(cls, path) -> AttentionDump:
        path = Path(path)
        if not (path / MANIFEST).exists():
            raise FileNotFoundError(f"no attention manifest in {path}")
        m = json.loads((path / MANIFEST).read_text())
        d = cls(m["horizon"], timesteps={int(k): v for k, v in m["timesteps"].items()},
                meta={k: v for k, v in m.items() if k not in ("horizon", "layers", "steps", "timesteps", "files")})
        for layer in m["layers"]:
            for step in m["steps"]:
                d.add(layer, step, np.loadtxt(path / _name(layer, step), delimiter=",", ndmin=2))
        return d


def long_range_mass(A: np.ndarray, min_offset: int | None = None) -> float:
    """Mean per-row weight on keys more than ``min_offset`` (default H/2) tokens away."""
    A = np.asarray(A, dtype=float)
    H = A.shape[-1]
    k = H // 2 if min_offset is None else min_offset
    i, j = np.indices((H, H))
    return float((A * (np.abs(i - j) > k)).sum(axis=(-1, -2)).mean() / H)
