"""Run configuration: an INI file with one section per component,
validated against explicit choice sets.

Choice sets take the published grid and add the desk-scale values the
built-in experiments need (smaller widths, depth 1, horizon 16, stride 8,
an MLP backbone). Free integers and floats are range-checked instead.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import dataclass, field

from ..diffusion import SamplerSpec
from ..guidance import CriticSpec, GuidanceSpec
from ..nets import DenoiserSpec


@dataclass(frozen=True)
class Field:
    kind: type
    default: object
    choices: tuple | None = None
    lo: float | None = None
    hi: float | None = None
    doc: str = ""


SCHEMA: dict[str, dict[str, Field]] = {
    "env": {
        "name": Field(str, "umaze", ("umaze", "medium", "large", "stagetask")),
        "reward_mode": Field(str, "sparse", ("sparse", "shaped")),
        "max_steps": Field(int, 0, lo=0, doc="0 = environment default"),
    },
    "dataset": {
        "expert": Field(float, 1.0, lo=0.0, hi=1.0),
        "noisy": Field(float, 0.0, lo=0.0, hi=1.0),
        "random": Field(float, 0.0, lo=0.0, hi=1.0),
        "episodes": Field(int, 200, lo=1),
        "seed": Field(int, 0, lo=0),
        "return_mode": Field(str, "discount", ("discount", "iql-maze")),
        "gamma": Field(float, 0.997, lo=1e-6, hi=1.0),
        "normalize_states": Field(bool, True),
        "centralize": Field(bool, True, doc="inverse dynamics input (0, s' - s)"),
    },
    "planner": {
        "backbone": Field(str, "DiT1D", ("DiT1D", "UNet1D", "MLP")),
        "hidden": Field(int, 64, (32, 64, 128, 256, 512)),
        "blocks": Field(int, 2, (1, 2, 4, 6, 8)),
        "head_dim": Field(int, 32, (16, 32, 64)),
        "base_channels": Field(int, 16, (8, 16, 32, 64)),
        "kernel": Field(int, 5, (3, 5)),
        "predict": Field(str, "noise", ("noise", "clean")),
        "horizon": Field(int, 32, (4, 8, 16, 32, 40)),
        "stride": Field(int, 1, (1, 2, 4, 5, 8, 15, 25)),
        "action_mode": Field(str, "separate", ("separate", "joint")),
        "schedule": Field(str, "linear", ("linear", "cosine")),
        "diffusion_steps": Field(int, 1000, lo=2),
        "train_steps": Field(int, 50000, lo=1),
        "batch": Field(int, 128, lo=1),
        "lr": Field(float, 3e-4, lo=0.0),
    },
    "sampler": {
        "solver": Field(str, "DDIM", ("DDIM", "DDPM")),
        "steps": Field(int, 20, lo=1),
        "temperature": Field(float, 1.0, lo=0.0),
    },
    "guidance": {
        "algo": Field(str, "MCSS", ("MCSS", "CG", "CFG", "None")),
        "w": Field(float, 1.0, lo=0.0, hi=10.0),
        "target_return": Field(float, 1.0, lo=0.5, hi=1.5),
        "p_uncond": Field(float, 0.1, lo=0.0, hi=1.0, doc="common CFG default"),
        "candidates": Field(int, 50, (1, 20, 50)),
    },
    "critic": {
        "body": Field(str, "Transformer", ("Transformer", "UNet1D")),
        "hidden": Field(int, 64, (32, 64, 128, 256)),
        "blocks": Field(int, 2, (1, 2, 4)),
        "train_steps": Field(int, 20000, lo=1),
    },
    "invdyn": {
        "body": Field(str, "diffusion", ("diffusion", "regular")),
        "hidden": Field(int, 256, (64, 128, 256)),
        "train_steps": Field(int, 20000, lo=1),
        "sampling_steps": Field(int, 10, lo=1),
        "temperature": Field(float, 0.5, lo=0.0),
        "diffusion_steps": Field(int, 100, lo=2),
    },
    "eval": {
        "episodes": Field(int, 100, lo=1),
        "replan_every": Field(int, 1, lo=1),
        "seed": Field(int, 0, lo=0),
    },
}

# Axes a sweep may vary, keyed by their short names.
SWEEP_AXES = {
    "guidance": ("guidance", "algo"),
    "backbone": ("planner", "backbone"),
    "depth": ("planner", "blocks"),
    "stride": ("planner", "stride"),
    "action-mode": ("planner", "action_mode"),
}


class ConfigError(ValueError):
    pass


def _parse(kind: type, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        return kind(raw.strip()) if kind is not str else raw.strip()
    except ValueError as e:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}") from e


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        merged = {sec: {k: f.default for k, f in fields.items()} for sec, fields in SCHEMA.items()}
        for sec, kv in self.values.items():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            for k, v in kv.items():
                if k not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key {sec}.{k}")
                merged[sec][k] = v
        self.values = merged
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def __getitem__(self, key: str):
        sec, k = key.split(".", 1)
        return self.values[sec][k]

    def replace(self, **updates) -> RunConfig:
        """Copy with ``section.key=value`` style updates (dots written as ``__``)."""
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for key, v in updates.items():
            sec, k = key.split("__", 1)
            vals.setdefault(sec, {})[k] = v
        return RunConfig(vals, self.seeds)

    def with_value(self, sec: str, key: str, v) -> RunConfig:
        vals = {s: dict(kv) for s, kv in self.values.items()}
        vals[sec][key] = v
        return RunConfig(vals, self.seeds)

    def validate(self) -> None:
        for sec, fields in SCHEMA.items():
            for k, f in fields.items():
                v = self.values[sec][k]
                if isinstance(v, str) and f.kind is not str:
                    v = _parse(f.kind, v)
                if f.kind is float and isinstance(v, int) and not isinstance(v, bool):
                    v = float(v)
                if f.kind is bool and not isinstance(v, bool):
                    raise ConfigError(f"{sec}.{k} must be a boolean, got {v!r}")
                if f.kind is int and (isinstance(v, bool) or not isinstance(v, int)):
                    raise ConfigError(f"{sec}.{k} must be an integer, got {v!r}")
                if f.kind is float and not isinstance(v, float):
                    raise ConfigError(f"{sec}.{k} must be a number, got {v!r}")
                if f.choices is not None and v not in f.choices:
                    raise ConfigError(f"{sec}.{k}={v!r} not in allowed choices {list(f.choices)}")
                if f.lo is not None and v < f.lo:
                    raise ConfigError(f"{sec}.{k}={v!r} below minimum {f.lo}")
                if f.hi is not None and v > f.hi:
                    raise ConfigError(f"{sec}.{k}={v!r} above maximum {f.hi}")
                self.values[sec][k] = v
        mix = self.mix
        if abs(sum(mix) - 1.0) > 1e-9:
            raise ConfigError(f"dataset mix must sum to 1, got {mix}")
        if self["planner.hidden"] % self["planner.head_dim"]:
            raise ConfigError("planner.hidden must be divisible by planner.head_dim")
        if self["sampler.steps"] > self["planner.diffusion_steps"]:
            raise ConfigError("sampler.steps cannot exceed planner.diffusion_steps")
        if self["invdyn.sampling_steps"] > self["invdyn.diffusion_steps"]:
            raise ConfigError("invdyn.sampling_steps cannot exceed invdyn.diffusion_steps")
        if self["planner.backbone"] == "UNet1D" and self["planner.horizon"] % 8:
            raise ConfigError("UNet1D with channel_mult (1,2,2,2) needs a horizon that is a multiple of 8; minimum H is 8")

    # -- derived specs ----------------------------------------------------

    @property
    def mix(self) -> tuple[float, float, float]:
        return (self["dataset.expert"], self["dataset.noisy"], self["dataset.random"])

    def denoiser_spec(self, cond_dim: int = 0) -> DenoiserSpec:
        p = self.values["planner"]
        return DenoiserSpec(
            backbone=p["backbone"], hidden=p["hidden"], blocks=p["blocks"], head_dim=p["head_dim"],
            base_channels=p["base_channels"], kernel=p["kernel"], predict=p["predict"], cond_dim=cond_dim,
        )

    def sampler_spec(self) -> SamplerSpec:
        s = self.values["sampler"]
        return SamplerSpec(s["solver"], s["steps"], s["temperature"])

    def guidance_spec(self) -> GuidanceSpec:
        g = self.values["guidance"]
        return GuidanceSpec(g["algo"], g["w"], g["target_return"], g["p_uncond"], g["candidates"])

    def critic_spec(self) -> CriticSpec:
        c = self.values["critic"]
        return CriticSpec(body=c["body"], noised=self["guidance.algo"] == "CG", train_steps=c["train_steps"],
                          hidden=c["hidden"], blocks=c["blocks"], batch=self["planner.batch"], lr=self["planner.lr"])

    # -- identity and serialization ---------------------------------------

    def to_dict(self) -> dict:
        return {s: dict(sorted(kv.items())) for s, kv in sorted(self.values.items())}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """sha256 of the canonical JSON of every field (seeds excluded), first 16 hex digits."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def dataset_key(self) -> str:
        d = {"env": self.values["env"], "dataset": {k: self.values["dataset"][k] for k in ("expert", "noisy", "random", "episodes", "seed")}}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec, kv in self.to_dict().items():
            cp[sec] = {k: (str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)) for k, v in kv.items()}
        cp["run"] = {"seeds": ",".join(str(s) for s in self.seeds)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> RunConfig:
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from e
        vals: dict[str, dict] = {}
        seeds: tuple[int, ...] = (0,)
        for sec in cp.sections():
            if sec == "run":
                raw = cp[sec].get("seeds", "0")
                seeds = tuple(int(s) for s in raw.replace(" ", "").split(",") if s)
                continue
            if sec not in SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            vals[sec] = {}
            for k, raw in cp[sec].items():
                if k not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key {sec}.{k}")
                vals[sec][k] = _parse(SCHEMA[sec][k].kind, raw)
        return cls(vals, seeds)

    @classmethod
    def load(cls, path) -> RunConfig:
        with open(path) as f:
            return cls.from_ini(f.read())

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_ini())
