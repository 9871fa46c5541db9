from __future__ import annotations

from dataclasses import asdict, dataclass, field

BACKBONES = ("MLP", "UNet1D", "DiT1D")
PREDICT = ("noise", "clean")


@dataclass
class DenoiserSpec:
    """Backbone choice and size for a denoising network.

    Defaults are the full-size DiT1D/U-Net1D settings; desk-scale runs
    shrink ``hidden``/``base_channels`` through the run config.
    """

    backbone: str = "DiT1D"
    hidden: int = 256
    blocks: int = 2
    head_dim: int = 32
    base_channels: int = 32
    channel_mult: tuple[int, ...] = field(default=(1, 2, 2, 2))
    kernel: int = 5
    predict: str = "noise"
    cond_dim: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.validate()

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.predict not in PREDICT:
            raise ValueError(f"predict must be one of {PREDICT}, got {self.predict!r}")
        if self.hidden % self.head_dim:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by head_dim ({self.head_dim})")
        if not self.channel_mult:
            raise ValueError("channel_mult must be non-empty")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.cond_dim < 0:
            raise ValueError("cond_dim must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d
