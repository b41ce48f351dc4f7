"""Architecture hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Tuple


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    low_level_blocks: int = 16
    local_blocks: int = 2
    global_fc_width: int = 64
    num_noise_classes: int = 5
    pixel_disc_channels: Tuple[int, int, int] = (64, 128, 256)
    feat_disc_channels: int = 32
    feat_disc_fc_width: int = 64
    input_channels: int = 3
    input_skip: bool = False
    extractor: str = "seeded"
    extractor_channels: Tuple[int, int, int] = (16, 32, 64)
    extractor_seed: int = 1234
    output_init_gain: float = 0.1  # extra factor on the output conv's fan-in initialization

    def __post_init__(self):
        # tuples may arrive as lists from config files
        object.__setattr__(self, "pixel_disc_channels", tuple(int(c) for c in self.pixel_disc_channels))
        object.__setattr__(self, "extractor_channels", tuple(int(c) for c in self.extractor_channels))
        self.validate()

    def validate(self) -> None:
        for name in ("base_channels", "low_level_blocks", "local_blocks", "global_fc_width",
                     "num_noise_classes", "feat_disc_channels", "feat_disc_fc_width"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.output_init_gain >= 0:
            raise ValueError("output_init_gain must be non-negative")
        if self.input_channels != 3:
            raise ValueError("input_channels must be 3")
        for name in ("pixel_disc_channels", "extractor_channels"):
            value = getattr(self, name)
            if len(value) != 3 or min(value) <= 0:
                raise ValueError(f"{name} needs exactly 3 positive entries, got {value}")
        if self.extractor != "seeded" and not self.extractor.startswith("file:"):
            raise ValueError(f"unknown extractor {self.extractor!r}; use 'seeded' or 'file:<path>'")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Reduced sizes that train in minutes on one CPU."""
        base = dict(base_channels=16, low_level_blocks=4, local_blocks=1, global_fc_width=64,
                    pixel_disc_channels=(16, 32, 64), feat_disc_channels=16, feat_disc_fc_width=32,
                    extractor_channels=(8, 16, 32))
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def descriptor(self) -> dict:
        """Everything that determines parameter names and shapes."""
        d = asdict(self)
        d["pixel_disc_channels"] = list(self.pixel_disc_channels)
        d["extractor_channels"] = list(self.extractor_channels)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]
