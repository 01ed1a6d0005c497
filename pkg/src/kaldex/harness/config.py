"""Training configuration and its YAML representation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from ..backbone import BackboneConfig, nested_nodes
from .errors import ConfigError

NOISE_MODES = ("smoothed", "blur")
NORMALIZATIONS = ("standardize", "minmax")
LDCA_CHOICES = ("default", "none", "all")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    optimizer: str = "adam"
    epochs_main: int = 10
    epochs_finetune: int = 5
    batch_size: int = 4
    seed: int = 0
    alpha: float = 0.4
    r: float = 0.01
    k: int = 5
    # data
    patch_size: int = 48
    stride: int = 24
    val_fraction: float = 0.1
    normalization: str = "standardize"
    flip: bool = True
    noise_sigma: float = 0.05
    noise_mode: str = "smoothed"
    # fine-tuning: fraction of each batch that receives the diagram loss
    topo_fraction: float = 0.25
    # match low-persistence predicted points to the diagonal
    topo_diagonal: bool = True
    # model
    depth: int = 4
    base_width: int = 6
    ldca: str = "default"
    kernel_length: int = 9
    offset_extent: float = 2.0
    head_prior: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("learning_rate", "r", "offset_extent"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        for name in ("epochs_main", "epochs_finetune"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.k < 1:
            raise ConfigError("batch_size and k must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not 0 <= self.topo_fraction <= 1:
            raise ConfigError("topo_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
        if self.ldca not in LDCA_CHOICES:
            raise ConfigError(f"ldca must be one of {LDCA_CHOICES}")
        if self.patch_size < self.stride or self.stride < 1:
            raise ConfigError("need 1 <= stride <= patch_size")
        if self.base_width % 3:
            raise ConfigError("base_width must be divisible by 3 (three LD branches)")
        try:
            self.backbone_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def backbone_config(self) -> BackboneConfig:
        sites = {"default": None, "none": (),
                 "all": tuple(nested_nodes(self.depth))}[self.ldca]
        return BackboneConfig(depth=self.depth, base_width=self.base_width,
                              patch_size=self.patch_size, ldca_sites=sites,
                              kernel_length=self.kernel_length, r=self.r,
                              offset_extent=self.offset_extent,
                              head_prior=self.head_prior)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in data.items():
            default = known[name].default
            try:
                if isinstance(default, bool):
                    if not isinstance(value, bool):
                        raise TypeError
                    kwargs[name] = value
                else:
                    kwargs[name] = type(default)(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {name}: {value!r}") from exc
        return cls(**kwargs)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "TrainConfig":
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparsable config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_yaml(Path(path).read_text())
