"""Training configuration: a flat dataclass stored as sectioned key=value text."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .losses import LossWeights
from .masking import MaskConfig
from .networks import ModelConfig, ViTConfig
from .optim import AdamWConfig

MASK_TARGETS = ("depth_only", "ego_only", "both", "none")
STRATEGIES = ("blockwise", "random")
LOSS_REGIONS = ("complete", "masked_only")


@dataclass(frozen=True)
class TrainConfig:
    # [train]
    epochs: int = 20
    steps_per_epoch: int = 0  # 0 = one pass over the dataset
    batch_size: int = 4
    seed: int = 0
    # [optim]
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 15
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    # [loss]
    ssim_weight: float = 0.85
    l1_weight: float = 0.15
    smooth_weight: float = 1e-3
    photometric_combine: str = "min"
    loss_region: str = "complete"
    ssim_window: int = 3
    # [mask]
    mask_target: str = "depth_only"
    depth_mask_strategy: str = "blockwise"
    ego_mask_strategy: str = "blockwise"
    mask_size: int = 8
    mask_ratio: float = 0.25
    mask_aspect: float = 0.3
    # [model]
    image_h: int = 64
    image_w: int = 64
    patch_edge: int = 8
    width: int = 64
    depth_layers: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    d_min: float = 0.1
    d_max: float = 100.0
    pose_scale: float = 0.01
    mask_token_std: float = 0.02
    per_position_mask_tokens: bool = False
    init_std: float = 0.02
    # [paths]
    dataset: str = ""
    checkpoint: str = ""
    record: str = ""

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.steps_per_epoch < 0:
            raise ValueError("epochs and batch_size must be >= 1, steps_per_epoch >= 0")
        if self.mask_target not in MASK_TARGETS:
            raise ValueError(f"mask_target must be one of {MASK_TARGETS}, got {self.mask_target!r}")
        for name in ("depth_mask_strategy", "ego_mask_strategy"):
            if getattr(self, name) not in STRATEGIES:
                raise ValueError(f"{name} must be one of {STRATEGIES}")
        if self.loss_region not in LOSS_REGIONS:
            raise ValueError(f"loss_region must be one of {LOSS_REGIONS}")
        if self.photometric_combine not in ("min", "mean"):
            raise ValueError("photometric_combine must be 'min' or 'mean'")
        if self.loss_region == "masked_only" and self.mask_target in ("none", "ego_only"):
            raise ValueError("loss_region=masked_only needs a depth-network mask")
        # construct the sub-configs once so their own checks run
        self.loss_weights()
        self.model_config()
        self.optim_config()
        if self.masks_depth or self.masks_ego:
            self.mask_config(0)
            if self.mask_size % self.patch_edge:
                raise ValueError(f"mask_size {self.mask_size} must be a multiple of patch_edge {self.patch_edge}")

    # -- derived ---------------------------------------------------------
    @property
    def masks_depth(self) -> bool:
        return self.mask_target in ("depth_only", "both")

    @property
    def masks_ego(self) -> bool:
        return self.mask_target in ("ego_only", "both")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.ssim_weight, self.l1_weight, self.smooth_weight)

    def mask_config(self, seed: int) -> MaskConfig:
        return MaskConfig(self.mask_size, self.mask_ratio, self.mask_aspect, seed)

    def model_config(self) -> ModelConfig:
        vit = ViTConfig(self.image_h, self.image_w, self.patch_edge, self.width, self.depth_layers, self.heads, self.mlp_ratio)
        return ModelConfig(
            vit, self.d_min, self.d_max, self.pose_scale, self.mask_token_std, self.per_position_mask_tokens, self.init_std
        )

    def optim_config(self) -> AdamWConfig:
        return AdamWConfig(self.lr, self.beta1, self.beta2, self.adam_eps, self.weight_decay)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS: dict[str, tuple[str, ...]] = {
    "train": ("epochs", "steps_per_epoch", "batch_size", "seed"),
    "optim": ("lr", "lr_decay_factor", "lr_decay_epoch", "beta1", "beta2", "adam_eps", "weight_decay"),
    "loss": ("ssim_weight", "l1_weight", "smooth_weight", "photometric_combine", "loss_region", "ssim_window"),
    "mask": ("mask_target", "depth_mask_strategy", "ego_mask_strategy", "mask_size", "mask_ratio", "mask_aspect"),
    "model": (
        "image_h", "image_w", "patch_edge", "width", "depth_layers", "heads", "mlp_ratio",
        "d_min", "d_max", "pose_scale", "mask_token_std", "per_position_mask_tokens", "init_std",
    ),
    "paths": ("dataset", "checkpoint", "record"),
}
_FIELD_SECTION = {name: sec for sec, names in SECTIONS.items() for name in names}
_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(name: str, text: str):
    kind = _TYPES[name]
    text = text.strip()
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def _resolve_key(key: str) -> str:
    """Accept ``field`` or ``section.field``."""
    key = key.strip()
    if "." in key:
        sec, name = key.split(".", 1)
        if _FIELD_SECTION.get(name) != sec:
            raise KeyError(f"unknown config key {key!r}")
        return name
    if key not in _FIELD_SECTION:
        raise KeyError(f"unknown config key {key!r}")
    return key


def parse_overrides(items: Iterable[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        name = _resolve_key(key)
        out[name] = _convert(name, value)
    return out


def load_config(path=None, overrides: Iterable[str] = (), base: TrainConfig | None = None) -> TrainConfig:
    """Read a config file (if given) over ``base``, then apply ``key=value`` overrides."""
    values = (base or TrainConfig()).to_dict()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path)
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise KeyError(f"{path}: unknown section [{sec}]")
            for key, value in cp[sec].items():
                name = _resolve_key(f"{sec}.{key}")
                values[name] = _convert(name, value)
    values.update(parse_overrides(overrides))
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for sec, names in SECTIONS.items():
        lines.append(f"[{sec}]")
        lines += [f"{n} = {str(d[n]).lower() if isinstance(d[n], bool) else d[n]}" for n in names]
        lines.append("")
    return "\n".join(lines)
