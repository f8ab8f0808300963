"""Run configuration: nested dataclasses read from / written to JSON.

Unknown keys anywhere in the file are rejected so that a misspelt
hyper-parameter cannot silently fall back to its default.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict

from .backbone import BackboneConfig
from .roi_head import RoiHeadConfig
from .rpn import AnchorClass, AnchorConfig, RpnLossWeights
from .s2cfm import PoolConfig
from .voxelizer import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class MemoryConfig:
    num_keys: int = 10
    num_values: int = 50
    value_std: float = 0.1


@dataclass
class PostConfig:
    k_pre: int = 512
    proposal_nms: float = 0.1
    k_post: int = 100
    final_nms: float = 0.1
    final_max: int = 100
    nms_mode: str = "bev"

    def __post_init__(self):
        if self.nms_mode not in ("bev", "3d"):
            raise ValueError("nms_mode must be 'bev' or '3d'")


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    vfe_channels: int = 32
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    rpn_loss: RpnLossWeights = field(default_factory=RpnLossWeights)
    scene_channels: int = 160
    pool: PoolConfig = field(default_factory=PoolConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    roi: RoiHeadConfig = field(default_factory=RoiHeadConfig)
    post: PostConfig = field(default_factory=PostConfig)
    seed: int = 0

    def __post_init__(self):
        if self.backbone.in_channels != self.vfe_channels:
            raise ValueError("backbone.in_channels must equal vfe_channels")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            return _build(cls, data, "config")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: "str | os.PathLike") -> "RunConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: "str | os.PathLike") -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    "scene": SceneConfig, "backbone": BackboneConfig, "anchors": AnchorConfig,
    "rpn_loss": RpnLossWeights, "pool": PoolConfig, "memory": MemoryConfig,
    "roi": RoiHeadConfig, "post": PostConfig,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        path = f"{where}.{name}"
        if cls is RunConfig and name in _NESTED:
            kwargs[name] = _build(_NESTED[name], value, path)
        elif cls is AnchorConfig and name == "classes":
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{path}: expected a non-empty list")
            kwargs[name] = [_build(AnchorClass, v, f"{path}[{i}]") for i, v in enumerate(value)]
        else:
            default = getattr(cls(), name) if _has_defaults(cls) else None
            kwargs[name] = _coerce(value, default, path)
    return cls(**kwargs)


def _has_defaults(cls) -> bool:
    return all(f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
               for f in dataclasses.fields(cls) if f.init)


def _coerce(value, default, path):
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    return value
