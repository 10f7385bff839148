"""Strict JSON run configuration shared by the training commands."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .autodiff import InputError
from .channel import ChannelConfig
from .djpeg import RoundingMode
from .training import TrainConfig


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise InputError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise InputError(f"{where}: unknown key(s) {', '.join(repr(k) for k in unknown)}")
    return cls(**d)


@dataclass
class NipSpec:
    kind: str = "inet"
    width: float = 0.25
    depth: int = 4
    cfa_order: str = "RGGB"


@dataclass
class FanSpec:
    width: float = 0.25


@dataclass
class ChannelSpec:
    downsample_factor: int = 2
    jpeg_quality: int = 50
    rounding: str = "sin"

    def build(self) -> ChannelConfig:
        return ChannelConfig(self.downsample_factor, self.jpeg_quality, RoundingMode.parse(self.rounding))


@dataclass
class DataSpec:
    train: str = "builtin:train"
    val: str = "builtin:val"
    noise: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    nip: NipSpec = field(default_factory=NipSpec)
    fan: FanSpec = field(default_factory=FanSpec)
    data: DataSpec = field(default_factory=DataSpec)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InputError("config: top level must be an object")
        top = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - top)
        if unknown:
            raise InputError(f"config: unknown key(s) {', '.join(repr(k) for k in unknown)}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int):
            raise InputError("config: seed must be an integer")
        train = _strict(TrainConfig, {**d.get("train", {}), "seed": seed}, "config.train").validate()
        cfg = cls(seed=seed, train=train,
                  channel=_strict(ChannelSpec, d.get("channel", {}), "config.channel"),
                  nip=_strict(NipSpec, d.get("nip", {}), "config.nip"),
                  fan=_strict(FanSpec, d.get("fan", {}), "config.fan"),
                  data=_strict(DataSpec, d.get("data", {}), "config.data"))
        if cfg.nip.kind not in ("inet", "unet"):
            raise InputError(f"config.nip: kind must be 'inet' or 'unet', got {cfg.nip.kind!r}")
        cfg.channel.build()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")
        return d


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})") from e
    return RunConfig.from_dict(d)
