"""Experiment configuration: nested dataclasses <-> strict YAML."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .degradation import ScaleFactor
from .losses import LossWeights
from .network import NetworkConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    output_dir: str = "udean-run"
    # directory of HR volumes to ingest; ignored with --phantom
    input_dir: str | None = None


@dataclass
class DeformationRanges:
    max_rot_deg: float = 2.0
    max_trans_vox: float = 2.0
    max_shrink_vox: float = 2.0


@dataclass
class DataConfig:
    mode: str = "misaligned"
    counts: list = field(default_factory=lambda: [120, 120, 30, 30])
    phantom_shape: list = field(default_factory=lambda: [32, 32, 12])
    normalization: str = "per-volume"
    volume_format: str = "raw-f32"

    def __post_init__(self):
        if self.mode not in ("unpaired", "misaligned"):
            raise ConfigError(f"data.mode must be unpaired or misaligned, got {self.mode!r}")
        if self.normalization not in ("per-volume", "per-dataset"):
            raise ConfigError(f"unknown normalization scope {self.normalization!r}")
        if self.volume_format not in ("raw-f32", "nifti1"):
            raise ConfigError(f"unknown volume format {self.volume_format!r}")
        if len(self.counts) != 4:
            raise ConfigError("data.counts needs source/target/validation/test sizes")


@dataclass
class PatchConfig:
    lr_patch_shape: list = field(default_factory=lambda: [64, 64, 3])
    stitch_stride: list | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    scale: str = "2x2x2"
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    deformation: DeformationRanges = field(default_factory=DeformationRanges)
    patch: PatchConfig = field(default_factory=PatchConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.scale = str(ScaleFactor.parse(self.scale))
        # the top-level scale and seed are authoritative
        self.network.scale = ScaleFactor.parse(self.scale)
        self.network.__post_init__()
        self.train.seed = self.seed

    def to_dict(self) -> dict:
        return _plain(self)


def _plain(obj):
    if isinstance(obj, ScaleFactor):
        return str(obj)
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        if hint is ScaleFactor:
            kwargs[name] = ScaleFactor.parse(value)
        elif dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {})


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def override(cfg: ExperimentConfig, **flags) -> ExperimentConfig:
    """Apply CLI flag overrides (None means 'not given') and revalidate."""
    d = cfg.to_dict()
    if flags.get("seed") is not None:
        d["seed"] = flags["seed"]
    if flags.get("scale") is not None:
        d["scale"] = flags["scale"]
    if flags.get("mode") is not None:
        d["data"]["mode"] = flags["mode"]
    return from_dict(d)
