"""Declarative run configuration: ``paper`` and ``desk`` presets plus TOML/JSON overrides.

A config file names a base preset and overrides fields section by section::

    preset = "desk"

    [train]
    mode = "online_only"
    total_steps = 400

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

from .backbone import BackboneConfig
from .data_io import SyntheticSpec
from .errors import ConfigError
from .features import FeatureConfig
from .online_targets import TeacherConfig
from .trainer import TrainConfig

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass
class KMeansConfig:
    num_clusters: int = 16
    restarts: int = 4
    max_iters: int = 100
    tol: float = 1e-6
    seed: int = 0
    max_points: int = 200000


@dataclass
class SynthConfig:
    n_utts: int = 200
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class Config:
    preset: str
    backbone: BackboneConfig
    train: TrainConfig
    teacher: TeacherConfig
    features: FeatureConfig
    kmeans: KMeansConfig
    synth: SynthConfig


SECTIONS = ("backbone", "train", "teacher", "features", "kmeans", "synth")


def preset(name: str) -> Config:
    if name == "desk":
        return Config(
            "desk",
            BackboneConfig.desk(),
            TrainConfig(lr_peak=2e-3, total_steps=800, batch_size=8, max_frames=100),
            TeacherConfig(top_k=3),
            FeatureConfig(num_mels=13),
            KMeansConfig(num_clusters=16),
            SynthConfig(),
        )
    if name == "paper":
        return Config(
            "paper",
            BackboneConfig.paper(),
            TrainConfig(lr_peak=5e-4, weight_decay=0.01, total_steps=400_000, batch_size=8, max_frames=250),
            TeacherConfig(top_k=8),
            FeatureConfig(num_mels=13, deltas=True),
            KMeansConfig(num_clusters=500, restarts=1, max_iters=100),
            SynthConfig(),
        )
    raise ConfigError(f"unknown preset {name!r}, expected 'paper' or 'desk'")


def _override(obj, values: Dict[str, Any], where: str):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    current = dataclasses.asdict(obj)
    current.update(values)
    return type(obj)(**current)


def from_dict(data: Dict[str, Any]) -> Config:
    data = dict(data)
    cfg = preset(data.pop("preset", "desk"))
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for section in ("backbone", "train", "teacher", "features", "kmeans"):
        if section in data:
            if not isinstance(data[section], dict):
                raise ConfigError(f"[{section}] must be a table")
            setattr(cfg, section, _override(getattr(cfg, section), data[section], section))
    if "synth" in data:
        synth = dict(data["synth"])
        n_utts = synth.pop("n_utts", cfg.synth.n_utts)
        spec_vals = synth.pop("spec", {})
        spec_vals.update(synth)
        cfg.synth = SynthConfig(int(n_utts), _override(cfg.synth.spec, spec_vals, "synth"))
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg: Config) -> None:
    b, f = cfg.backbone, cfg.features
    if f.sample_rate != b.sample_rate or f.frame_rate != b.frame_rate:
        raise ConfigError("feature sample_rate/frame_rate must match the backbone's")
    if cfg.teacher.top_k > b.num_layers:
        raise ConfigError(f"teacher.top_k={cfg.teacher.top_k} exceeds backbone.num_layers={b.num_layers}")


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_dict(data)


def to_dict(cfg: Config) -> Dict[str, Any]:
    d = dataclasses.asdict(cfg)

    def fix(v):
        if isinstance(v, tuple):
            return [fix(x) for x in v]
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, list):
            return [fix(x) for x in v]
        return v

    return fix(d)


def dumps(cfg: Config) -> str:
    """Fully resolved config as JSON (loadable again with ``load_config`` from a ``.json`` file)."""
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)
