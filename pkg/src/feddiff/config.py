"""Experiment configuration: dataclass tree, key-value config files, dotted
overrides, validation, and content hashing.

Config files are plain text, one `section.key = value` per line, `#`
comments allowed.  Values are parsed as JSON where possible (numbers,
true/false/null, quoted strings, lists) and as bare strings otherwise.
Overrides use the same dotted syntax and are applied last-wins.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .autoencoder import AutoencoderConfig
from .clients import LocalUpdateConfig
from .data import PartitionSpec
from .exceptions import ConfigError
from .guidance import GuidanceConfig

CONFIG_VERSION = 1

METHODS = ("local-only", "fedavg", "fedavg-ft", "diffusion")


@dataclass
class DataConfig:
    kind: str = "blobs"          # blobs | idx | csv
    n_classes: int = 4
    dim: int = 8
    noise: float = 0.6
    radius: float = 2.0
    pool_size: int = 12000
    image_shape: list | None = None   # reshape blobs for CNN models
    images_path: str = ""
    labels_path: str = ""
    csv_path: str = ""
    label_col: str = "label"


@dataclass
class ModelConfig:
    name: str = "mlp-tiny"       # mlp-tiny | cnn-small | cnn-med
    hidden: int = 32             # mlp hidden width / cnn fc width


@dataclass
class DiffusionConfig:
    diffusion_t: int = 1000
    beta_start: float | None = None   # None: DDPM defaults rescaled by 1000/T
    beta_end: float | None = None
    schedule_kind: str = "linear"
    steps_per_round: int = 200
    initial_steps: int = 2000         # budget for the first training round;
                                      # generation needs a competent denoiser
    final_steps: int = 2000           # training budget in final-round mode
    batch_size: int = 64
    lr: float = 1e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    hidden: int = 256
    depth: int = 3
    time_dim: int = 64
    unet_threshold: int = 4096
    augment_sigma: float = 0.0
    normalize: bool = True
    noise_sign: str = "minus"         # minus | plus (latent injection sign)
    generation: str = "every-round"   # every-round | final-round
    inversion: bool = True            # off: unconditional sampling ablation
    passthrough: bool = False         # ablation stub: dispatch uploads unchanged


@dataclass
class AEStageConfig(AutoencoderConfig):
    enabled: str = "auto"  # auto | on | off; auto turns on above unet_threshold


@dataclass
class FederationConfig:
    n_clients: int = 10
    rounds_t: int = 20
    participation: float = 1.0
    window: int = 20
    method: str = "local-only"
    seed: int = 0
    workers: int = 1
    warmup: int | None = None         # default max(5, window)
    generated_layers: list | None = None  # None: every layer is generated
    checkpoint_every: int = 0


@dataclass
class ExperimentConfig:
    config_version: int = CONFIG_VERSION
    federation: FederationConfig = field(default_factory=FederationConfig)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    local: LocalUpdateConfig = field(default_factory=LocalUpdateConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    ae: AEStageConfig = field(default_factory=AEStageConfig)

    def validate(self) -> None:
        fed = self.federation
        if fed.method not in METHODS:
            raise ConfigError(f"federation.method must be one of {METHODS}, "
                              f"got {fed.method!r}")
        if not 0.0 < fed.participation <= 1.0:
            raise ConfigError("federation.participation must be in (0, 1]")
        if fed.window < 1:
            raise ConfigError("federation.window must be >= 1")
        if fed.rounds_t < 1:
            raise ConfigError("federation.rounds_t must be >= 1")
        if fed.n_clients < 1:
            raise ConfigError("federation.n_clients must be >= 1")
        if fed.workers < 1:
            raise ConfigError("federation.workers must be >= 1")
        if self.diffusion.diffusion_t < 1:
            raise ConfigError("diffusion.diffusion_t must be >= 1")
        if self.diffusion.generation not in ("every-round", "final-round"):
            raise ConfigError("diffusion.generation must be every-round|final-round")
        if self.diffusion.noise_sign not in ("minus", "plus"):
            raise ConfigError("diffusion.noise_sign must be minus|plus")
        if self.ae.enabled not in ("auto", "on", "off"):
            raise ConfigError("ae.enabled must be auto|on|off")
        try:
            self.partition.validate()
            self.local.validate()
            self.guidance.validate(self.diffusion.diffusion_t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def warmup_rounds(self) -> int:
        fed = self.federation
        return fed.warmup if fed.warmup is not None else max(5, fed.window)


def to_dict(cfg) -> dict:
    if dataclasses.is_dataclass(cfg):
        return {f.name: to_dict(getattr(cfg, f.name))
                for f in dataclasses.fields(cfg)}
    if isinstance(cfg, (list, tuple)):
        return [to_dict(v) for v in cfg]
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_field(cfg, dotted: str, value, where: str) -> None:
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or \
                p not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {dotted!r} ({where})")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj):
        raise ConfigError(f"unknown config key {dotted!r} ({where})")
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if leaf not in fields:
        raise ConfigError(f"unknown config key {dotted!r} ({where})")
    current = getattr(obj, leaf)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"{dotted} expects true/false, got {value!r} ({where})")
    if isinstance(current, int) and not isinstance(current, bool) \
            and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{dotted} expects an integer, got {value!r} ({where})")
    if isinstance(current, int) and not isinstance(current, bool) \
            and isinstance(value, float):
        value = int(value)
    setattr(obj, leaf, value)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        key, _, raw = ov.partition("=")
        _set_field(cfg, key.strip(), _parse_value(raw), where="override")
    return cfg


def load_config(path: str, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key == "config_version":
                ver = _parse_value(raw)
                if ver != CONFIG_VERSION:
                    raise ConfigError(f"{path}:{lineno}: config_version {ver} "
                                      f"unsupported (expected {CONFIG_VERSION})")
                continue
            _set_field(cfg, key, _parse_value(raw), where=f"{path}:{lineno}")
    apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config back to the key-value file format."""
    lines = [f"config_version = {cfg.config_version}"]
    tree = to_dict(cfg)
    tree.pop("config_version")
    for section, sub in tree.items():
        for key, value in sub.items():
            lines.append(f"{section}.{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
