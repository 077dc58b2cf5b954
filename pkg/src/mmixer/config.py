"""Run configuration: defaults <- config file <- command-line flags <- env.

The file format is flat ``key = value`` pairs under INI-style sections
(model / task / train / paths). Unknown sections or keys are rejected by
name before anything is allocated. The MMIXER_SEED environment variable
overrides the seed last.
"""

import configparser
import os
from dataclasses import dataclass, fields

from .network import ModelConfig
from .synthdata import TaskSpec
from .util import ConfigError


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


@dataclass
class RunConfig:
    # model
    modalities: int = 2
    frames: int = 16
    feat_channels: int = 8
    hidden_dim: int = 16
    grid_h: int = 2
    grid_w: int = 2
    bank_size: int = 8
    classes: int = 2
    heads: int = 4
    content: str = "cfem"
    fusion: str = "bank"
    precision: str = "float32"
    pos_on_values: bool = False
    # task
    task: str = "xor"
    noise: float = 0.5
    train_samples: int = 4000
    test_samples: int = 1000
    # train
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    probe_steps: int = 300
    probe_lr: float = 0.05
    seed: int = 0
    # paths
    out_dir: str = "runs"
    data_cache: str = ""

    def model_config(self):
        return ModelConfig(
            n_modalities=self.modalities, seq_len=self.frames,
            feat_channels=self.feat_channels, hidden_dim=self.hidden_dim,
            grid_h=self.grid_h, grid_w=self.grid_w, bank_size=self.bank_size,
            n_classes=self.classes, heads=self.heads,
            content_mode=self.content, fusion_mode=self.fusion,
            precision=self.precision, seed=self.seed,
            pos_on_values=self.pos_on_values,
        )

    def task_spec(self):
        return TaskSpec(
            kind=self.task, n_modalities=self.modalities, seq_len=self.frames,
            feat_channels=self.feat_channels, grid_h=self.grid_h,
            grid_w=self.grid_w, n_classes=self.classes, noise=self.noise,
            n_train=self.train_samples, n_test=self.test_samples,
            seed=self.seed,
        )

    def validate(self):
        self.model_config().validate()
        self.task_spec().validate()
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.probe_steps < 0:
            raise ConfigError("probe_steps must be >= 0")
        return self


# section -> key -> (attribute, parser)
_SCHEMA = {
    "model": {
        "modalities": ("modalities", int),
        "frames": ("frames", int),
        "feat_channels": ("feat_channels", int),
        "hidden_dim": ("hidden_dim", int),
        "grid_h": ("grid_h", int),
        "grid_w": ("grid_w", int),
        "bank_size": ("bank_size", int),
        "classes": ("classes", int),
        "heads": ("heads", int),
        "content": ("content", str),
        "fusion": ("fusion", str),
        "precision": ("precision", str),
        "pos_on_values": ("pos_on_values", _parse_bool),
    },
    "task": {
        "kind": ("task", str),
        "noise": ("noise", float),
        "train_samples": ("train_samples", int),
        "test_samples": ("test_samples", int),
    },
    "train": {
        "epochs": ("epochs", int),
        "batch_size": ("batch_size", int),
        "lr": ("lr", float),
        "probe_steps": ("probe_steps", int),
        "probe_lr": ("probe_lr", float),
        "seed": ("seed", int),
    },
    "paths": {
        "out_dir": ("out_dir", str),
        "data_cache": ("data_cache", str),
    },
}


def apply_file(rc, path):
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            attr, conv = _SCHEMA[section][key]
            try:
                setattr(rc, attr, conv(raw))
            except ValueError as e:
                raise ConfigError(
                    f"bad value for {section}.{key}: {raw!r}"
                ) from e
    return rc


def apply_overrides(rc, overrides):
    """Apply non-None attribute overrides (command-line flags win)."""
    valid = {f.name for f in fields(RunConfig)}
    for name, value in overrides.items():
        if value is None:
            continue
        if name not in valid:
            raise ConfigError(f"unknown config field {name}")
        setattr(rc, name, value)
    return rc


def apply_env(rc, env=None):
    env = os.environ if env is None else env
    raw = env.get("MMIXER_SEED")
    if raw is not None:
        try:
            rc.seed = int(raw)
        except ValueError as e:
            raise ConfigError(f"MMIXER_SEED must be an integer, got {raw!r}") from e
    return rc


def resolve(file=None, overrides=None, env=None):
    rc = RunConfig()
    if file:
        apply_file(rc, file)
    if overrides:
        apply_overrides(rc, overrides)
    apply_env(rc, env)
    return rc.validate()


def emit(rc):
    """Resolved config as reproducible INI text."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (attr, _) in keys.items():
            lines.append(f"{key} = {getattr(rc, attr)}")
        lines.append("")
    return "\n".join(lines)
