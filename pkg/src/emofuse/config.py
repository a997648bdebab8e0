"""Run configuration: INI files, environment overrides, input hashing."""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .models import ModelConfig
from .signal import SegmentSpec
from .training import TrainConfig

ENV_PREFIX = "EMOFUSE"

# Section -> {key: default}. Types are inferred from the defaults;
# keys registered in _OPTIONAL_TYPES parse as optional numbers where a
# blank or "none" value disables the setting.
DEFAULTS = {
    "dataset": {
        "segment": "DS II",
        "mode": "audio",
        "crop_fraction": 0.6,
        "per_class_total": 2000,
        "train_fraction": 0.8,
        "augment": False,
    },
    "models": {
        "variant": "cnn",
        "num_classes": 4,
        "width_multiplier": 1,
        "rnn_hidden": 128,
        "embed_dim": 128,
        "dropout_fc": 0.2,
        "dropout_rnn": 0.1,
        "audio_variant": "cnn_lstm",
    },
    "training": {
        "learning_rate": 1e-4,
        "weight_decay": 0.01,
        "batch_size": 64,
        "epochs": 10,
        "pretrain_epochs": 5,
        "seed": 0,
        "val_every": 20,
        "l1_coeff": 0.0,
        "margin": 1.0,
        "grad_clip_norm": 5.0,
        "pairs_per_epoch": None,
        "stop_at_val_accuracy": None,
    },
    "paths": {
        "data_root": "",
        "out_dir": "",
    },
}

_OPTIONAL_TYPES = {("training", "pairs_per_epoch"): int,
                   ("training", "stop_at_val_accuracy"): float,
                   ("training", "grad_clip_norm"): float}

_BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


def _convert(raw, section: str, key: str):
    default = DEFAULTS[section][key]
    if (section, key) in _OPTIONAL_TYPES:
        target = _OPTIONAL_TYPES[(section, key)]
        if raw is None:
            return None
        if isinstance(raw, str) and raw.strip().lower() in ("", "none"):
            return None
        if isinstance(raw, (int, float)):
            return target(raw)
        raw = raw.strip()
        try:
            return target(float(raw)) if target is int and "." not in raw \
                else target(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a "
                              f"{target.__name__}") from None
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        word = str(raw).strip().lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a boolean")
        return _BOOL_WORDS[word]
    if isinstance(default, int):
        try:
            return int(str(raw).strip())
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not an "
                              "integer") from None
    if isinstance(default, float):
        try:
            return float(str(raw).strip())
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a "
                              "number") from None
    return str(raw)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for one pipeline run."""

    segment: SegmentSpec
    mode: str
    crop_fraction: float
    per_class_total: int
    train_fraction: float
    augment: bool
    model: ModelConfig
    train: TrainConfig
    data_root: str
    out_dir: str

    def __post_init__(self):
        if self.mode not in ("audio", "audio+video"):
            raise ConfigError(f"[dataset] mode must be 'audio' or "
                              f"'audio+video', got {self.mode!r}")
        if not 0.0 <= self.crop_fraction < 1.0:
            raise ConfigError(f"[dataset] crop_fraction must be in [0, 1), "
                              f"got {self.crop_fraction}")
        if self.model.num_classes != self.train.class_mode:
            raise ConfigError(f"[models] num_classes={self.model.num_classes} "
                              f"conflicts with training class_mode="
                              f"{self.train.class_mode}")


def load_run_config(path=None, env=None, overrides=None) -> RunConfig:
    """Merge defaults, config file, environment, and explicit overrides.

    Precedence is overrides > EMOFUSE_* environment variables > file >
    defaults. Unknown sections or keys are errors rather than typos that
    silently vanish.
    """
    values = {s: dict(d) for s, d in DEFAULTS.items()}

    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"config file {path} not found or unreadable")
        for section in parser.sections():
            if section not in values:
                raise ConfigError(f"unknown config section [{section}] in {path}")
            for key, raw in parser.items(section):
                if key not in values[section]:
                    raise ConfigError(f"unknown key {key!r} in section "
                                      f"[{section}] of {path}")
                values[section][key] = _convert(raw, section, key)

    env = os.environ if env is None else env
    for section, keys in values.items():
        for key in keys:
            var = f"{ENV_PREFIX}_{section.upper()}_{key.upper()}"
            if var in env:
                values[section][key] = _convert(env[var], section, key)

    for (section, key), raw in (overrides or {}).items():
        if section not in values or key not in values[section]:
            raise ConfigError(f"unknown override [{section}] {key}")
        if raw is not None:
            values[section][key] = _convert(raw, section, key)

    try:
        segment = SegmentSpec.from_name(values["dataset"]["segment"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        model = ModelConfig(
            variant=values["models"]["variant"],
            num_classes=values["models"]["num_classes"],
            width_multiplier=values["models"]["width_multiplier"],
            rnn_hidden=values["models"]["rnn_hidden"],
            embed_dim=values["models"]["embed_dim"],
            dropout_fc=values["models"]["dropout_fc"],
            dropout_rnn=values["models"]["dropout_rnn"],
            audio_variant=values["models"]["audio_variant"])
        train = TrainConfig(
            learning_rate=values["training"]["learning_rate"],
            weight_decay=values["training"]["weight_decay"],
            batch_size=values["training"]["batch_size"],
            epochs=values["training"]["epochs"],
            pretrain_epochs=values["training"]["pretrain_epochs"],
            seed=values["training"]["seed"],
            class_mode=values["models"]["num_classes"],
            val_every=values["training"]["val_every"],
            l1_coeff=values["training"]["l1_coeff"],
            margin=values["training"]["margin"],
            grad_clip_norm=values["training"]["grad_clip_norm"],
            pairs_per_epoch=values["training"]["pairs_per_epoch"],
            stop_at_val_accuracy=values["training"]["stop_at_val_accuracy"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(
        segment=segment,
        mode=values["dataset"]["mode"],
        crop_fraction=values["dataset"]["crop_fraction"],
        per_class_total=values["dataset"]["per_class_total"],
        train_fraction=values["dataset"]["train_fraction"],
        augment=values["dataset"]["augment"],
        model=model, train=train,
        data_root=values["paths"]["data_root"],
        out_dir=values["paths"]["out_dir"])


def to_ini(rc: RunConfig) -> str:
    """Serialize a resolved config back to diffable INI text."""
    parser = configparser.ConfigParser()
    parser["dataset"] = {
        "segment": rc.segment.name,
        "mode": rc.mode,
        "crop_fraction": repr(rc.crop_fraction),
        "per_class_total": str(rc.per_class_total),
        "train_fraction": repr(rc.train_fraction),
        "augment": str(rc.augment).lower(),
    }
    parser["models"] = {
        "variant": rc.model.variant,
        "num_classes": str(rc.model.num_classes),
        "width_multiplier": str(rc.model.width_multiplier),
        "rnn_hidden": str(rc.model.rnn_hidden),
        "embed_dim": str(rc.model.embed_dim),
        "dropout_fc": repr(rc.model.dropout_fc),
        "dropout_rnn": repr(rc.model.dropout_rnn),
        "audio_variant": rc.model.audio_variant,
    }
    parser["training"] = {
        "learning_rate": repr(rc.train.learning_rate),
        "weight_decay": repr(rc.train.weight_decay),
        "batch_size": str(rc.train.batch_size),
        "epochs": str(rc.train.epochs),
        "pretrain_epochs": str(rc.train.pretrain_epochs),
        "seed": str(rc.train.seed),
        "val_every": str(rc.train.val_every),
        "l1_coeff": repr(rc.train.l1_coeff),
        "margin": repr(rc.train.margin),
        "grad_clip_norm": "" if rc.train.grad_clip_norm is None
        else repr(rc.train.grad_clip_norm),
        "pairs_per_epoch": "" if rc.train.pairs_per_epoch is None
        else str(rc.train.pairs_per_epoch),
        "stop_at_val_accuracy": "" if rc.train.stop_at_val_accuracy is None
        else repr(rc.train.stop_at_val_accuracy),
    }
    parser["paths"] = {"data_root": rc.data_root, "out_dir": rc.out_dir}
    lines = []
    for section in ("dataset", "models", "training", "paths"):
        lines.append(f"[{section}]")
        for key, value in parser[section].items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def save_run_config(rc: RunConfig, out_dir, name: str = "run_config.ini") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(to_ini(rc))
    return path


def _file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_inputs(paths) -> str:
    """Content hash over named input files, stable under listing order."""
    entries = []
    for p in paths:
        p = Path(p)
        if p.is_file():
            entries.append(f"{p.name}:{_file_sha256(p)}")
    entries.sort()
    return hashlib.sha256("\n".join(entries).encode()).hexdigest()


def write_input_hash(out_dir, paths, name: str = "inputs.sha256") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(hash_inputs(paths) + "\n")
    return path
