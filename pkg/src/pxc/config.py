"""Run configuration: dataclasses plus a flat key=value file format.

Config files hold one ``key = value`` pair per line; blank lines and lines
starting with ``#`` are ignored. Command-line flags override file values.
The same file may carry keys for several subcommands; a key is rejected only
if no command knows it.
"""

import dataclasses
import os

from .errors import ConfigError
from .metrics import QualityModel


@dataclasses.dataclass
class TrainConfig:
    data_dir: str = ""
    checkpoint: str = "model.pxck"
    log_csv: str = "train_log.csv"
    target_metric: QualityModel = QualityModel.SSIM
    rd_lambda: float = 0.01
    alpha: float = 1.54e-3
    alpha_warmup: int = 0
    m_max: float = 100.0
    filters: int = 192
    batch_size: int = 8
    patch_size: int = 128
    steps: int = 10000
    lr: float = 1e-4
    lr_final: float = 1e-5
    lr_final_fraction: float = 0.05
    weight_decay: float = 0.01
    checkpoint_every: int = 1000
    freeze_proxy_after: int = 0
    seed: int = 0
    workers: int = 1
    vmaf_cmd: str = ""
    vmaf_timeout: float = 120.0

    def __post_init__(self):
        if not isinstance(self.target_metric, QualityModel):
            self.target_metric = QualityModel.from_name(self.target_metric)

    def validate(self):
        if not self.data_dir:
            raise ConfigError("data_dir", "no training image directory given")
        require_positive = {
            "rd_lambda": self.rd_lambda,
            "m_max": self.m_max,
            "filters": self.filters,
            "batch_size": self.batch_size,
            "patch_size": self.patch_size,
            "lr": self.lr,
            "lr_final": self.lr_final,
            "checkpoint_every": self.checkpoint_every,
            "workers": self.workers,
            "vmaf_timeout": self.vmaf_timeout,
        }
        for key, value in require_positive.items():
            if value <= 0:
                raise ConfigError(key, f"must be positive, got {value}")
        if self.steps < 0:
            raise ConfigError("steps", f"must be >= 0, got {self.steps}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.lr_final_fraction <= 1.0:
            raise ConfigError(
                "lr_final_fraction", f"must lie in [0, 1], got {self.lr_final_fraction}"
            )
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if self.freeze_proxy_after < 0:
            raise ConfigError(
                "freeze_proxy_after", f"must be >= 0 (0 disables), got {self.freeze_proxy_after}"
            )
        if self.alpha_warmup < 0:
            raise ConfigError(
                "alpha_warmup", f"must be >= 0 (0 disables), got {self.alpha_warmup}"
            )
        if self.patch_size % 16 != 0:
            raise ConfigError(
                "patch_size", f"must be a multiple of 16, got {self.patch_size}"
            )
        if not self.checkpoint:
            raise ConfigError("checkpoint", "no checkpoint output path given")
        return self


@dataclasses.dataclass
class EvalConfig:
    image_dir: str = ""
    out_csv: str = "rd_points.csv"
    codec_label: str = "pxc"
    workers: int = 1
    vmaf_cmd: str = ""
    vmaf_timeout: float = 120.0
    bench_reps: int = 3

    def validate(self):
        if not self.image_dir:
            raise ConfigError("image_dir", "no evaluation image directory given")
        if self.workers < 1:
            raise ConfigError("workers", f"must be >= 1, got {self.workers}")
        if self.bench_reps < 1:
            raise ConfigError("bench_reps", f"must be >= 1, got {self.bench_reps}")
        if self.vmaf_timeout <= 0:
            raise ConfigError("vmaf_timeout", f"must be positive, got {self.vmaf_timeout}")
        return self


# File keys map 1:1 onto dataclass fields except "lambda", which is a Python
# keyword and so lives in the dataclass as rd_lambda.
KEY_TO_FIELD = {"lambda": "rd_lambda"}
FIELD_TO_KEY = {v: k for k, v in KEY_TO_FIELD.items()}


def _field_key(field_name):
    return FIELD_TO_KEY.get(field_name, field_name)


def _known_keys():
    keys = set()
    for cls in (TrainConfig, EvalConfig):
        for field in dataclasses.fields(cls):
            keys.add(_field_key(field.name))
    return keys


def parse_config_file(path):
    """Reads a key=value file into a string mapping, validating key names."""
    if not os.path.isfile(path):
        raise ConfigError("config", f"config file not found: {path}")
    known = _known_keys()
    mapping = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError("config", f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in known:
                raise ConfigError(key, f"unknown configuration key ({path}:{lineno})")
            mapping[key] = value.strip()
    return mapping


def _coerce(cls, field, raw):
    key = _field_key(field.name)
    if field.type in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {raw!r}")
    if field.type in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {raw!r}")
    if field.name == "target_metric":
        return QualityModel.from_name(raw)
    return str(raw)


def build_config(cls, mapping=None, overrides=None):
    """Builds a config dataclass from file values plus explicit overrides.

    Keys the class does not declare are silently left for other commands
    (parse_config_file already rejected truly unknown names). Override values
    of None mean "not given on the command line".
    """
    values = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if mapping:
        for key, raw in mapping.items():
            name = KEY_TO_FIELD.get(key, key)
            if name in fields:
                values[name] = _coerce(cls, fields[name], raw)
    if overrides:
        for name, value in overrides.items():
            if value is None:
                continue
            if name not in fields:
                raise ConfigError(name, f"not a {cls.__name__} field")
            if isinstance(value, str):
                value = _coerce(cls, fields[name], value)
            values[name] = value
    return cls(**values).validate()


def config_mapping(cfg):
    """Resolved config as an ordered {file key: string value} mapping."""
    mapping = {}
    for field in sorted(dataclasses.fields(cfg), key=lambda f: _field_key(f.name)):
        value = getattr(cfg, field.name)
        if isinstance(value, QualityModel):
            value = value.value
        mapping[_field_key(field.name)] = str(value)
    return mapping


def config_echo(cfg):
    """Resolved config as canonical 'key = value' lines, sorted by key."""
    return [f"{key} = {value}" for key, value in config_mapping(cfg).items()]
