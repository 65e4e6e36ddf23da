"""Flat ``key = value`` run configuration.

Values are resolved in increasing priority: built-in defaults, a config
file, ``PPASIM_<KEY>`` environment variables, then command-line flags.
Unknown keys and unparsable values raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "PPASIM_"


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # seeds
    seed: int = 0
    texture_seed: int = 0
    jitter_seed: int = 0
    trajectory_seed: int = 0
    noise_seed: int = 0
    train_seed: int = 0
    # dataset
    n_train: int = 8000
    n_test: int = 1600
    sigma_trans: float = 0.15
    sigma_rot: float = 0.03
    # analogue noise
    sigma_read: float = 1.0
    sigma_op: float = 0.25
    # training
    epochs: int = 10
    batch_size: int = 50
    learning_rate: float = 0.2
    momentum: float = 0.9
    input_threshold: float = -40.0
    threshold_margin: float = 2.5
    margin_weight: float = 5.0
    # tracking
    steps: int = 500
    kp: float = 0.3
    ki: float = 0.02
    kd: float = 0.1
    i_clamp: float = 2.0
    v_max: float = 0.25
    guidance: str = "ppa"
    # bridge
    address: str = "127.0.0.1:5577"
    timeout: float = 2.0
    # files
    data_dir: str = "data"
    model_path: str = "data/model.bnn"

    def validate(self) -> Config:
        checks = [
            (self.n_train >= 1 and self.n_test >= 1, "n_train and n_test must be >= 1"),
            (self.sigma_trans >= 0 and self.sigma_rot >= 0, "jitter sigmas must be >= 0"),
            (self.sigma_read >= 0 and self.sigma_op >= 0, "noise sigmas must be >= 0"),
            (self.epochs >= 1 and self.batch_size >= 1, "epochs and batch_size must be >= 1"),
            (self.learning_rate >= 0, "learning_rate must be >= 0"),
            (math.isfinite(self.input_threshold), "input_threshold must be finite"),
            (0 <= self.threshold_margin < math.inf, "threshold_margin must be finite and non-negative"),
            (0 <= self.margin_weight < math.inf, "margin_weight must be finite and non-negative"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (self.steps >= 1, "steps must be >= 1"),
            (min(self.kp, self.ki, self.kd) >= 0, "PID gains must be >= 0"),
            (self.i_clamp > 0 and self.v_max >= 0, "i_clamp must be > 0 and v_max >= 0"),
            (self.guidance in ("ppa", "reference", "groundtruth"), f"unknown guidance {self.guidance!r}"),
            (self.timeout > 0, "timeout must be > 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        host, sep, port = self.address.rpartition(":")
        if not sep or not port.isdigit() or int(port) > 65535:
            raise ConfigError(f"address must be host:port, got {self.address!r}")
        return self

    def lines(self) -> list[str]:
        return [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]


_TYPES = {f.name: f.type for f in fields(Config)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_lines(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw.strip())
    return values


def from_env(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    values = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in _TYPES:
            raise ConfigError(f"unknown environment override {name}")
        values[key] = _convert(key, raw)
    return values


def resolve(path=None, overrides: dict | None = None, environ=None) -> Config:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_lines(text, str(path)))
    values.update(from_env(environ))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(values) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    return dataclasses.replace(Config(), **values).validate()
