"""Run configuration: a sectioned, typed key-value file.

Example::

    [run]
    total_steps = 20000
    eval_interval = 5000

    [env]
    distractor_scale = 1.0

    [cbm]
    temperature = 0.1

Sections and keys mirror :class:`RunControls`, :class:`DistractedEnvConfig`
and :class:`CbmConfig`. Omitted keys take their defaults; unknown sections or
keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
import typing
from dataclasses import dataclass, field

from .env import DistractedEnvConfig
from .trainer import CbmConfig

# the run seed drives every component, so it is not repeated in [cbm]
_CBM_EXCLUDED = ("seed",)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class RunControls:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    total_steps: int = 20000
    eval_interval: int = 5000
    warmup_steps: int = 1000
    buffer_capacity: int = 100000
    eval_samples: int = 2048

    def validate(self):
        for name in ("total_steps", "warmup_steps", "eval_samples"):
            if getattr(self, name) < 0:
                raise ConfigError(f"run.{name}: must be nonnegative")
        if self.eval_interval < 1:
            raise ConfigError("run.eval_interval: must be >= 1")
        if self.buffer_capacity < 1:
            raise ConfigError("run.buffer_capacity: must be >= 1")
        if self.seed < 0 or any(s < 0 for s in self.seeds):
            raise ConfigError("run.seed: seeds must be nonnegative")


@dataclass
class RunConfig:
    run: RunControls = field(default_factory=RunControls)
    env: DistractedEnvConfig = field(default_factory=DistractedEnvConfig)
    cbm: CbmConfig = field(default_factory=CbmConfig)

    def validate(self):
        self.run.validate()
        for section in ("env", "cbm"):
            try:
                getattr(self, section).validate()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{section}.{exc}") from None
        if self.run.total_steps > 0 and self.run.warmup_steps < self.cbm.batch_size:
            raise ConfigError("run.warmup_steps: must be at least cbm.batch_size")
        if self.run.buffer_capacity < self.cbm.batch_size:
            raise ConfigError("run.buffer_capacity: smaller than cbm.batch_size")
        return self

    def cbm_config(self, seed: int | None = None) -> CbmConfig:
        return dataclasses.replace(self.cbm, seed=self.run.seed if seed is None else seed)

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))


_SECTIONS = {"run": RunControls, "env": DistractedEnvConfig, "cbm": CbmConfig}


def _section_fields(name):
    hints = typing.get_type_hints(_SECTIONS[name])
    return {f.name: hints[f.name] for f in dataclasses.fields(_SECTIONS[name])
            if not (name == "cbm" and f.name in _CBM_EXCLUDED)}


def _parse_value(key, text, kind):
    text = text.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError(text)
            return lowered == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if kind is list:
            return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def loads_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"[{section}]: unknown section")
        known = _section_fields(section)
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{section}.{key}: unknown key")
            values[section][key] = _parse_value(f"{section}.{key}", raw, known[key])
    config = RunConfig(**{name: cls(**values.get(name, {})) for name, cls in _SECTIONS.items()})
    return config.validate()


def dumps_config(config: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    for section in _SECTIONS:
        obj = getattr(config, section)
        parser[section] = {key: _format_value(getattr(obj, key)) for key in _section_fields(section)}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path) as fh:
        return loads_config(fh.read())


def save_config(config: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_config(config))
