"""Flat ``key = value`` run configuration with [model], [task] and [train] sections.

Example::

    [model]
    d_model = 64
    injection_targets = q,k,v,fc

    [task]
    shift_fraction = 0.5

    [train]
    epochs = 3
    lambda_ent = 0.01
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigurationError
from .model import ModelConfig
from .tasks import TaskSpec
from .trainer import RunConfig

SECTIONS = {"model": ModelConfig, "task": TaskSpec, "train": RunConfig}


def _coerce(cls, key: str, raw: str) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields or key in ("model", "task"):
        raise ConfigurationError(f"unknown {cls.__name__} key {key!r}")
    default = getattr(cls(), key)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw.strip()


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    d = (base or RunConfig()).to_dict()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]; expected model, task or train")
        cls = SECTIONS[section]
        target = d if section == "train" else d[section]
        for key, raw in parser.items(section):
            try:
                target[key] = _coerce(cls, key, raw)
            except ValueError:
                raise ConfigurationError(f"[{section}] {key}: cannot parse {raw!r}") from None
    # a vocab size given once applies to both model and task
    for sec, other in (("model", "task"), ("task", "model")):
        if parser.has_option(sec, "vocab_size") and not parser.has_option(other, "vocab_size"):
            d[other]["vocab_size"] = d[sec]["vocab_size"]
    return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for section in ("model", "task", "train"):
        lines.append(f"[{section}]")
        values = d if section == "train" else d[section]
        for key, value in values.items():
            if key in ("model", "task"):
                continue
            if isinstance(value, (list, tuple)):
                value = ",".join(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
