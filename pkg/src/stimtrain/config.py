"""Configuration loading, dotted overrides and experiment presets."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError
from .trainer import TrainConfig


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    description: str
    overrides: dict[str, Any]

    def config(self) -> TrainConfig:
        cfg = TrainConfig()
        for key, value in self.overrides.items():
            set_key(cfg, key, value)
        return cfg.validate()


# Desk-scale ladder: ResNet-20 on CIFAR-10, batch 128, lr 0.1, cosine.
PRESETS: dict[str, ExperimentPreset] = {
    p.name: p
    for p in (
        ExperimentPreset("ct", "Common training (ladder row: CT).", {"mode": "ct", "k_subnets": 0}),
        ExperimentPreset(
            "st",
            "Stimulative training, one subnet per step with plain KL (ladder row: ST).",
            {"mode": "st", "k_subnets": 1, "loss.variant": "kl"},
        ),
        ExperimentPreset(
            "st_klminus_snet6",
            "ST with the magnitude-free KL and six subnets per step (ladder row: +KL- +Snet6).",
            {"mode": "st", "k_subnets": 6, "loss.variant": "kl_minus"},
        ),
        ExperimentPreset(
            "st_sitrans",
            "ST with random smaller subnet inputs (ladder row: +SITrans).",
            {"mode": "st_pp", "k_subnets": 1, "loss.variant": "kl"},
        ),
        ExperimentPreset(
            "st_klminus_snet6_sitrans",
            "ST with KL-, six subnets and random smaller subnet inputs (ladder row: +KL- +Snet6 +SITrans).",
            {"mode": "st_pp", "k_subnets": 6, "loss.variant": "kl_minus"},
        ),
        ExperimentPreset(
            "stpp_a1",
            "Full ST++: KL-, six subnets, smaller subnet inputs and an inter-stage "
            "sampling rule keeping >= 2 blocks per stage (ladder row: +InterSSR).",
            {"mode": "st_pp", "k_subnets": 6, "loss.variant": "kl_minus", "sampling.choices": [2, 2, 2]},
        ),
    )
}


# ---------------------------------------------------------------------------
# dataclass <-> dotted keys


def _fields(obj) -> dict[str, dataclasses.Field]:
    """Config key -> field, honoring ``metadata['key']`` renames."""
    return {f.metadata.get("key", f.name): f for f in dataclasses.fields(obj)}


def _hints(obj) -> dict[str, Any]:
    return typing.get_type_hints(type(obj))


def valid_keys(obj=None, prefix: str = "") -> list[str]:
    obj = obj if obj is not None else TrainConfig()
    keys = []
    hints = _hints(obj)
    for key, f in _fields(obj).items():
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            keys.extend(valid_keys(value, f"{prefix}{key}."))
        else:
            keys.append(prefix + key)
    return keys


def _coerce(path: str, tp, value):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(path, inner[0], value)
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [_coerce(f"{path}[{i}]", item, v) for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def set_key(cfg: TrainConfig, dotted: str, value) -> None:
    parts = dotted.split(".")
    obj = cfg
    for i, part in enumerate(parts):
        fields = _fields(obj)
        if part not in fields:
            raise ConfigError(
                dotted, f"unknown config key; valid keys: {', '.join(valid_keys())}"
            )
        f = fields[part]
        current = getattr(obj, f.name)
        if i < len(parts) - 1:
            if not dataclasses.is_dataclass(current):
                raise ConfigError(dotted, f"{'.'.join(parts[: i + 1])} is not a section")
            obj = current
            continue
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(dotted, f"expected an object for section, got {value!r}")
            for k, v in value.items():
                set_key(cfg, f"{dotted}.{k}", v)
            return
        setattr(obj, f.name, _coerce(dotted, _hints(obj)[f.name], value))


def config_to_dict(obj) -> dict:
    out = {}
    for key, f in _fields(obj).items():
        value = getattr(obj, f.name)
        out[key] = config_to_dict(value) if dataclasses.is_dataclass(value) else value
    return out


def _flatten(d: dict, prefix: str = "") -> Iterable[tuple[str, Any]]:
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def config_from_dict(d: dict, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    for key, value in _flatten(d):
        set_key(cfg, key, value)
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value``; the value is parsed as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    preset: str | None = None,
) -> TrainConfig:
    """Preset defaults, then the JSON file, then ``key=value`` overrides.

    The file may name a preset with a top-level ``"preset"`` key; an explicit
    ``preset`` argument wins.
    """
    data: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        if text.strip():
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(str(path), f"invalid JSON ({exc})") from None
            if not isinstance(data, dict):
                raise ConfigError(str(path), "top level must be a JSON object")
    data = dict(data)
    file_preset = data.pop("preset", None)
    name = preset or file_preset
    if name is not None:
        if name not in PRESETS:
            raise ConfigError("preset", f"unknown preset {name!r}; available: {sorted(PRESETS)}")
        cfg = PRESETS[name].config()
    else:
        cfg = TrainConfig()
    config_from_dict(data, cfg)
    for item in overrides:
        key, value = parse_override(item)
        set_key(cfg, key, value)
    return cfg.validate()
