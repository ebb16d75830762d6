"""Plain-text run configuration.

Format: ``[section]`` headers followed by ``key = value`` lines; ``#`` starts a
comment. Tuples are comma-separated. Sections map onto the config dataclasses::

    [model]      ModelConfig scalars (num_classes, k, levels, ...)
    [backbone]   BackboneConfig
    [anchors]    AnchorConfig
    [train]      TrainConfig
    [inference]  InferenceConfig
    [data]       DataConfig

Unknown sections or keys are errors. :func:`format_config` writes a text that
:func:`parse_config` reads back to an equal :class:`RunConfig`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .backbone import BackboneConfig
from .data import DataError
from .model import InferenceConfig, ModelConfig, TrainConfig
from .rpn import AnchorConfig


class ConfigError(DataError):
    """Malformed or unknown configuration entry."""


@dataclass
class DataConfig:
    train_dir: str = ""
    test_dir: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    data: DataConfig = field(default_factory=DataConfig)


# nested dataclasses inside ModelConfig get their own sections
_NESTED = ("backbone", "anchors")
SECTIONS = ("model", "backbone", "anchors", "train", "inference", "data")


def _section_objects(cfg: RunConfig) -> dict:
    return {
        "model": cfg.model,
        "backbone": cfg.model.backbone,
        "anchors": cfg.model.anchors,
        "train": cfg.train,
        "inference": cfg.inference,
        "data": cfg.data,
    }


def _parse_scalar(text: str, like, where: str):
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(like).__name__}") from None


def _parse_value(text: str, default, where: str):
    if isinstance(default, tuple):
        like = default[0] if default else 0.0
        items = [s.strip() for s in text.split(",") if s.strip()]
        return tuple(_parse_scalar(s, like, where) for s in items)
    return _parse_scalar(text, default, where)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text; missing keys keep their defaults."""
    defaults = _section_objects(RunConfig())
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if section is None:
            raise ConfigError(f"{where}: entry before any [section] header")
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        obj = defaults[section]
        known = {f.name for f in fields(obj)}
        if section == "model":
            known -= set(_NESTED)
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        if key in updates[section]:
            raise ConfigError(f"{where}: duplicate key {key!r} in [{section}]")
        updates[section][key] = _parse_value(value, getattr(obj, key), where)

    try:
        backbone = replace(defaults["backbone"], **updates["backbone"])
        anchors = replace(defaults["anchors"], **updates["anchors"])
        model = replace(defaults["model"], backbone=backbone, anchors=anchors, **updates["model"])
        return RunConfig(
            model=model,
            train=replace(defaults["train"], **updates["train"]),
            inference=replace(defaults["inference"], **updates["inference"]),
            data=replace(defaults["data"], **updates["data"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid configuration: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def format_config(cfg: RunConfig) -> str:
    """Every field of every section, in declaration order."""
    lines = []
    for name, obj in _section_objects(cfg).items():
        lines.append(f"[{name}]")
        for f in fields(obj):
            if name == "model" and f.name in _NESTED:
                continue
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
