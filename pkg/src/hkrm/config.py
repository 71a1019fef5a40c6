"""Run configuration: one TOML file with [world], [explicit], [implicit], [train] and [run] tables.

Every key is optional; missing keys take the defaults below, unknown keys are
rejected and every error names the offending ``section.key``.

    [world]     synthetic world, see hkrm.harness.world.WorldConfig
    [explicit]  edge MLP widths, embedding width, final edge activation
    [implicit]  number of graphs, per-graph MLP widths, embedding width, normalization
    [train]     schedule, optimizer, prior-graph building and evaluation
    [run]       root seed and ablation (baseline, attr, rel, spatial or all)
"""

import sys
from dataclasses import asdict, dataclass, field, fields

import tomli_w

from hkrm.explicit_module import ExplicitConfig
from hkrm.harness.model import ABLATIONS, ModelConfig
from hkrm.harness.training import TrainConfig
from hkrm.harness.world import WorldConfig
from hkrm.implicit_module import ImplicitConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    ablation: str = "all"

    def validate(self):
        if self.seed < 0:
            raise ConfigError("run.seed: must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"run.ablation: must be one of {sorted(ABLATIONS)}, got {self.ablation!r}")


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    explicit: ExplicitConfig = field(default_factory=ExplicitConfig)
    implicit: ImplicitConfig = field(default_factory=ImplicitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSection = field(default_factory=RunSection)

    def model_config(self):
        return ModelConfig(self.explicit, self.implicit, ABLATIONS[self.run.ablation])

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


SECTIONS = {
    "world": WorldConfig,
    "explicit": ExplicitConfig,
    "implicit": ImplicitConfig,
    "train": TrainConfig,
    "run": RunSection,
}


def _coerce(key, value, default):
    """Check ``value`` against the type of the documented default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected an array, got {value!r}")
        kind = type(default[0]) if default else int
        return [_coerce(f"{key}[{i}]", v, kind()) for i, v in enumerate(value)]
    raise ConfigError(f"{key}: unsupported setting")


def _build_section(name, cls, table):
    if not isinstance(table, dict):
        raise ConfigError(f"{name}: expected a table")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    for key in table:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
    values = {key: _coerce(f"{name}.{key}", value, getattr(defaults, key)) for key, value in table.items()}
    try:
        section = cls(**values)
        if hasattr(section, "validate"):
            section.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return section


def config_from_dict(data):
    for name in data:
        if name not in SECTIONS:
            raise ConfigError(f"{name}: unknown section")
    sections = {name: _build_section(name, cls, data.get(name, {})) for name, cls in SECTIONS.items()}
    return RunConfig(**sections)


def parse_config_text(text):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return config_from_dict(data)


def parse_config(path):
    """Read, default and validate a run config file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config {path} is not UTF-8") from exc
    return parse_config_text(text)


def serialize(config):
    """Canonical TOML text: every section, every key, in declaration order."""
    return tomli_w.dumps(config.to_dict())


def normalize(text):
    """Canonical form of a config text, for round-trip comparisons."""
    return serialize(parse_config_text(text))
