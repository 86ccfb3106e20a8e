"""Pipeline configuration: an INI-style file of ``[section]`` / ``key = value``.

Sections: ``shift``, ``network``, ``kernel``, ``pretrain``, ``adapt``,
``selection``, ``pipeline``. Unknown sections or keys are errors; missing
keys take their defaults. :func:`dump_config` writes every field, and
parsing the dump reproduces the same :class:`PipelineConfig`.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .data_synth import ShiftSpec
from .kernel_metric import KernelSpec
from .network import CONDITIONS
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    hidden: tuple[int, ...] = (64, 64)
    bottleneck: int = 16
    # layer ids for MJKD features: 0 = input, len(hidden)+1 = bottleneck
    feature_range: tuple[int, int] = (1, 3)
    disc_hidden: int = 32
    disc_dropout: float = 0.5
    condition: str = "product"

    def validate(self) -> None:
        if not self.hidden or any(h < 1 for h in self.hidden) or self.bottleneck < 1:
            raise ConfigError("network widths must be positive")
        lo, hi = self.feature_range
        if not 0 <= lo <= hi <= len(self.hidden) + 1:
            raise ConfigError(f"feature_range {self.feature_range} outside 0..{len(self.hidden) + 1}")
        if self.condition not in CONDITIONS:
            raise ConfigError(f"condition must be one of {CONDITIONS}")
        if not 0 <= self.disc_dropout < 1 or self.disc_hidden < 1:
            raise ConfigError("bad discriminator settings")


@dataclass(frozen=True)
class SelectionSpec:
    proportion: float = 0.25
    rounds: int = 1

    def validate(self) -> None:
        if not 0 < self.proportion <= 1:
            raise ConfigError(f"proportion must be in (0, 1], got {self.proportion}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")


@dataclass(frozen=True)
class PipelineSpec:
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    output_dir: str = "runs"


def _default_pretrain():
    return TrainConfig(adversarial=False)


@dataclass
class PipelineConfig:
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    pretrain: TrainConfig = field(default_factory=_default_pretrain)
    adapt: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectionSpec = field(default_factory=SelectionSpec)
    pipeline: PipelineSpec = field(default_factory=PipelineSpec)

    def validate(self) -> None:
        try:
            self.shift.validate()
            self.pretrain.validate()
            self.adapt.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        self.network.validate()
        self.selection.validate()
        if not self.pipeline.seeds:
            raise ConfigError("at least one seed is required")

    def for_seed(self, seed: int) -> "PipelineConfig":
        """Copy with the data, pretraining and adaptation seeds set to ``seed``."""
        return dataclasses.replace(
            self,
            shift=dataclasses.replace(self.shift, seed=seed),
            pretrain=dataclasses.replace(self.pretrain, seed=seed),
            adapt=dataclasses.replace(self.adapt, seed=seed),
        )


SECTIONS = ("shift", "network", "kernel", "pretrain", "adapt", "selection", "pipeline")


def parse_number(text: str) -> float:
    """Float, also accepting fractions such as ``1/4``."""
    text = text.strip()
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _coerce(text: str, default, section: str, key: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return parse_number(text)
        if isinstance(default, tuple):
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            elem = default[0] if default else 0
            return tuple(_coerce(t, elem, section, key) for t in items)
        return text.strip()
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None


def parse_config(text: str) -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    base = PipelineConfig()
    parts = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    for name in SECTIONS:
        current = getattr(base, name)
        known = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
        updates = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in known:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
                updates[key] = _coerce(raw, known[key], name, key)
        try:
            parts[name] = dataclasses.replace(current, **updates)
        except ValueError as err:
            raise ConfigError(f"[{name}] {err}") from err
    cfg = PipelineConfig(**parts)
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text)


def dump_config(cfg: PipelineConfig) -> str:
    out = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in dataclasses.fields(section):
            out.append(f"{f.name} = {_format(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)
