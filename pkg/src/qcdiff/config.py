"""Run configuration: a flat, fully serializable record of one experiment.

The on-disk format is INI-style sections of key=value pairs.  Parsing is
strict in both directions: unknown sections or keys raise, and a config
written with `to_text` parses back to an identical object, so a run
directory always carries the exact configuration that produced it.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

FORMAT_VERSION = 1


@dataclass
class RunConfig:
    # reproducibility / layout
    root_seed: int = 0
    output_dir: str = "runs/default"

    # dataset
    n_records: int = 4000
    degrade_fraction: float = 0.85

    # iqa regressor
    iqa_epochs: int = 60
    iqa_lr: float = 5e-3

    # base diffusion training
    train_steps: int = 5500
    batch_size: int = 16
    lr: float = 2e-3
    dropout_prob: float = 0.1

    # adapter training
    adapter_steps: int = 6000
    adapter_batch_size: int = 32
    adapter_lr: float = 1e-4

    # sampler
    g: float = 7.5
    sample_steps: int = 35
    n_samples: int = 8
    sample_class: int = -1  # -1 cycles through all classes

    # adapter / guidance knobs
    lam: float = 0.5
    delta: float = 0.0
    alpha: float = 0.0
    input_mode: str = "raw_scores"
    variant: str = "separate_attention"
    metrics: tuple[str, ...] = ("iqa_score", "contrast")
    percentile: float = 50.0
    posenc_L: int = 1


# Section layout for the on-disk format; every dataclass field appears in
# exactly one section.
SECTIONS: dict[str, tuple[str, ...]] = {
    "run": ("root_seed", "output_dir"),
    "dataset": ("n_records", "degrade_fraction"),
    "iqa": ("iqa_epochs", "iqa_lr"),
    "diffusion": ("train_steps", "batch_size", "lr", "dropout_prob"),
    "adapter": (
        "adapter_steps",
        "adapter_batch_size",
        "adapter_lr",
        "lam",
        "input_mode",
        "variant",
        "metrics",
        "percentile",
        "posenc_L",
    ),
    "sampler": ("g", "sample_steps", "n_samples", "sample_class", "delta", "alpha"),
}

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_covered = [name for names in SECTIONS.values() for name in names]
assert sorted(_covered) == sorted(_FIELDS), "SECTIONS out of sync with RunConfig"


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        if f.type in ("tuple[str, ...]",):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw
    except ValueError as e:
        raise ConfigurationError(f"config key {name!r}: cannot parse {raw!r}") from e


def to_text(config: RunConfig) -> str:
    lines = []
    for section, names in SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {_format_value(getattr(config, name))}")
        lines.append("")
    return "\n".join(lines)


def from_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config: {e}") from e
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigurationError(
                    f"unknown key {key!r} in section [{section}]"
                )
            values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def save_config(path, config: RunConfig):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_text(config))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return from_text(path.read_text())


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `key=value` override strings; keys must be RunConfig fields."""
    updates = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, raw)
    return dataclasses.replace(config, **updates)


def config_dict(config: RunConfig) -> dict:
    """JSON-friendly view (tuples become lists)."""
    d = dataclasses.asdict(config)
    d["metrics"] = list(d["metrics"])
    return d
