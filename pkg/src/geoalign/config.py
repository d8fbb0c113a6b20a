"""Run configuration: defaults, config-file parsing, canonical hashing.

Config files are flat "key = value" text with one section per module:

    [run]
    seed = 0
    [encoder]
    dim = 128
    scales = 1,16,256
    depth = 4
    registers = 4
    heads = 4
    [loss]
    tau_init = 0.07
    include_self_pairs = false
    [trainer]
    batch_size = 64
    steps = 2000
    lr = 3e-4
    modalities = street,aerial,dsm,text,gps

Command-line flags override file values; the sha256-derived hash of the
resolved configuration is embedded in every output.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Optional, Tuple

from .coord_encoder import CoordEncoderConfig
from .errors import ConfigError
from .modality import MODALITIES

_SECTIONS = {
    "seed": "run",
    "dim": "encoder",
    "scales": "encoder",
    "depth": "encoder",
    "registers": "encoder",
    "heads": "encoder",
    "tau_init": "loss",
    "include_self_pairs": "loss",
    "batch_size": "trainer",
    "steps": "trainer",
    "lr": "trainer",
    "modalities": "trainer",
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dim: int = 128
    scales: Tuple[float, ...] = (1.0, 16.0, 256.0)
    depth: int = 4
    registers: int = 4
    heads: int = 4
    tau_init: float = 0.07
    include_self_pairs: bool = False
    batch_size: int = 48
    steps: int = 2000
    lr: float = 3e-4
    modalities: Tuple[str, ...] = MODALITIES

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ConfigError(f"unknown modalities {sorted(unknown)}; valid: {MODALITIES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"duplicate modalities in {self.modalities}")
        if len(self.modalities) < 2:
            raise ConfigError("need at least 2 modalities to contrast")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.steps < 0 or self.lr <= 0:
            raise ConfigError(f"bad trainer config: steps={self.steps} lr={self.lr}")

    def coord_config(self) -> CoordEncoderConfig:
        return CoordEncoderConfig(
            dim=self.dim,
            scales=self.scales,
            depth=self.depth,
            registers=self.registers,
            heads=self.heads,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dim": self.dim,
            "scales": list(self.scales),
            "depth": self.depth,
            "registers": self.registers,
            "heads": self.heads,
            "tau_init": self.tau_init,
            "include_self_pairs": self.include_self_pairs,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "lr": self.lr,
            "modalities": list(self.modalities),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kwargs = dict(d)
        kwargs["scales"] = tuple(kwargs.get("scales", cls.scales))
        kwargs["modalities"] = tuple(kwargs.get("modalities", MODALITIES))
        valid = {f.name for f in fields(cls)}
        extra = set(kwargs) - valid
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**kwargs)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _parse_value(key: str, text: str):
    text = text.strip()
    if key in ("scales",):
        return tuple(float(t) for t in text.split(","))
    if key in ("modalities",):
        return tuple(t.strip() for t in text.split(",") if t.strip())
    if key in ("include_self_pairs",):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"boolean expected for {key}, got {text!r}")
    if key in ("tau_init", "lr"):
        return float(text)
    return int(text)


def read_config_file(path: str) -> dict:
    """Parse a config file into a flat {field: value} dict."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key not in _SECTIONS:
                raise ConfigError(f"{path}: unknown config key {key!r} in [{section}]")
            if _SECTIONS[key] != section:
                raise ConfigError(
                    f"{path}: key {key!r} belongs in [{_SECTIONS[key]}], found in [{section}]"
                )
            out[key] = _parse_value(key, value)
    return out


def write_config_file(path: str, cfg: RunConfig):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for key, value in cfg.to_dict().items():
        section = _SECTIONS[key]
        if not parser.has_section(section):
            parser.add_section(section)
        if isinstance(value, (list, tuple)):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        parser.set(section, key, text)
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)


def resolve_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then config file, then explicit overrides."""
    values = {}
    if path:
        values.update(read_config_file(path))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict({**RunConfig().to_dict(), **values})
