"""Run configuration stored as an INI file.

Sections: ``[library]``, ``[constraints]``, ``[policy]``, ``[trainer]``,
``[units]`` and ``[baselines]``. Any field may be omitted and takes its
default; unknown sections or keys are rejected so typos do not pass silently.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataio import UNITS
from .trainer import SearchConfig

SECTIONS = {
    "library": ("binary", "unary", "variables", "use_constant"),
    "constraints": ("l", "N_const", "max_tokens", "inss_enabled", "cosm_enabled", "felc_enabled"),
    "policy": ("hidden", "init_scale", "learning_rate", "entropy_coeff", "clip_norm", "first_token_alpha"),
    "trainer": ("N_size", "N_epoch", "n_group", "augment_factor", "p1", "p2", "seed", "target_transform",
                "fit_restarts", "fit_max_iter", "final_fit_restarts", "hof_capacity", "stop_r2", "threads"),
    "units": ("features",),
    "baselines": ("bm_s0",),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    features: str = "percent"
    bm_s0: float = 0.5

    def __post_init__(self):
        if self.features not in UNITS:
            raise ConfigError(f"[units] features must be one of {UNITS}, got {self.features!r}")


_SEARCH_TYPES = {f.name: f.type for f in fields(SearchConfig)}


def _convert(section: str, key: str, raw: str):
    raw = raw.strip()
    if section == "units":
        return raw
    if section == "baselines":
        return float(raw)
    kind = _SEARCH_TYPES[key]
    if kind.startswith("tuple"):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if raw.lower() in ("", "none", "auto"):
        if "None" not in kind:
            raise ValueError("a value is required")
        return None
    if kind.startswith("bool"):
        if raw.lower() in ("true", "yes", "on", "1"):
            return True
        if raw.lower() in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    search_kw, extra = {}, {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown field {key!r} in [{section}]")
            try:
                value = _convert(section, key, raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
            (extra if section in ("units", "baselines") else search_kw)[key] = value
    try:
        return RunConfig(SearchConfig(**search_kw), **extra)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI text with every field present."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            if section == "units":
                value = cfg.features
            elif section == "baselines":
                value = getattr(cfg, key)
            else:
                value = getattr(cfg.search, key)
            if isinstance(value, tuple):
                text = ", ".join(value)
            elif value is None:
                text = "auto"
            elif isinstance(value, bool):
                text = str(value).lower()
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def with_search(cfg: RunConfig, **overrides) -> RunConfig:
    kw = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, search=replace(cfg.search, **kw)) if kw else cfg
