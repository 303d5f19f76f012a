"""Flat ``key = value`` config files with module-prefixed keys.

Keys name dataclass fields directly, e.g. ``train.lr = 1e-5``,
``detector.contrast_threshold = 0.03``, ``gmm.seed = 7``. Lines starting
with ``#`` (or blank) are skipped; parse errors carry the line number.
CLI flags override file values by passing ``overrides``.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .clustering import GmmConfig
from .errors import ConfigError
from .keypoints import DetectorConfig
from .training import TrainConfig

_SECTIONS = {"train": TrainConfig, "detector": DetectorConfig, "gmm": GmmConfig}


def _coerce(raw: str, target_type, key: str, where: str):
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw, 0)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for '{key}': {exc}") from exc


def parse_config_text(text: str, overrides: dict[str, str] | None = None
                      ) -> tuple[TrainConfig, DetectorConfig, GmmConfig]:
    """Parse config text plus optional ``section.field -> raw value`` overrides."""
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    field_types = {
        name: {f.name: f.type for f in dataclasses.fields(cls)}
        for name, cls in _SECTIONS.items()
    }
    # dataclasses may report string annotations under `from __future__ import
    # annotations`; resolve the handful of primitive names we use.
    primitive = {"int": int, "float": float, "bool": bool, "str": str}

    def assign(key: str, raw: str, where: str):
        if "." not in key:
            raise ConfigError(f"{where}: key '{key}' needs a module prefix "
                              f"(one of {', '.join(_SECTIONS)})")
        section, field = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"{where}: unknown section '{section}' in key '{key}'")
        if field not in field_types[section]:
            raise ConfigError(f"{where}: unknown key '{key}'")
        t = field_types[section][field]
        if isinstance(t, str):
            t = primitive.get(t, str)
        values[section][field] = _coerce(raw, t, key, where)

    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        raw = raw.split("#", 1)[0]  # trailing comments
        assign(key.strip(), raw, f"line {line_no}")

    for key, raw in (overrides or {}).items():
        assign(key, str(raw), f"override '{key}'")

    try:
        return (TrainConfig(**values["train"]),
                DetectorConfig(**values["detector"]),
                GmmConfig(**values["gmm"]))
    except Exception as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path, overrides: dict[str, str] | None = None
                ) -> tuple[TrainConfig, DetectorConfig, GmmConfig]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, overrides)
