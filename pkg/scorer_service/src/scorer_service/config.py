"""Service configuration: defaults < config file < environment variables.

Environment keys are the upper-cased field names with a ``SCORER_`` prefix
(SCORER_MODEL, SCORER_RESOLUTION, SCORER_SHUFFLE_POSITIONS, ...).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

EFFECTIVE_PATCH = 28  # vision tokens come from 28x28 pixel cells
SHUFFLE_MODES = ("off", "query", "both")


@dataclass
class ServiceConfig:
    model: str = "patchstat-v1"
    resolution: int = 560
    shuffle_positions: str = "off"
    max_candidates: int = 256     # per-request batch ceiling
    max_concurrency: int = 8      # simultaneous score/extract requests
    device: str = "cpu"

    def __post_init__(self):
        if self.resolution < EFFECTIVE_PATCH or self.resolution % EFFECTIVE_PATCH != 0:
            raise ValueError(
                f"resolution {self.resolution} must be a positive multiple of {EFFECTIVE_PATCH}"
            )
        if self.shuffle_positions not in SHUFFLE_MODES:
            raise ValueError(f"shuffle_positions must be one of {SHUFFLE_MODES}")
        if self.max_candidates < 1 or self.max_concurrency < 1:
            raise ValueError("batch/concurrency knobs must be positive")


def _parse_kv_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        values[key.replace("-", "_")] = value
    return values


def load_config(config_file=None, env=None) -> ServiceConfig:
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    if config_file:
        raw.update(_parse_kv_file(config_file))
    for field in fields(ServiceConfig):
        env_key = f"SCORER_{field.name.upper()}"
        if env_key in env:
            raw[field.name] = env[env_key]
    known = {f.name: f.type for f in fields(ServiceConfig)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for field in fields(ServiceConfig):
        if field.name not in raw:
            continue
        value = raw[field.name]
        kwargs[field.name] = int(value) if isinstance(field.default, int) else value
    return ServiceConfig(**kwargs)
