"""Run configuration files: flat TOML key-value pairs.

Every :class:`TrainConfig` field may appear, plus ``dataset`` and ``out``.
Unknown keys are rejected.  Command-line values override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .trainer import TrainConfig

RUN_KEYS = ("dataset", "out")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str | None = None
    out: str | None = None


def parse_config(text: str) -> dict:
    data = tomli.loads(text)
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"config must be flat; found tables {nested}")
    return data


def build_run_config(values: dict, overrides: dict | None = None) -> RunConfig:
    merged = dict(values)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    run = {k: merged.pop(k) for k in RUN_KEYS if k in merged}
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = set(merged) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    # TOML integers are fine where floats are expected
    for k, v in merged.items():
        default = getattr(TrainConfig, k, None)
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            merged[k] = float(v)
    cfg = TrainConfig.from_dict(merged)
    cfg.validate()
    return RunConfig(cfg, **run)


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    values = parse_config(Path(path).read_text()) if path else {}
    return build_run_config(values, overrides)


def dump_config(cfg: TrainConfig, **extra) -> str:
    """Inverse of :func:`parse_config` for the flat subset used here."""
    lines = []
    for k, v in list(extra.items()) + list(cfg.to_dict().items()):
        if v is None:
            continue
        lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'
