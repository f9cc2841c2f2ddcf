"""Run configuration shared by every CLI subcommand.

The config file is YAML with exactly these keys (all optional)::

    store_path: store            # behavior store root
    backend:
      kind: mock                 # mock | http
      endpoint: null             # required for http, e.g. http://localhost:8000
      model_name: hkfr-mock
    concurrency: 4               # max in-flight backend calls
    sequence_cap: 300            # newest events kept per user
    cutoff_timestamp: 1683590400 # 2023-05-09T00:00:00Z; labels before it are train
    ks: [5, 10]
    variant: full                # full | no_hkf
    seed: 7
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

DEFAULT_CUTOFF = 1683590400  # 2023-05-09T00:00:00Z


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint: str | None = None
    model_name: str = "hkfr-mock"


@dataclass(frozen=True)
class RunConfig:
    store_path: str = "store"
    backend: BackendConfig = field(default_factory=BackendConfig)
    concurrency: int = 4
    sequence_cap: int = 300
    cutoff_timestamp: int = DEFAULT_CUTOFF
    ks: tuple[int, ...] = (5, 10)
    variant: str = "full"
    seed: int = 7

    def __post_init__(self) -> None:
        if self.backend.kind not in ("mock", "http"):
            raise ConfigError(f"backend.kind must be mock or http, not {self.backend.kind!r}")
        if self.backend.kind == "http" and not self.backend.endpoint:
            raise ConfigError("the http backend requires backend.endpoint")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be at least 1")
        if self.sequence_cap < 1:
            raise ConfigError("sequence_cap must be at least 1")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("ks must be a non-empty list of positive integers")
        if self.variant not in ("full", "no_hkf"):
            raise ConfigError(f"variant must be full or no_hkf, not {self.variant!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ks"] = list(self.ks)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_TOP_KEYS = {f.name for f in dataclasses.fields(RunConfig)}
_BACKEND_KEYS = {f.name for f in dataclasses.fields(BackendConfig)}


def config_from_mapping(data: Mapping[str, Any]) -> RunConfig:
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values = dict(data)
    backend = values.pop("backend", None) or {}
    if not isinstance(backend, Mapping):
        raise ConfigError("backend must be a mapping")
    unknown = set(backend) - _BACKEND_KEYS
    if unknown:
        raise ConfigError(f"unknown backend keys: {sorted(unknown)}")
    if "ks" in values:
        values["ks"] = tuple(int(k) for k in values["ks"])
    try:
        return RunConfig(backend=BackendConfig(**backend), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read the YAML file (if any) and apply non-None ``overrides``.

    Override keys use dotted names for backend fields, e.g. ``backend.kind``.
    """
    data: dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        data = loaded
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("backend."):
            data.setdefault("backend", {})
            data["backend"] = {**(data["backend"] or {}), key.split(".", 1)[1]: value}
        else:
            data[key] = value
    return config_from_mapping(data)
