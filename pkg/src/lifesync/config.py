"""Service configuration: one JSON file plus ``LSG_*`` environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .composition import RuleCatalog
from .errors import ConfigError
from .twin import DEFAULT_HALF_LIFE_HOURS, DEFAULT_SOFT_CAP_MPT, Dimension, TwinSettings

DEFAULT_LISTEN_ADDR = "127.0.0.1:8080"


@dataclass(frozen=True)
class ServiceConfig:
    listen_addr: str = DEFAULT_LISTEN_ADDR
    data_dir: str = "lsg-data"
    rules_path: str | None = None
    half_life_hours: Mapping[str, float] = field(default_factory=dict)
    soft_cap_mpt: Mapping[str, int] = field(default_factory=dict)
    idempotency_retention_hours: float = 24.0
    fsync: bool = True
    test_clock: bool = False
    punitive_overplay: bool = False

    def twin_settings(self) -> TwinSettings:
        try:
            hl = {d: float(self.half_life_hours.get(d.value, DEFAULT_HALF_LIFE_HOURS)) for d in Dimension}
            caps = {d: self.soft_cap_mpt.get(d.value, DEFAULT_SOFT_CAP_MPT) for d in Dimension}
            unknown = (set(self.half_life_hours) | set(self.soft_cap_mpt)) - {d.value for d in Dimension}
            if unknown:
                raise ValueError(f"unknown dimensions {sorted(unknown)}")
            return TwinSettings(hl, caps)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def catalog(self) -> RuleCatalog:
        return RuleCatalog.load(self.rules_path) if self.rules_path else RuleCatalog.default()

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_addr.rpartition(":")
        try:
            return host or "127.0.0.1", int(port)
        except ValueError:
            raise ConfigError(f"bad listen address {self.listen_addr!r}") from None


def _truthy(value: str) -> bool:
    return value.strip().lower() in {"1", "true", "yes", "on"}


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> ServiceConfig:
    """Load the config file named by ``path`` or ``$LSG_CONFIG`` and apply env overrides."""
    env = os.environ if env is None else env
    path = path or env.get("LSG_CONFIG")
    values: dict = {}
    if path:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {f.name for f in fields(ServiceConfig)}
        if set(values) - known:
            raise ConfigError(f"unknown config keys: {sorted(set(values) - known)}")
    if "LSG_LISTEN_ADDR" in env:
        values["listen_addr"] = env["LSG_LISTEN_ADDR"]
    if "LSG_DATA_DIR" in env:
        values["data_dir"] = env["LSG_DATA_DIR"]
    if "LSG_RULES_PATH" in env:
        values["rules_path"] = env["LSG_RULES_PATH"]
    if "LSG_TEST_CLOCK" in env:
        values["test_clock"] = _truthy(env["LSG_TEST_CLOCK"])
    if "LSG_FSYNC" in env:
        values["fsync"] = _truthy(env["LSG_FSYNC"])
    return ServiceConfig(**values)
