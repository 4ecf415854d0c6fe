"""Service configuration: one JSON file, overridable per-flag at startup."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from simlab.errors import ConfigError


@dataclass
class ServiceConfig:
    listen: str = "127.0.0.1:8700"
    data_dir: Path = Path("./simlab-data")
    systems_file: Path | None = None
    backends: list[dict[str, Any]] = field(default_factory=list)
    default_backend: str | None = None
    token: str | None = None
    action_timeout_s: float = 3600.0
    drain_deadline_s: float = 10.0
    container_runtime: str = "auto"  # auto | docker | process
    ui_dir: Path | None = None

    @property
    def host(self) -> str:
        host, _, _ = self.listen.rpartition(":")
        return host or "127.0.0.1"

    @property
    def port(self) -> int:
        _, _, port = self.listen.rpartition(":")
        try:
            return int(port)
        except ValueError as exc:
            raise ConfigError(f"bad listen address {self.listen!r}") from exc

    def resolved_systems_file(self) -> Path:
        return Path(self.systems_file) if self.systems_file else Path(self.data_dir) / "systems.json"

    @staticmethod
    def from_dict(raw: dict[str, Any], base_dir: Path | None = None) -> "ServiceConfig":
        def _path(value: Any) -> Path:
            p = Path(value)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            return p

        known = {
            "listen",
            "data_dir",
            "systems_file",
            "backends",
            "default_backend",
            "token",
            "action_timeout_s",
            "drain_deadline_s",
            "container_runtime",
            "ui_dir",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = ServiceConfig()
        if "listen" in raw:
            cfg.listen = str(raw["listen"])
        if "data_dir" in raw:
            cfg.data_dir = _path(raw["data_dir"])
        if "systems_file" in raw:
            cfg.systems_file = _path(raw["systems_file"])
        cfg.backends = list(raw.get("backends", []))
        cfg.default_backend = raw.get("default_backend")
        cfg.token = raw.get("token")
        if "action_timeout_s" in raw:
            cfg.action_timeout_s = float(raw["action_timeout_s"])
        if "drain_deadline_s" in raw:
            cfg.drain_deadline_s = float(raw["drain_deadline_s"])
        if "container_runtime" in raw:
            cfg.container_runtime = str(raw["container_runtime"])
        if "ui_dir" in raw and raw["ui_dir"]:
            cfg.ui_dir = _path(raw["ui_dir"])
        if cfg.container_runtime not in ("auto", "docker", "process"):
            raise ConfigError(f"container_runtime must be auto|docker|process, got {cfg.container_runtime!r}")
        cfg.port  # validate listen format early
        return cfg

    @staticmethod
    def load(path: Path | str) -> "ServiceConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        return ServiceConfig.from_dict(raw, base_dir=path.parent)
