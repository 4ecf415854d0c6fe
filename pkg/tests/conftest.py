from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from fixture_systems import make_echo_sim_repo, make_sleep_sim_repo
from simlab.config import ServiceConfig

ORACLE_SCRIPT = Path(__file__).parent / "oracles" / "echo_sim_oracle.py"

DEFAULT_BACKENDS = [
    {"id": "local", "kind": "local", "capacity": 8},
    {"id": "cloud-sim", "kind": "remote", "per_action_slowdown": 1.5, "provision_delay_s": 0.0},
]


def spawn_service(config: ServiceConfig, ready_timeout_s: float = 30.0) -> tuple[subprocess.Popen, str]:
    """Run the service binary in its own process; returns (proc, base_url).

    Campaign-scale tests use this instead of the in-process embedded server
    so client and service do not share an interpreter.
    """
    import socket
    import time as _time

    host = config.host
    port = config.port
    if port == 0:
        with socket.socket() as s:
            s.bind((host, 0))
            port = s.getsockname()[1]
        config.listen = f"{host}:{port}"
    config_file = Path(config.data_dir) / "service-config.json"
    payload = {
        "listen": config.listen,
        "data_dir": str(config.data_dir),
        "systems_file": str(config.resolved_systems_file()),
        "backends": config.backends,
        "container_runtime": config.container_runtime,
        "action_timeout_s": config.action_timeout_s,
    }
    if config.default_backend:
        payload["default_backend"] = config.default_backend
    if config.token:
        payload["token"] = config.token
    config_file.write_text(json.dumps(payload))
    proc = subprocess.Popen(
        [sys.executable, "-m", "simlab.service", "--config", str(config_file)],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    base_url = f"http://{host}:{port}"
    import httpx

    deadline = _time.monotonic() + ready_timeout_s
    while _time.monotonic() < deadline:
        if proc.poll() is not None:
            raise RuntimeError("service process died during startup")
        try:
            httpx.get(f"{base_url}/healthz", timeout=1.0)
            return proc, base_url
        except httpx.TransportError:
            _time.sleep(0.05)
    proc.kill()
    raise RuntimeError("service did not become ready")


def stop_service(proc: subprocess.Popen, timeout_s: float = 15.0) -> None:
    if proc.poll() is None:
        proc.terminate()
        try:
            proc.wait(timeout=timeout_s)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait(timeout=timeout_s)


def service_config(
    tmp_path: Path,
    repos: list[Path],
    backends: list[dict] | None = None,
    name: str = "svc",
    **overrides,
) -> ServiceConfig:
    """Config for a test service instance with pre-registered systems."""
    data_dir = tmp_path / name
    data_dir.mkdir(parents=True, exist_ok=True)
    systems_file = data_dir / "systems.json"
    systems_file.write_text(json.dumps([{"repo_url": str(r)} for r in repos]))
    cfg = ServiceConfig(
        listen="127.0.0.1:0",
        data_dir=data_dir,
        systems_file=systems_file,
        backends=backends if backends is not None else [dict(b) for b in DEFAULT_BACKENDS],
        container_runtime="process",
        action_timeout_s=120.0,
        drain_deadline_s=3.0,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture(scope="session")
def echo_repo(tmp_path_factory) -> Path:
    return make_echo_sim_repo(tmp_path_factory.mktemp("echo-sim-repo"))


@pytest.fixture(scope="session")
def sleep_repo(tmp_path_factory) -> Path:
    return make_sleep_sim_repo(tmp_path_factory.mktemp("sleep-sim-repo"))


def run_echo_oracle(
    sysdef_path: Path,
    syscfg_path: Path,
    staged: dict[str, Path] | None = None,
    result: str = "signal_trace",
) -> bytes:
    """Invoke the standalone result oracle and return the predicted bytes."""
    cmd = [
        sys.executable,
        str(ORACLE_SCRIPT),
        "--sysdef",
        str(sysdef_path),
        "--syscfg",
        str(syscfg_path),
        "--result",
        result,
    ]
    for key, host in (staged or {}).items():
        cmd += ["--staged", f"{key}={host}"]
    out = subprocess.run(cmd, check=True, capture_output=True)
    return out.stdout
