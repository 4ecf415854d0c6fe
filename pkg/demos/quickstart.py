#!/usr/bin/env python3
"""End-to-end tour: register a system, run it on two backends, fetch results.

Self-contained: writes a tiny demo system (a "simulator" that echoes its
effective configuration into a result file), boots the service in-process
with a local and a simulated-remote backend, and drives the full lifecycle
over HTTP.
"""

import json
import sys
import tempfile
from pathlib import Path

from simlab.client import EvalClient
from simlab.config import ServiceConfig
from simlab.service import EmbeddedServer

DEMO_SYSDEF = {
    "name": "demo-echo",
    "version": "1.0",
    "docker_image": "local/demo-echo:1",
    "build_command": "python3 build.py",
    "run_command": "python3 run.py",
    "build_parameters": {"compile_args": "-O2"},
    "run_parameters": {"cycles": 1000, "trace": True},
    "results": {"summary": {"path": "out/summary.json", "type": "json"}},
}

BUILD_PY = """\
import sys
print("building with config", sys.argv[1])
open("built.marker", "w").write("ok\\n")
"""

RUN_PY = """\
import json, os, sys
cfg = json.load(open(sys.argv[1]))
params = {"cycles": 1000, "trace": True}
params.update(cfg.get("run_parameters", {}))
os.makedirs("out", exist_ok=True)
json.dump({"simulated_cycles": params["cycles"], "trace": params["trace"]},
          open("out/summary.json", "w"), sort_keys=True)
print("simulated", params["cycles"], "cycles")
"""


def make_demo_repo(root: Path) -> Path:
    root.mkdir(parents=True)
    (root / "sysdef.json").write_text(json.dumps(DEMO_SYSDEF, indent=2))
    (root / "build.py").write_text(BUILD_PY)
    (root / "run.py").write_text(RUN_PY)
    return root


def drive(client: EvalClient, backend: str) -> None:
    exp = client.create_experiment("demo-echo", "1.0", backend=backend)
    print(f"[{backend}] created {exp['id']}")
    client.configure(
        exp["id"],
        {"system": {"name": "demo-echo", "version": "1.0"}, "run_parameters": {"cycles": 250}},
    )
    client.build(exp["id"])
    state = client.wait_while(exp["id"], "Building", 120)
    print(f"[{backend}] build -> {state['state']}")
    client.run(exp["id"])
    state = client.wait_while(exp["id"], "Running", 120)
    print(f"[{backend}] run -> {state['state']}")
    record = client.experiment(exp["id"])
    for outcome in record["action_log"]:
        print(f"[{backend}]   {outcome['action']}: exit {outcome['exit_status']} in {outcome['duration_s']:.3f}s")
    payload = client.result_payload(exp["id"], "summary")
    print(f"[{backend}] summary result: {payload.decode()}")


def main() -> int:
    workdir = Path(tempfile.mkdtemp(prefix="simlab-demo-"))
    repo = make_demo_repo(workdir / "demo-echo-repo")
    data_dir = workdir / "data"
    data_dir.mkdir()
    systems_file = data_dir / "systems.json"
    systems_file.write_text(json.dumps([{"repo_url": str(repo)}]))

    config = ServiceConfig(
        listen="127.0.0.1:0",
        data_dir=data_dir,
        systems_file=systems_file,
        backends=[
            {"id": "local", "kind": "local", "capacity": 4},
            {"id": "cloud-sim", "kind": "remote", "per_action_slowdown": 1.5, "provision_delay_s": 0.5},
        ],
        container_runtime="process",
    )
    server = EmbeddedServer(config).start()
    print(f"service listening on {server.base_url}  (data in {data_dir})")
    try:
        with EvalClient(server.base_url) as client:
            print("systems:", [f"{s['name']} v{s['version']}" for s in client.systems()])
            drive(client, "local")
            drive(client, "cloud-sim")
    finally:
        server.stop()
    print("done; the simulated remote run reports ~1.5x the local duration")
    return 0


if __name__ == "__main__":
    sys.exit(main())
