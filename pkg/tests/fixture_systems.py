"""Deterministic fixture systems used across the test suites.

echo-sim: writes result files derived purely from its effective build+run
configuration and the content of staged file parameters, so an independent
oracle can predict the exact bytes. Failure paths are reachable through
configuration (``compile_args`` containing FAIL breaks the build, a nonzero
``fail_with`` breaks the run).

sleep-sim: compiles a tiny C program during build whose run action sleeps
for ``run_time_ms`` milliseconds; process startup overhead stays in the
single-millisecond range, which campaign timing tests depend on.
"""

from __future__ import annotations

import json
from pathlib import Path

ECHO_SYSDEF = {
    "name": "echo-sim",
    "version": "1.0",
    "docker_image": "local/echo-sim:1",
    "build_command": "python3 build.py",
    "run_command": "python3 run.py",
    "build_parameters": {
        "compile_args": "-O2",
    },
    "run_parameters": {
        "run_time_ms": 1000,
        "app": {"default_value": "demo_sw/demo_app", "is_file": True},
        "simulator_args": "--trace",
        "emit_metrics": True,
        "fail_with": 0,
    },
    "results": {
        "signal_trace": {"path": "out/trace.txt", "type": "txt"},
        "metrics": {"path": "out/metrics.json", "type": "json"},
    },
}

# Shared by build.py and run.py inside the fixture repository.
ECHO_COMMON_PY = '''\
import json
import os


def load(path):
    with open(path) as f:
        return json.load(f)


def effective(sysdef, syscfg, section):
    values = {}
    for key, decl in sysdef.get(section, {}).items():
        values[key] = decl["default_value"] if isinstance(decl, dict) else decl
    values.update(syscfg.get(section, {}))
    return values


def workspace_root(syscfg_path):
    # the config file lives at <root>/inputs/syscfg.json
    return os.path.dirname(os.path.dirname(os.path.abspath(syscfg_path)))


def resolve_path(value, syscfg_path):
    if value.startswith("/sysapi/"):
        return os.path.join(workspace_root(syscfg_path), value[len("/sysapi/"):])
    return value  # repository-relative; cwd is the repository
'''

ECHO_BUILD_PY = '''\
import hashlib
import json
import sys

from common import effective, load

def main():
    sysdef = load("sysdef.json")
    syscfg = load(sys.argv[1])
    cfg = effective(sysdef, syscfg, "build_parameters")
    if "FAIL" in str(cfg.get("compile_args", "")):
        print("build failure requested via compile_args")
        return 2
    with open("build_flags.txt", "w") as f:
        for key in sorted(cfg):
            f.write("%s=%s\\n" % (key, json.dumps(cfg[key])))
    print("build ok")
    return 0

if __name__ == "__main__":
    sys.exit(main())
'''

ECHO_RUN_PY = '''\
import hashlib
import json
import os
import sys

from common import effective, load, resolve_path

def main():
    sysdef = load("sysdef.json")
    syscfg = load(sys.argv[1])
    cfg = effective(sysdef, syscfg, "run_parameters")
    code = int(cfg.get("fail_with", 0))
    if code:
        print("run failure requested via fail_with")
        return code

    file_keys = {
        k for k, d in sysdef.get("run_parameters", {}).items()
        if isinstance(d, dict) and d.get("is_file")
    }
    lines = ["echo-sim v1"]
    try:
        with open("build_flags.txt") as f:
            for line in f.read().splitlines():
                lines.append("build " + line)
    except OSError:
        lines.append("build missing")
    for key in sorted(cfg):
        value = cfg[key]
        line = "run %s=%s" % (key, json.dumps(value))
        if key in file_keys:
            path = resolve_path(str(value), sys.argv[1])
            try:
                with open(path, "rb") as f:
                    line += " sha256=" + hashlib.sha256(f.read()).hexdigest()
            except OSError:
                line += " sha256=missing"
        lines.append(line)
    trace = "\\n".join(lines) + "\\n"

    os.makedirs("out", exist_ok=True)
    with open("out/trace.txt", "w") as f:
        f.write(trace)
    if cfg.get("emit_metrics", True):
        with open("out/metrics.json", "w") as f:
            json.dump({"params": len(cfg), "trace_bytes": len(trace)}, f, sort_keys=True)
    print("run ok")
    return 0

if __name__ == "__main__":
    sys.exit(main())
'''

DEMO_APP_BYTES = b"demo application payload\n"

SLEEP_SYSDEF = {
    "name": "sleep-sim",
    "version": "1.0",
    "docker_image": "local/sleep-sim:1",
    "build_command": "sh build.sh",
    "run_command": "./sim",
    "run_parameters": {
        "run_time_ms": 1000,
    },
    "results": {},
}

SLEEP_BUILD_SH = """\
#!/bin/sh
# trailing argument is the config file path; the build does not need it
exec cc -O0 -o sim sim.c
"""

SLEEP_SIM_C = """\
#include <errno.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <time.h>

/* Simulate for run_time_ms (from the JSON config given as argv[1]) measured
 * from action start: an absolute deadline absorbs startup cost. The action
 * supervisor exports its own start timestamp; fall back to process start. */
int main(int argc, char **argv) {
    struct timespec deadline;
    const char *t0 = getenv("SIMLAB_ACTION_START_NS");
    long long t0_ns = t0 ? atoll(t0) : 0;
    if (t0_ns > 0) {
        deadline.tv_sec = t0_ns / 1000000000LL;
        deadline.tv_nsec = t0_ns % 1000000000LL;
    } else {
        clock_gettime(CLOCK_MONOTONIC, &deadline);
    }
    long ms = 1000;
    if (argc > 1) {
        FILE *f = fopen(argv[1], "rb");
        if (!f) return 1;
        char buf[65536];
        size_t n = fread(buf, 1, sizeof(buf) - 1, f);
        fclose(f);
        buf[n] = 0;
        const char *p = strstr(buf, "\\"run_time_ms\\"");
        if (p) {
            p = strchr(p, ':');
            if (p) ms = strtol(p + 1, NULL, 10);
        }
    }
    if (ms < 0) ms = 0;
    deadline.tv_nsec += (ms % 1000) * 1000000L;
    deadline.tv_sec += ms / 1000 + deadline.tv_nsec / 1000000000L;
    deadline.tv_nsec %= 1000000000L;
    /* coarse sleep to ~2ms short of the deadline, then spin: kernel timer
     * overshoot would otherwise stretch every simulated run */
    struct timespec coarse = deadline;
    coarse.tv_nsec -= 2000000L;
    if (coarse.tv_nsec < 0) { coarse.tv_nsec += 1000000000L; coarse.tv_sec -= 1; }
    while (clock_nanosleep(CLOCK_MONOTONIC, TIMER_ABSTIME, &coarse, NULL) == EINTR) {
    }
    struct timespec now;
    do {
        clock_gettime(CLOCK_MONOTONIC, &now);
    } while (now.tv_sec < deadline.tv_sec ||
             (now.tv_sec == deadline.tv_sec && now.tv_nsec < deadline.tv_nsec));
    return 0;
}
"""


def make_echo_sim_repo(root: Path, name: str = "echo-sim", version: str = "1.0") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sysdef = dict(ECHO_SYSDEF, name=name, version=version)
    (root / "sysdef.json").write_text(json.dumps(sysdef, indent=2) + "\n")
    (root / "common.py").write_text(ECHO_COMMON_PY)
    (root / "build.py").write_text(ECHO_BUILD_PY)
    (root / "run.py").write_text(ECHO_RUN_PY)
    (root / "demo_sw").mkdir(exist_ok=True)
    (root / "demo_sw" / "demo_app").write_bytes(DEMO_APP_BYTES)
    return root


def make_sleep_sim_repo(root: Path, name: str = "sleep-sim", version: str = "1.0") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sysdef = dict(SLEEP_SYSDEF, name=name, version=version)
    (root / "sysdef.json").write_text(json.dumps(sysdef, indent=2) + "\n")
    (root / "build.sh").write_text(SLEEP_BUILD_SH)
    (root / "sim.c").write_text(SLEEP_SIM_C)
    return root


def make_broken_repo(root: Path) -> Path:
    """Repository whose sysdef.json does not parse."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "sysdef.json").write_text('{"name": "broken", "version": ')
    return root
