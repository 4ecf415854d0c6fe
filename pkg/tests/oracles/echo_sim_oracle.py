#!/usr/bin/env python3
"""Standalone oracle for the echo-sim fixture.

Predicts the exact bytes of echo-sim's declared result files from the system
definition, a configuration document, and the set of staged input files,
without touching the service or executing the system. Used to verify that
experiment results are exactly a function of the effective configuration.

    echo_sim_oracle.py --sysdef sysdef.json --syscfg cfg.json \
        [--staged app=/host/path/myApp.elf ...] [--result signal_trace]

Prints the expected result bytes to stdout.
"""

import argparse
import hashlib
import json
import os
import sys


def effective(sysdef, syscfg, section):
    values = {}
    for key, decl in sysdef.get(section, {}).items():
        values[key] = decl["default_value"] if isinstance(decl, dict) else decl
    values.update(syscfg.get(section, {}))
    return values


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sysdef", required=True)
    parser.add_argument("--syscfg", required=True)
    parser.add_argument("--staged", action="append", default=[], metavar="KEY=HOSTPATH")
    parser.add_argument("--repo", default=None, help="repository root for default file params")
    parser.add_argument("--result", default="signal_trace", choices=["signal_trace", "metrics"])
    args = parser.parse_args()

    with open(args.sysdef) as f:
        sysdef = json.load(f)
    with open(args.syscfg) as f:
        syscfg = json.load(f)
    repo = args.repo or os.path.dirname(os.path.abspath(args.sysdef))

    staged = {}
    for item in args.staged:
        key, _, host = item.partition("=")
        staged[key] = host

    build_cfg = effective(sysdef, syscfg, "build_parameters")
    run_cfg = effective(sysdef, syscfg, "run_parameters")
    file_keys = {
        k for k, d in sysdef.get("run_parameters", {}).items()
        if isinstance(d, dict) and d.get("is_file")
    }
    # staging rewrites the override to the in-container path of the copy
    for key, host in staged.items():
        run_cfg[key] = "/sysapi/inputs/" + os.path.basename(host)

    lines = ["echo-sim v1"]
    for key in sorted(build_cfg):
        lines.append("build %s=%s" % (key, json.dumps(build_cfg[key])))
    for key in sorted(run_cfg):
        value = run_cfg[key]
        line = "run %s=%s" % (key, json.dumps(value))
        if key in file_keys:
            if key in staged:
                source = staged[key]
            elif str(value).startswith("/sysapi/"):
                source = None  # points into the volume but nothing was staged
            else:
                source = os.path.join(repo, str(value))
            digest = "missing"
            if source is not None:
                try:
                    with open(source, "rb") as f:
                        digest = hashlib.sha256(f.read()).hexdigest()
                except OSError:
                    digest = "missing"
            line += " sha256=" + digest
        lines.append(line)
    trace = "\n".join(lines) + "\n"

    if args.result == "signal_trace":
        sys.stdout.write(trace)
    else:
        sys.stdout.write(json.dumps({"params": len(run_cfg), "trace_bytes": len(trace)}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
