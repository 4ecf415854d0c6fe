"""`campaign` command line tool: expand, predict, and run parameter sweeps."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from simlab.campaign import CampaignSpec, expand, predict_makespan, run_campaign
from simlab.client import EvalClient
from simlab.errors import SimlabError


def _cmd_run(args: argparse.Namespace) -> int:
    spec = CampaignSpec.load(args.spec)
    report = run_campaign(
        spec, args.api, token=args.token, input_base=Path(args.spec).parent
    )
    print(report.summary_table())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        print(f"report written to {args.out}")
    return 0 if report.failures == 0 else 1


def _cmd_predict(args: argparse.Namespace) -> int:
    seconds = predict_makespan(
        args.n, args.per_run_s, args.parallelism, args.slowdown, args.efficiency
    )
    print(f"{seconds:.0f} s ({seconds / 3600:.2f} h)")
    return 0


def _cmd_expand(args: argparse.Namespace) -> int:
    spec = CampaignSpec.load(args.spec)
    with EvalClient(args.api, token=args.token) as client:
        entry = client.find_system(spec.system.name, spec.system.version)
    if entry is None or not entry.get("sysdef"):
        print(f"error: service does not list {spec.system}", file=sys.stderr)
        return 2
    points = expand(spec, entry["sysdef"])
    for point in points:
        labels = ", ".join(f"{k}={v}" for k, v in point.labels.items())
        print(
            f"[{point.index:4d}] {labels} build={json.dumps(point.build_overrides)} "
            f"run={json.dumps(point.run_overrides)}"
        )
    print(f"{len(points)} points")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="campaign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="expand the matrix and drive every point")
    p_run.add_argument("--spec", required=True, help="campaign spec JSON file")
    p_run.add_argument("--api", required=True, help="service base URL")
    p_run.add_argument("--token", default=None)
    p_run.add_argument("--out", default=None, help="write the JSON report here")
    p_run.set_defaults(fn=_cmd_run)

    p_pred = sub.add_parser("predict", help="analytic makespan model")
    p_pred.add_argument("--n", type=int, required=True)
    p_pred.add_argument("--per-run-s", dest="per_run_s", type=float, required=True)
    p_pred.add_argument("--parallelism", type=int, required=True)
    p_pred.add_argument("--slowdown", type=float, default=1.0)
    p_pred.add_argument("--efficiency", type=float, default=1.0)
    p_pred.set_defaults(fn=_cmd_predict)

    p_exp = sub.add_parser("expand", help="dry-run listing of the matrix")
    p_exp.add_argument("--spec", required=True)
    p_exp.add_argument("--api", required=True)
    p_exp.add_argument("--token", default=None)
    p_exp.set_defaults(fn=_cmd_expand)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SimlabError as exc:
        print(f"error: {exc.detail}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
