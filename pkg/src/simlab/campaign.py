"""Parameter-sweep campaigns over the experiment API.

A campaign expands a Cartesian matrix of configuration axes into one
experiment per point, drives every point through the configure/build/run
lifecycle, and accounts the sweep: makespan (first run submission to last run
completion, on service clocks), total simulation time, and the analytic
prediction both sides are compared against.

Runs are the unit the parallelism bound applies to. Builds and configuration
happen in a preparation phase before the first run is submitted: simulation
parallelization factors describe concurrent simulations, and folding
per-experiment staging into the measured window would make makespans of
highly parallel campaigns meaningless.
"""

from __future__ import annotations

import itertools
import json
import math
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from simlab.client import EvalClient
from simlab.errors import ConfigError, MergeValidationError, SimlabError
from simlab.formats import merge, parse_sysdef
from simlab.model import Phase, Scalar, SysCfg, SystemId

TERMINAL_OK = "Finished"
PREP_CONCURRENCY_DEFAULT = 16
BATCH_POLL_THRESHOLD = 32


@dataclass
class AxisValue:
    label: str
    build_overrides: dict[str, Scalar] = field(default_factory=dict)
    run_overrides: dict[str, Scalar] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)


@dataclass
class Axis:
    name: str
    values: list[AxisValue]


@dataclass
class CampaignSpec:
    system: SystemId
    backend: str | None
    parallelism: int | None  # None = unbounded
    axes: list[Axis]
    per_run_timeout_s: float = 3600.0
    retries: int = 1
    prep_concurrency: int = PREP_CONCURRENCY_DEFAULT

    @property
    def matrix_size(self) -> int:
        size = 1
        for axis in self.axes:
            size *= len(axis.values)
        return size

    @staticmethod
    def from_dict(raw: dict[str, Any]) -> "CampaignSpec":
        system = raw.get("system")
        if not isinstance(system, dict) or "name" not in system or "version" not in system:
            raise ConfigError("campaign spec needs system.name and system.version")
        parallelism_raw = raw.get("parallelism", 1)
        if parallelism_raw in ("unbounded", None):
            parallelism = None
        else:
            parallelism = int(parallelism_raw)
            if parallelism < 1:
                raise ConfigError("parallelism must be a positive integer or 'unbounded'")
        axes_raw = raw.get("axes")
        if not isinstance(axes_raw, list) or not axes_raw:
            raise ConfigError("campaign spec needs a non-empty axes list")
        axes: list[Axis] = []
        for i, axis_raw in enumerate(axes_raw):
            name = axis_raw.get("name", f"axis{i}")
            values_raw = axis_raw.get("values")
            if not isinstance(values_raw, list):
                raise ConfigError(f"axis {name!r} needs a values list")
            values = []
            for j, v in enumerate(values_raw):
                if not isinstance(v, dict):
                    raise ConfigError(f"axis {name!r} value {j} must be an object")
                values.append(
                    AxisValue(
                        label=str(v.get("label", j)),
                        build_overrides=dict(v.get("build_parameters", {})),
                        run_overrides=dict(v.get("run_parameters", {})),
                        inputs=dict(v.get("inputs", {})),
                    )
                )
            axes.append(Axis(name=name, values=values))
        retries = int(raw.get("retries", 1))
        if not 0 <= retries <= 3:
            raise ConfigError("retries must be between 0 and 3")
        return CampaignSpec(
            system=SystemId(system["name"], system["version"]),
            backend=raw.get("backend"),
            parallelism=parallelism,
            axes=axes,
            per_run_timeout_s=float(raw.get("per_run_timeout_s", 3600.0)),
            retries=retries,
            prep_concurrency=int(raw.get("prep_concurrency", PREP_CONCURRENCY_DEFAULT)),
        )

    @staticmethod
    def load(path: Path | str) -> "CampaignSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read campaign spec: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"campaign spec is not valid JSON: {exc}") from exc
        return CampaignSpec.from_dict(raw)


@dataclass
class CampaignPoint:
    index: int
    coordinates: tuple[int, ...]
    labels: dict[str, str]
    build_overrides: dict[str, Scalar]
    run_overrides: dict[str, Scalar]
    inputs: dict[str, str]

    def syscfg(self, system: SystemId) -> SysCfg:
        return SysCfg(system=system, build_overrides=self.build_overrides, run_overrides=self.run_overrides)


def expand(spec: CampaignSpec, sysdef_doc: dict[str, Any]) -> list[CampaignPoint]:
    """Cartesian product of the axes in declaration order.

    Later axes win when two axes override the same key. Every point is
    validated against the SysDef before anything runs.
    """
    sysdef = parse_sysdef(json.dumps(sysdef_doc))
    points: list[CampaignPoint] = []
    ranges = [range(len(axis.values)) for axis in spec.axes]
    for index, coords in enumerate(itertools.product(*ranges)):
        build: dict[str, Scalar] = {}
        run: dict[str, Scalar] = {}
        inputs: dict[str, str] = {}
        labels: dict[str, str] = {}
        for axis, i in zip(spec.axes, coords):
            value = axis.values[i]
            build.update(value.build_overrides)
            run.update(value.run_overrides)
            inputs.update(value.inputs)
            labels[axis.name] = value.label
        point = CampaignPoint(
            index=index,
            coordinates=tuple(coords),
            labels=labels,
            build_overrides=build,
            run_overrides=run,
            inputs=inputs,
        )
        try:
            merge(sysdef, point.syscfg(sysdef.id), Phase.BUILD)
            merge(sysdef, point.syscfg(sysdef.id), Phase.RUN)
        except SimlabError as exc:
            raise MergeValidationError(str(point.coordinates), exc.detail) from exc
        points.append(point)
    return points


def predict_makespan(
    n_runs: int,
    per_run_s: float,
    parallelism: int,
    slowdown: float = 1.0,
    efficiency: float = 1.0,
) -> float:
    """Analytic sweep-time model: ceil(n/p) * t * s / e."""
    if n_runs <= 0 or per_run_s <= 0 or parallelism <= 0 or slowdown <= 0:
        raise ValueError("n_runs, per_run_s, parallelism and slowdown must be positive")
    if not 0 < efficiency <= 1:
        raise ValueError("efficiency must be in (0, 1]")
    return math.ceil(n_runs / parallelism) * per_run_s * slowdown / efficiency


@dataclass
class RunRecord:
    index: int
    coordinates: tuple[int, ...]
    labels: dict[str, str]
    experiment_id: str | None = None
    outcome: str = "NotRun"
    duration_s: float | None = None
    started_at: float | None = None
    ended_at: float | None = None
    attempts: int = 0
    retried: bool = False
    detail: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "coordinates": list(self.coordinates),
            "labels": self.labels,
            "experiment_id": self.experiment_id,
            "outcome": self.outcome,
            "duration_s": self.duration_s,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "attempts": self.attempts,
            "retried": self.retried,
            "detail": self.detail,
        }


@dataclass
class CampaignReport:
    system: SystemId
    backend: str
    parallelism: int | None
    matrix_size: int
    runs: list[RunRecord]
    makespan_s: float
    prep_s: float
    total_sim_time_s: float
    failures: int
    fitted_per_run_s: float | None
    peak_submitted_runs: int
    predictions: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "system": {"name": self.system.name, "version": self.system.version},
            "backend": self.backend,
            "parallelism": self.parallelism if self.parallelism is not None else "unbounded",
            "matrix_size": self.matrix_size,
            "makespan_s": self.makespan_s,
            "prep_s": self.prep_s,
            "total_sim_time_s": self.total_sim_time_s,
            "failures": self.failures,
            "fitted_per_run_s": self.fitted_per_run_s,
            "peak_submitted_runs": self.peak_submitted_runs,
            "predictions": self.predictions,
            "runs": [r.to_dict() for r in self.runs],
        }

    def summary_table(self) -> str:
        def fmt(seconds: float | None) -> str:
            if seconds is None:
                return "-"
            if seconds >= 3600:
                return f"{seconds / 3600:.1f} hours"
            if seconds >= 60:
                return f"{seconds / 60:.1f} minutes"
            return f"{seconds:.3f} seconds"

        parallel = self.parallelism if self.parallelism is not None else "unbounded"
        rows = [
            (f"{self.backend} (measured, x{parallel})", fmt(self.makespan_s)),
            ("model: ideal", fmt(self.predictions.get("ideal_s"))),
            ("model: efficiency-fitted", fmt(self.predictions.get("fitted_s"))),
        ]
        left = max(len("Compute Environment"), *(len(r[0]) for r in rows))
        lines = [
            f"{'Compute Environment'.ljust(left)} | Execution Time",
            f"{'-' * left}-+----------------",
        ]
        lines += [f"{name.ljust(left)} | {value}" for name, value in rows]
        lines.append(
            f"runs={self.matrix_size} failures={self.failures} "
            f"total_sim_time={fmt(self.total_sim_time_s)} prep={fmt(self.prep_s)}"
        )
        return "\n".join(lines)


class _RunGauge:
    """Client-side high-water mark of concurrently submitted runs."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._active = 0
        self.high_water = 0

    def enter(self) -> None:
        with self._lock:
            self._active += 1
            self.high_water = max(self.high_water, self._active)

    def leave(self) -> None:
        with self._lock:
            self._active -= 1


class CampaignRunner:
    def __init__(self, spec: CampaignSpec, api_url: str, token: str | None = None, input_base: Path | None = None):
        self.spec = spec
        self.client = EvalClient(api_url, token=token, max_connections=128)
        self.input_base = Path(input_base) if input_base else Path.cwd()
        self.gauge = _RunGauge()

    def close(self) -> None:
        self.client.close()

    # -- shared lifecycle pieces ------------------------------------------------

    def _sysdef_doc(self) -> dict[str, Any]:
        entry = self.client.find_system(self.spec.system.name, self.spec.system.version)
        if entry is None or not entry.get("sysdef"):
            raise ConfigError(f"service does not list {self.spec.system}")
        return entry["sysdef"]

    def _config_doc(self, point: CampaignPoint) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "system": {"name": self.spec.system.name, "version": self.spec.system.version}
        }
        if point.build_overrides:
            doc["build_parameters"] = point.build_overrides
        if point.run_overrides:
            doc["run_parameters"] = point.run_overrides
        return doc

    def _prepare_point(self, point: CampaignPoint, record: RunRecord) -> bool:
        """create + configure + upload + build; True when the point is Built."""
        for attempt in range(self.spec.retries + 1):
            try:
                if record.experiment_id is None:
                    created = self.client.create_experiment(
                        self.spec.system.name, self.spec.system.version, backend=self.spec.backend
                    )
                    record.experiment_id = created["id"]
                    for param, rel_path in point.inputs.items():
                        host = (self.input_base / rel_path).resolve()
                        self.client.upload_input(record.experiment_id, param, host.name, host.read_bytes())
                self.client.configure(record.experiment_id, self._config_doc(point))
                self.client.build(record.experiment_id)
                state = self.client.wait_while(
                    record.experiment_id, "Building", self.spec.per_run_timeout_s
                )
                if state["state"] == "Built":
                    record.retried = record.retried or attempt > 0
                    return True
                record.outcome = state["state"]
                record.detail = state.get("state_reason")
            except SimlabError as exc:
                record.outcome = "Error"
                record.detail = exc.detail
                if record.experiment_id is None:
                    break  # creation failed; retrying without backoff will not help
        return False

    def _finalize_record(self, record: RunRecord) -> None:
        assert record.experiment_id is not None
        doc = self.client.experiment(record.experiment_id)
        record.outcome = doc["state"]
        record.detail = doc.get("state_reason")
        runs = [o for o in doc.get("action_log", []) if o["action"] == "run"]
        if runs:
            last = runs[-1]
            record.duration_s = last["duration_s"]
            record.started_at = last["started_at"]
            record.ended_at = last["started_at"] + last["duration_s"]
        record.attempts = len(runs)

    def _run_point_windowed(self, point: CampaignPoint, record: RunRecord) -> None:
        """One worker-slot drive: run (+ retry through rebuild) to terminal."""
        assert record.experiment_id is not None
        for attempt in range(self.spec.retries + 1):
            self.gauge.enter()
            try:
                self.client.run(record.experiment_id)
                state = self.client.wait_while(
                    record.experiment_id, "Running", self.spec.per_run_timeout_s
                )
            finally:
                self.gauge.leave()
            if state["state"] == TERMINAL_OK:
                record.retried = record.retried or attempt > 0
                return
            if attempt < self.spec.retries:
                record.retried = True
                if not self._prepare_point(point, record):
                    return
        return

    # -- the run phase ----------------------------------------------------------

    def _run_phase_batched(
        self, prepared: list[tuple[CampaignPoint, RunRecord]], window: int
    ) -> None:
        """Submit runs up to `window` in flight, refilling as runs finish.

        Completions arrive roughly in submission order, so the watcher
        long-polls the oldest in-flight run (zero request pressure while it
        executes), then drains the finished prefix with plain reads. A small
        rotating scan picks up out-of-order finishers without ever hammering
        the service with full sweeps.
        """
        queue = list(prepared)
        pending: dict[str, tuple[CampaignPoint, RunRecord]] = {}
        retry_queue: list[tuple[CampaignPoint, RunRecord]] = []
        deadline = time.monotonic() + self.spec.per_run_timeout_s + 60.0
        last_rotation = time.monotonic()
        rotation_pos = 0

        def settle(exp_id: str, state: str) -> None:
            point, record = pending.pop(exp_id)
            self.gauge.leave()
            if state != TERMINAL_OK and self.spec.retries > 0 and not record.retried:
                record.retried = True
                retry_queue.append((point, record))

        while (queue or pending) and time.monotonic() < deadline:
            while queue and len(pending) < window:
                point, record = queue.pop(0)
                assert record.experiment_id is not None
                self.client.run(record.experiment_id)
                self.gauge.enter()
                pending[record.experiment_id] = (point, record)
                if len(pending) > 128:
                    # very wide bursts: pace submissions so completion
                    # bookkeeping does not pile up behind the dispatch storm
                    time.sleep(0.001)
            if not pending:
                continue

            if not queue:
                # everything is submitted: watch passively in batches so the
                # observer's requests do not compete with action dispatch
                time.sleep(min(1.0, max(0.1, 0.001 * len(pending))))
                for exp_id in list(pending):
                    state = self.client.state(exp_id)["state"]
                    if state in ("Running", "Building"):
                        break
                    settle(exp_id, state)
                if time.monotonic() - last_rotation > 5.0:
                    last_rotation = time.monotonic()
                    ids = list(pending)
                    for offset in range(min(64, len(ids))):
                        exp_id = ids[(rotation_pos + offset) % len(ids)]
                        state = self.client.state(exp_id)["state"]
                        if state not in ("Running", "Building"):
                            settle(exp_id, state)
                    rotation_pos += 64
                continue

            # window still refilling: long-poll the oldest run so a freed slot
            # is refilled promptly
            head_id = next(iter(pending))
            head = self.client.state(head_id, known="Running", wait_s=2.0)
            if head["state"] in ("Running", "Building"):
                continue
            settle(head_id, head["state"])
            for exp_id in list(pending):
                state = self.client.state(exp_id)["state"]
                if state in ("Running", "Building"):
                    break
                settle(exp_id, state)

        for _exp_id, (_point, record) in pending.items():
            self.gauge.leave()
            record.outcome = "Timeout"
        for point, record in retry_queue:
            if self._prepare_point(point, record):
                self._run_point_windowed(point, record)
        for _exp_id, (_point, record) in pending.items():
            self.gauge.leave()
            record.outcome = "Timeout"
        for point, record in retry_queue:
            if self._prepare_point(point, record):
                self._run_point_windowed(point, record)

    def _run_phase_windowed(self, prepared: list[tuple[CampaignPoint, RunRecord]], window: int) -> None:
        """Client-side bound: at most `window` submitted runs at any instant."""
        queue = list(prepared)
        queue_lock = threading.Lock()

        def worker() -> None:
            while True:
                with queue_lock:
                    if not queue:
                        return
                    point, record = queue.pop(0)
                self._run_point_windowed(point, record)

        threads = [threading.Thread(target=worker, name=f"campaign-slot-{i}") for i in range(window)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    def run(self) -> CampaignReport:
        sysdef_doc = self._sysdef_doc()
        points = expand(self.spec, sysdef_doc)
        records = [
            RunRecord(index=p.index, coordinates=p.coordinates, labels=p.labels) for p in points
        ]
        backend_id = self.spec.backend
        capacity: int | None = None
        for entry in self.client.backends():
            if backend_id is None and entry.get("default"):
                backend_id = entry["id"]
            if entry["id"] == backend_id:
                capacity = entry.get("capacity")
        if backend_id is None:
            raise ConfigError("no backend requested and the service reports no default")

        prep_t0 = time.monotonic()
        prepared: list[tuple[CampaignPoint, RunRecord]] = []
        if points:
            with ThreadPoolExecutor(max_workers=min(self.spec.prep_concurrency, len(points))) as pool:
                outcomes = list(pool.map(self._prepare_point, points, records))
            prepared = [(p, r) for p, r, ok in zip(points, records, outcomes) if ok]
        prep_s = time.monotonic() - prep_t0

        n = len(points)
        p_eff = self.spec.parallelism if self.spec.parallelism is not None else max(n, 1)
        if prepared:
            if capacity is not None and capacity <= p_eff:
                # the backend's own capacity enforces the bound: submit all
                self._run_phase_batched(prepared, window=len(prepared))
            elif p_eff <= BATCH_POLL_THRESHOLD:
                self._run_phase_windowed(prepared, min(p_eff, len(prepared)))
            else:
                self._run_phase_batched(prepared, window=p_eff)

        for _point, record in prepared:
            try:
                self._finalize_record(record)
            except SimlabError as exc:
                record.outcome = "Error"
                record.detail = exc.detail

        finished = [r for r in records if r.outcome == TERMINAL_OK and r.started_at is not None]
        makespan = 0.0
        if finished:
            makespan = max(r.ended_at for r in finished) - min(r.started_at for r in finished)
        durations = [r.duration_s for r in finished if r.duration_s is not None]
        fitted = statistics.median(durations) if durations else None
        total = sum(durations)
        predictions: dict[str, float] = {}
        if fitted and n:
            ideal = predict_makespan(n, fitted, p_eff)
            predictions["ideal_s"] = ideal
            if makespan > 0:
                efficiency = min(1.0, max(ideal / makespan, 1e-6))
                predictions["fitted_efficiency"] = efficiency
                predictions["fitted_s"] = predict_makespan(n, fitted, p_eff, efficiency=efficiency)

        return CampaignReport(
            system=self.spec.system,
            backend=backend_id,
            parallelism=self.spec.parallelism,
            matrix_size=n,
            runs=records,
            makespan_s=makespan,
            prep_s=prep_s,
            total_sim_time_s=total,
            failures=sum(1 for r in records if r.outcome != TERMINAL_OK),
            fitted_per_run_s=fitted,
            peak_submitted_runs=self.gauge.high_water,
            predictions=predictions,
        )


def run_campaign(
    spec: CampaignSpec, api_url: str, token: str | None = None, input_base: Path | None = None
) -> CampaignReport:
    runner = CampaignRunner(spec, api_url, token=token, input_base=input_base)
    try:
        return runner.run()
    finally:
        runner.close()
