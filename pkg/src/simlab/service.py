"""The runtime manager service: REST lifecycle API over durable experiments.

Build and run requests return immediately (202) after the state transition;
the action itself executes on the bound backend in a worker thread and its
completion feeds the matching Ok/Err event back into the state machine.
`GET .../state` supports an optional long-poll (``?known=<state>&wait_s=N``)
so clients do not have to busy-poll transitions.
"""

from __future__ import annotations

import argparse
import asyncio
import gc
import json
import logging
import queue as queue_mod
import shutil
import sys
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import uvicorn
from fastapi import Depends, FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles

from simlab.backends import Backend, ExperimentBundle, build_backends, select_backend
from simlab.config import ServiceConfig
from simlab.errors import (
    ConfigError,
    NoEligibleBackend,
    NotAFileParameter,
    ResultNotPresent,
    ResultsNotReady,
    SchemaError,
    SimlabError,
    SystemMismatch,
    Unauthorized,
    UnknownSystem,
)
from simlab.executor import DockerRuntime, ProcessRuntime
from simlab.formats import merge, parse_syscfg, parse_sysdef, sysdef_to_dict
from simlab.model import (
    ActionOutcome,
    Experiment,
    ExperimentState,
    LifecycleEvent,
    Phase,
    SysCfg,
    SysDef,
    SystemId,
)
from simlab.storage import SystemStorage
from simlab.store import ExperimentStore

log = logging.getLogger(__name__)

MAX_WAIT_SLICE_S = 30.0


class SystemResolver:
    """System lookup across the local registry and cascade delegates.

    A system hosted only behind a cascaded backend is still creatable here:
    its SysDef comes from the delegate's listing and its experiments are
    pinned to the offering backend. Delegate listings are cached briefly and
    unreachable delegates simply contribute nothing.
    """

    def __init__(self, storage: SystemStorage, backends: dict[str, Backend], ttl_s: float = 5.0):
        self.storage = storage
        self.backends = backends
        self.ttl_s = ttl_s
        self._lock = threading.Lock()
        self._cache: dict[str, tuple[float, list[dict[str, Any]]]] = {}

    def _delegate_entries(self, backend_id: str) -> list[dict[str, Any]]:
        from simlab.backends import CascadedBackend

        backend = self.backends[backend_id]
        assert isinstance(backend, CascadedBackend)
        with self._lock:
            cached = self._cache.get(backend_id)
            if cached and cached[0] > time.monotonic():
                return cached[1]
        try:
            with backend.client() as client:
                entries = [e for e in client.systems() if e.get("sysdef") and not e.get("error")]
        except SimlabError as exc:
            log.warning("cascade delegate %s listing failed: %s", backend_id, exc.detail)
            entries = []
        with self._lock:
            self._cache[backend_id] = (time.monotonic() + self.ttl_s, entries)
        return entries

    def cascade_offerings(self) -> list[dict[str, Any]]:
        from simlab.backends import CascadedBackend

        offerings: list[dict[str, Any]] = []
        local_ids = {r.cached_id for r in self.storage.list_systems() if r.cached_id}
        for backend_id, backend in self.backends.items():
            if not isinstance(backend, CascadedBackend):
                continue
            for entry in self._delegate_entries(backend_id):
                system = SystemId(entry["name"], entry["version"])
                if system in local_ids:
                    continue
                offerings.append(
                    {
                        "repo_url": None,
                        "revision": None,
                        "resolved_revision": None,
                        "error": None,
                        "name": entry["name"],
                        "version": entry["version"],
                        "image": entry.get("image"),
                        "sysdef": entry["sysdef"],
                        "via_backend": backend_id,
                    }
                )
        return offerings

    def get_sysdef(self, system: SystemId) -> tuple[SysDef, str | None]:
        """Resolve a SysDef; the second element names the offering cascade
        backend, or None when the system is locally registered."""
        try:
            return self.storage.get_sysdef(system), None
        except UnknownSystem:
            pass
        for entry in self.cascade_offerings():
            if entry["name"] == system.name and entry["version"] == system.version:
                sysdef = parse_sysdef(json.dumps(entry["sysdef"]))
                return sysdef, entry["via_backend"]
        raise UnknownSystem(f"no registered system {system}")


class ChangeBroker:
    """Bridges store mutations (worker threads) to async long-poll waiters."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._waiters: dict[str, set[asyncio.Event]] = {}

    def attach_loop(self, loop: asyncio.AbstractEventLoop) -> None:
        self._loop = loop

    def notify(self, experiment_id: str) -> None:
        with self._lock:
            events = list(self._waiters.get(experiment_id, ()))
            loop = self._loop
        if loop is not None:
            for event in events:
                loop.call_soon_threadsafe(event.set)

    def register(self, experiment_id: str) -> asyncio.Event:
        event = asyncio.Event()
        with self._lock:
            self._waiters.setdefault(experiment_id, set()).add(event)
        return event

    def unregister(self, experiment_id: str, event: asyncio.Event) -> None:
        with self._lock:
            waiters = self._waiters.get(experiment_id)
            if waiters is not None:
                waiters.discard(event)
                if not waiters:
                    del self._waiters[experiment_id]

    async def wait(self, event: asyncio.Event, timeout_s: float) -> None:
        try:
            await asyncio.wait_for(event.wait(), timeout=timeout_s)
        except asyncio.TimeoutError:
            pass


@dataclass
class _ActionCompletion:
    """Everything the completion stage needs to finish one action."""

    experiment_id: str
    phase: Phase
    outcome: Any = None
    session: Any = None
    backend_id: str = ""
    error: Exception | None = None
    started_at: float = 0.0
    elapsed_s: float = 0.0


class ActionDispatcher:
    """Owns the worker threads that drive backend actions to completion.

    Capacity-bounded backends get a fixed pool of `capacity` workers fed
    from a FIFO queue, so a thousand queued actions never means a thousand
    parked threads. Unbounded backends run one thread per action. Outcome
    bookkeeping (result harvest, persistence, events) happens on a single
    completion thread so the next queued launch never waits behind it;
    per-experiment ordering is safe because an experiment has at most one
    action in flight.
    """

    def __init__(
        self,
        store: ExperimentStore,
        resolver: SystemResolver,
        backends: dict[str, Backend],
        data_dir: Path,
        action_timeout_s: float,
    ):
        self.store = store
        self.resolver = resolver
        self.backends = backends
        self.staging_dir = data_dir / "staging"
        self.workspaces_dir = data_dir / "workspaces"
        self.action_timeout_s = action_timeout_s
        self._queues: dict[str, "queue_mod.SimpleQueue[tuple[str, Phase]]"] = {}
        self._completions: "queue_mod.SimpleQueue[_ActionCompletion]" = queue_mod.SimpleQueue()
        self._completion_thread: threading.Thread | None = None
        self._inflight = 0
        self._inflight_cv = threading.Condition()
        # one action at a time per experiment (state machine), so plain
        # per-id session reuse is race-free
        self._sessions: dict[str, Any] = {}

    def bundle_for(self, view: dict[str, Any]) -> ExperimentBundle:
        system = SystemId(view["system"]["name"], view["system"]["version"])
        sysdef, _origin = self.resolver.get_sysdef(system)
        cfg = view.get("config") or {}
        syscfg = SysCfg(
            system=system,
            build_overrides=dict(cfg.get("build_overrides", {})),
            run_overrides=dict(cfg.get("run_overrides", {})),
        )
        staging = self.staging_dir / view["id"]
        file_inputs = {
            param: staging / filename for param, filename in view.get("staged_inputs", {}).items()
        }
        return ExperimentBundle(
            experiment_id=view["id"],
            system=system,
            sysdef=sysdef,
            syscfg=syscfg,
            file_inputs=file_inputs,
            session_dir=self.workspaces_dir / view["id"],
            action_timeout_s=self.action_timeout_s,
        )

    def trigger(self, experiment_id: str, phase: Phase) -> dict[str, Any]:
        """Apply the Start event (may raise IllegalTransition) and hand the
        action to its backend's dispatch lane."""
        event = LifecycleEvent.START_BUILD if phase is Phase.BUILD else LifecycleEvent.START_RUN
        snapshot = self.store.apply_event(experiment_id, event)
        backend = self.backends[snapshot["backend"]]
        capacity = backend.descriptor().capacity
        with self._inflight_cv:
            self._inflight += 1
        self._ensure_completion_thread()
        if capacity is not None:
            self._pool_queue(snapshot["backend"], capacity).put((experiment_id, phase))
        else:
            threading.Thread(
                target=self._drive_inline,
                args=(experiment_id, phase),
                name=f"action-{experiment_id}-{phase.value}",
                daemon=True,
            ).start()
        return snapshot

    def session_for(self, view: dict[str, Any]):
        """The live backend session for an experiment, restoring the persisted
        handle when the in-memory one is gone (service restart)."""
        session = self._sessions.get(view["id"])
        if session is not None:
            return session
        stored = view.get("session") or {}
        if "data" not in stored:
            return None
        backend = self.backends[view["backend"]]
        session = backend.restore(self.bundle_for(view), stored["data"])
        self._sessions[view["id"]] = session
        return session

    def _ensure_completion_thread(self) -> None:
        if self._completion_thread is None or not self._completion_thread.is_alive():
            self._completion_thread = threading.Thread(
                target=self._completion_loop, name="action-completions", daemon=True
            )
            self._completion_thread.start()

    def _pool_queue(self, backend_id: str, capacity: int):
        q = self._queues.get(backend_id)
        if q is None:
            q = queue_mod.SimpleQueue()
            self._queues[backend_id] = q
            # one worker more than the capacity: the on-deck action is fully
            # prepared and parked on the backend's capacity gate while its
            # predecessor executes, so a freed slot launches immediately
            for n in range(capacity + 1):
                threading.Thread(
                    target=self._worker_loop, args=(q,), name=f"action-{backend_id}-{n}", daemon=True
                ).start()
        return q

    def _worker_loop(self, q) -> None:
        while True:
            experiment_id, phase = q.get()
            self._completions.put(self._run_action(experiment_id, phase))
            # a sibling worker is launching into the slot this action just
            # freed; yield briefly so that launch wins the interpreter before
            # this worker stages its next action
            time.sleep(0.002)

    def _completion_loop(self) -> None:
        while True:
            try:
                completion = self._completions.get_nowait()
            except queue_mod.Empty:
                completion = self._completions.get()
                # fresh completion usually coincides with a relaunch into the
                # freed slot; let the launch win the interpreter first (under
                # backlog the queue drains at full speed instead)
                time.sleep(0.002)
            try:
                self._finish_action(completion)
            except Exception:  # pragma: no cover - must never kill the loop
                log.exception("completion handling failed for %s", completion.experiment_id)
            finally:
                with self._inflight_cv:
                    self._inflight -= 1
                    self._inflight_cv.notify_all()

    def _drive_inline(self, experiment_id: str, phase: Phase) -> None:
        self._completions.put(self._run_action(experiment_id, phase))

    def _prepare_action(self, experiment_id: str, phase: Phase) -> _ActionCompletion:
        """Resolve the backend session (creating the build workspace when
        needed); failures fold into the completion record."""
        completion = _ActionCompletion(experiment_id=experiment_id, phase=phase, started_at=time.time())
        t0 = time.perf_counter()
        try:
            view = self.store.view(experiment_id)
            backend = self.backends[view["backend"]]
            completion.backend_id = view["backend"]
            if phase is Phase.BUILD:
                bundle = self.bundle_for(view)
                shutil.rmtree(bundle.session_dir, ignore_errors=True)
                self._sessions.pop(experiment_id, None)
                session = backend.prepare(bundle)
                self._sessions[experiment_id] = session
                self.store.update(
                    experiment_id,
                    lambda e: setattr(e, "session", {"backend": backend.descriptor().id, "data": session.data}),
                )
            else:
                session = self.session_for(view)
                if session is None:
                    raise SimlabError("experiment has no prepared session on its backend")
            completion.session = session
        except Exception as exc:
            completion.error = exc
        completion.elapsed_s = time.perf_counter() - t0
        return completion

    def _execute_prepared(self, completion: _ActionCompletion) -> None:
        backend = self.backends[completion.backend_id]
        completion.started_at = time.time()
        t0 = time.perf_counter()
        try:
            completion.outcome = backend.execute(completion.session, completion.phase)
        except Exception as exc:
            completion.error = exc
        completion.elapsed_s += time.perf_counter() - t0

    def _run_action(self, experiment_id: str, phase: Phase) -> _ActionCompletion:
        completion = self._prepare_action(experiment_id, phase)
        if completion.error is None:
            self._execute_prepared(completion)
        return completion

    def _finish_action(self, completion: _ActionCompletion) -> None:
        """Harvest results, release per-run resources, record the outcome."""
        experiment_id, phase = completion.experiment_id, completion.phase
        ok_event = LifecycleEvent.BUILD_OK if phase is Phase.BUILD else LifecycleEvent.RUN_OK
        err_event = LifecycleEvent.BUILD_ERR if phase is Phase.BUILD else LifecycleEvent.RUN_ERR

        if completion.error is not None:
            failure = ActionOutcome(
                action=phase,
                exit_status=-1,
                duration_s=completion.elapsed_s,
                log_ref="",
                started_at=completion.started_at,
            )
            try:
                self.store.apply_event(
                    experiment_id,
                    err_event,
                    mutate=lambda e: e.action_log.append(failure),
                    reason=str(completion.error),
                )
            except SimlabError:
                log.exception("cannot record failed %s action for %s", phase.value, experiment_id)
            return

        outcome = completion.outcome
        session = completion.session
        backend = self.backends[completion.backend_id]
        results = None
        reason = None if outcome.ok else f"{phase.value} exited with status {outcome.exit_status}"
        try:
            if phase is Phase.RUN:
                if outcome.ok:
                    results = backend.fetch_results(session)
                backend.teardown(session)
            elif not outcome.ok:
                backend.teardown(session)
        except Exception as exc:
            reason = f"collecting results failed: {exc}"
            results = None

        def apply_outcome(exp: Experiment) -> None:
            exp.action_log.append(outcome)
            exp.session = {"backend": backend.descriptor().id, "data": session.data}
            if results is not None:
                exp.results = results

        event = ok_event if outcome.ok and reason is None else err_event
        try:
            self.store.apply_event(experiment_id, event, mutate=apply_outcome, reason=reason)
        except SimlabError:
            log.exception("cannot record %s outcome for %s", phase.value, experiment_id)

    def drain(self, deadline_s: float) -> None:
        """Give in-flight actions up to deadline_s to finish."""
        deadline = time.monotonic() + deadline_s
        with self._inflight_cv:
            while self._inflight > 0 and time.monotonic() < deadline:
                self._inflight_cv.wait(timeout=min(0.2, max(0.0, deadline - time.monotonic())))


@dataclass
class ServiceState:
    config: ServiceConfig
    storage: SystemStorage
    store: ExperimentStore
    backends: dict[str, Backend]
    default_backend: str | None
    dispatcher: ActionDispatcher
    broker: ChangeBroker
    resolver: SystemResolver


def _pick_runtime(config: ServiceConfig):
    if config.container_runtime == "docker":
        return DockerRuntime()
    if config.container_runtime == "process":
        return ProcessRuntime()
    docker = DockerRuntime()
    return docker if docker.available() else ProcessRuntime()


def _public_view(view: dict[str, Any]) -> dict[str, Any]:
    """API shape of an experiment record (host paths and sessions stay private)."""
    out = {k: v for k, v in view.items() if k != "session"}
    if out.get("results") is not None:
        out["results"] = {
            key: {f: v for f, v in entry.items() if f != "host_path"}
            for key, entry in out["results"].items()
        }
    return out


def _summary(view: dict[str, Any]) -> dict[str, Any]:
    return {
        "id": view["id"],
        "system": view["system"],
        "backend": view["backend"],
        "state": view["state"],
        "state_reason": view["state_reason"],
        "created_at": view["created_at"],
        "updated_at": view["updated_at"],
    }


def create_service(config: ServiceConfig) -> tuple[FastAPI, ServiceState]:
    # action completions and the next queued launch contend for the GIL;
    # a short switch interval keeps dispatch latency low under load, and
    # sparser cyclic-GC passes keep large experiment populations from
    # stalling dispatch
    sys.setswitchinterval(0.001)
    gc.set_threshold(50_000, 50, 50)
    data_dir = Path(config.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    runtime = _pick_runtime(config)
    storage = SystemStorage(config.resolved_systems_file(), cache_dir=data_dir / "system-cache")
    backends = build_backends(config.backends, storage, runtime)
    default_backend = config.default_backend
    if default_backend is not None and default_backend not in backends:
        raise ConfigError(f"default_backend {default_backend!r} is not a configured backend")
    store = ExperimentStore(data_dir)
    broker = ChangeBroker()
    store.add_listener(broker.notify)
    resolver = SystemResolver(storage, backends)
    dispatcher = ActionDispatcher(store, resolver, backends, data_dir, config.action_timeout_s)
    state = ServiceState(
        config=config,
        storage=storage,
        store=store,
        backends=backends,
        default_backend=default_backend,
        dispatcher=dispatcher,
        broker=broker,
        resolver=resolver,
    )

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        broker.attach_loop(asyncio.get_running_loop())
        yield
        dispatcher.drain(config.drain_deadline_s)

    app = FastAPI(title="simlab", lifespan=lifespan)
    app.state.simlab = state

    @app.exception_handler(SimlabError)
    async def simlab_error_handler(_request: Request, exc: SimlabError):
        return JSONResponse(status_code=exc.http_status, content={"error": exc.code, "detail": exc.detail})

    async def check_auth(request: Request) -> None:
        if config.token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {config.token}":
            raise Unauthorized("missing or invalid bearer token")

    guarded = Depends(check_auth)

    @app.get("/healthz")
    async def healthz():
        return {"ok": True}

    @app.get("/v1/systems", dependencies=[guarded])
    async def list_systems():
        entries = []
        for record in storage.list_systems():
            entry: dict[str, Any] = {
                "repo_url": record.repo_url,
                "revision": record.revision,
                "resolved_revision": record.resolved_revision,
                "error": record.error,
                "name": None,
                "version": None,
                "image": None,
                "sysdef": None,
            }
            if record.sysdef is not None:
                entry["name"] = record.sysdef.id.name
                entry["version"] = record.sysdef.id.version
                entry["image"] = record.sysdef.image
                entry["sysdef"] = sysdef_to_dict(record.sysdef)
            entries.append(entry)
        entries.extend(resolver.cascade_offerings())
        return entries

    @app.get("/v1/backends", dependencies=[guarded])
    async def list_backends():
        return [
            {
                "id": b.descriptor().id,
                "kind": b.descriptor().kind.value,
                "capacity": b.descriptor().capacity,
                "cost_tag": b.descriptor().cost_tag,
                "default": b.descriptor().id == (default_backend or next(iter(backends), None)),
            }
            for b in backends.values()
        ]

    @app.post("/v1/experiments", dependencies=[guarded], status_code=201)
    async def create_experiment(request: Request):
        body = await _json_body(request)
        name = body.get("system_name")
        version = body.get("system_version")
        if not isinstance(name, str) or not isinstance(version, str):
            raise SchemaError("system_name/system_version", "required strings")
        explicit = body.get("backend")
        if explicit is not None and not isinstance(explicit, str):
            raise SchemaError("backend", "must be a string")
        system = SystemId(name, version)
        sysdef, origin = resolver.get_sysdef(system)  # UnknownSystem -> 404
        if origin is not None:
            # only the offering cascade backend can execute this system
            if explicit not in (None, origin):
                raise NoEligibleBackend(
                    f"{system} is offered via cascade backend {origin!r} only"
                )
            backend_id = origin
        else:
            backend_id = select_backend(explicit, sysdef, backends, default_backend)
        snapshot = store.create(system, backend_id)
        return _public_view(snapshot)

    @app.get("/v1/experiments", dependencies=[guarded])
    async def list_experiments(
        state: str | None = None,
        system_name: str | None = None,
        system_version: str | None = None,
        backend: str | None = None,
        limit: int = 100,
        offset: int = 0,
    ):
        rows, total = store.list(
            state=state,
            system_name=system_name,
            system_version=system_version,
            backend=backend,
            limit=limit,
            offset=offset,
        )
        return {"experiments": [_summary(r) for r in rows], "total": total, "limit": limit, "offset": offset}

    @app.get("/v1/experiments/{experiment_id}", dependencies=[guarded])
    async def get_experiment(experiment_id: str):
        return _public_view(store.view(experiment_id))

    @app.put("/v1/experiments/{experiment_id}/config", dependencies=[guarded])
    async def configure(experiment_id: str, request: Request):
        view = store.view(experiment_id)
        raw = (await request.body()).decode("utf-8")
        syscfg = parse_syscfg(raw)
        system = SystemId(view["system"]["name"], view["system"]["version"])
        if syscfg.system != system:
            raise SystemMismatch(f"config addresses {syscfg.system}, experiment is {system}")
        sysdef, _origin = resolver.get_sysdef(system)
        merge(sysdef, syscfg, Phase.BUILD)  # dry-run validation
        merge(sysdef, syscfg, Phase.RUN)

        def set_config(exp: Experiment) -> None:
            exp.config = syscfg

        snapshot = store.apply_event(experiment_id, LifecycleEvent.CONFIGURE, mutate=set_config)
        return _public_view(snapshot)

    @app.post("/v1/experiments/{experiment_id}/inputs/{param}", dependencies=[guarded])
    async def upload_input(experiment_id: str, param: str, request: Request):
        view = store.view(experiment_id)
        system = SystemId(view["system"]["name"], view["system"]["version"])
        sysdef, _origin = resolver.get_sysdef(system)
        declared = {p.key: p for p in sysdef.build_parameters + sysdef.run_parameters}
        if param not in declared or not declared[param].is_file:
            raise NotAFileParameter(param)
        filename = Path(request.headers.get("x-filename", "")).name
        if not filename:
            raise SchemaError("X-Filename", "header with the original file name is required")
        payload = await request.body()
        staging = dispatcher.staging_dir / experiment_id
        staging.mkdir(parents=True, exist_ok=True)
        (staging / filename).write_bytes(payload)

        def record_staged(exp: Experiment) -> None:
            exp.staged_inputs[param] = filename

        snapshot = store.update(experiment_id, record_staged)
        return {"param": param, "filename": filename, "size_bytes": len(payload), "state": snapshot["state"]}

    @app.post("/v1/experiments/{experiment_id}/build", dependencies=[guarded], status_code=202)
    async def trigger_build(experiment_id: str):
        snapshot = dispatcher.trigger(experiment_id, Phase.BUILD)
        return {"id": experiment_id, "state": snapshot["state"]}

    @app.post("/v1/experiments/{experiment_id}/run", dependencies=[guarded], status_code=202)
    async def trigger_run(experiment_id: str):
        snapshot = dispatcher.trigger(experiment_id, Phase.RUN)
        return {"id": experiment_id, "state": snapshot["state"]}

    @app.get("/v1/experiments/{experiment_id}/state", dependencies=[guarded])
    async def get_state(experiment_id: str, known: str | None = None, wait_s: float = 0.0):
        deadline = time.monotonic() + max(0.0, min(wait_s, MAX_WAIT_SLICE_S))
        while True:
            waiter = broker.register(experiment_id) if known is not None else None
            try:
                view = store.view(experiment_id)
                remaining = deadline - time.monotonic()
                if known is None or view["state"] != known or remaining <= 0:
                    return {
                        "id": experiment_id,
                        "state": view["state"],
                        "state_reason": view["state_reason"],
                        "updated_at": view["updated_at"],
                    }
                assert waiter is not None
                await broker.wait(waiter, min(remaining, 5.0))
            finally:
                if waiter is not None:
                    broker.unregister(experiment_id, waiter)

    @app.get("/v1/experiments/{experiment_id}/results", dependencies=[guarded])
    async def get_results(experiment_id: str):
        view = store.view(experiment_id)
        if view["state"] != ExperimentState.FINISHED.value or view.get("results") is None:
            raise ResultsNotReady(f"experiment is {view['state']}; results exist only in Finished")
        return _public_view(view)["results"]

    @app.get("/v1/experiments/{experiment_id}/results/{key}", dependencies=[guarded])
    async def get_result_payload(experiment_id: str, key: str):
        view = store.view(experiment_id)
        if view["state"] != ExperimentState.FINISHED.value or view.get("results") is None:
            raise ResultsNotReady(f"experiment is {view['state']}; results exist only in Finished")
        entry = view["results"].get(key)
        if entry is None:
            raise ResultNotPresent(f"no declared result {key!r}")
        if not entry["present"] or not entry.get("host_path"):
            raise ResultNotPresent(f"result {key!r} was declared but not produced")
        return FileResponse(entry["host_path"], media_type="application/octet-stream", filename=Path(entry["path"]).name)

    @app.get("/v1/experiments/{experiment_id}/log/{action}", dependencies=[guarded])
    async def get_log(experiment_id: str, action: str):
        if action not in (Phase.BUILD.value, Phase.RUN.value):
            raise SchemaError("action", "must be build or run")
        view = store.view(experiment_id)
        backend = backends.get(view["backend"])
        if backend is None:
            raise ResultNotPresent(f"backend {view['backend']} is no longer configured")
        session = dispatcher.session_for(view)
        if session is None:
            raise ResultNotPresent(f"no {action} log captured yet")
        log_path = backend.log_file(session, Phase(action))
        if not log_path.is_file():
            raise ResultNotPresent(f"no {action} log captured yet")
        return PlainTextResponse(log_path.read_text(errors="replace"))

    ui_dir = getattr(config, "ui_dir", None)
    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app, state


async def _json_body(request: Request) -> dict[str, Any]:
    try:
        body = await request.json()
    except ValueError as exc:
        raise SchemaError("body", f"not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise SchemaError("body", "must be a JSON object")
    return body


class EmbeddedServer:
    """Run the service on a background thread (tests, cascaded setups)."""

    def __init__(self, config: ServiceConfig):
        self.app, self.state = create_service(config)
        self._uv_config = uvicorn.Config(
            self.app,
            host=config.host,
            port=config.port,
            log_level="warning",
            access_log=False,
            lifespan="on",
        )
        self._server = uvicorn.Server(self._uv_config)
        self._thread: threading.Thread | None = None

    def start(self, ready_timeout_s: float = 15.0) -> "EmbeddedServer":
        self._thread = threading.Thread(target=self._server.run, name="simlab-server", daemon=True)
        self._thread.start()
        deadline = time.monotonic() + ready_timeout_s
        while not self._server.started:
            if time.monotonic() > deadline or not self._thread.is_alive():
                raise RuntimeError("service failed to start")
            time.sleep(0.01)
        return self

    @property
    def port(self) -> int:
        servers = getattr(self._server, "servers", [])
        for s in servers:
            for sock in s.sockets:
                return sock.getsockname()[1]
        return self._uv_config.port

    @property
    def base_url(self) -> str:
        host = self._uv_config.host
        return f"http://{host}:{self.port}"

    def stop(self, timeout_s: float = 15.0) -> None:
        self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=timeout_s)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="simlab-server", description="Run the experiment service.")
    parser.add_argument("--config", type=Path, default=None, help="service config JSON")
    parser.add_argument("--listen", default=None, help="host:port override")
    parser.add_argument("--data-dir", type=Path, default=None, help="data directory override")
    args = parser.parse_args(argv)

    try:
        config = ServiceConfig.load(args.config) if args.config else ServiceConfig()
        if args.listen:
            config.listen = args.listen
        if args.data_dir:
            config.data_dir = args.data_dir
        app, _state = create_service(config)
    except SimlabError as exc:
        print(f"fatal: {exc.detail}", file=sys.stderr)
        return 2

    try:
        uvicorn.run(app, host=config.host, port=config.port, log_level="info", access_log=False)
    except (OSError, SystemExit) as exc:
        print(f"fatal: cannot serve on {config.listen}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
