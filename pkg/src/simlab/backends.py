"""Compute backends behind one uniform prepare/execute/collect contract.

Three kinds are interchangeable per experiment:

* ``local``    -- actions run on this host's container runtime.
* ``remote``   -- per-experiment provisioned capacity. The shipped transport
  is a loopback that executes locally while modelling the cost of a remote
  provider (provision delay, slower single-action execution, release delay).
  Real providers plug in behind the same `RemoteTransport` interface.
* ``cascaded`` -- delegation to another service instance through the same
  REST API this package serves; no system sources or images ever reach this
  host, only uploaded inputs travel outward and result payloads travel back.

For a fixed experiment bundle the declared result payloads are identical
bytes no matter which kind executed it (backend transparency); tests pin
that property.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from simlab.client import EvalClient
from simlab.errors import (
    DelegateRejected,
    NoEligibleBackend,
    ProvisionError,
    SimlabError,
    SystemNotOffered,
)
from simlab.executor import (
    TIMEOUT_EXIT_STATUS,
    ContainerRuntime,
    ExperimentWorkspace,
    collect_results,
    execute_action,
    prepare_workspace,
)
from simlab.formats import syscfg_to_dict
from simlab.model import (
    ActionOutcome,
    BackendDescriptor,
    BackendKind,
    Phase,
    ResultEntry,
    ResultIndex,
    SysCfg,
    SysDef,
    SystemId,
)
from simlab.storage import SystemStorage

DEFAULT_ACTION_TIMEOUT_S = 3600.0


@dataclass
class ExperimentBundle:
    """Everything a backend needs to host one experiment."""

    experiment_id: str
    system: SystemId
    sysdef: SysDef
    syscfg: SysCfg
    file_inputs: dict[str, Path] = field(default_factory=dict)
    session_dir: Path = Path(".")
    action_timeout_s: float = DEFAULT_ACTION_TIMEOUT_S


@dataclass
class BackendSession:
    """Handle to one experiment's residence on a backend.

    `data` is the JSON-safe part that survives service restarts."""

    backend_id: str
    bundle: ExperimentBundle
    data: dict[str, Any] = field(default_factory=dict)


class _CapacityGauge:
    """Bounds concurrent actions and records the observed high-water mark."""

    def __init__(self, capacity: int | None):
        self.capacity = capacity
        self._semaphore = threading.Semaphore(capacity) if capacity else None
        self._lock = threading.Lock()
        self._active = 0
        self.high_water = 0

    @contextmanager
    def slot(self) -> Iterator[None]:
        if self._semaphore is not None:
            self._semaphore.acquire()
        with self._lock:
            self._active += 1
            self.high_water = max(self.high_water, self._active)
        try:
            yield
        finally:
            with self._lock:
                self._active -= 1
            if self._semaphore is not None:
                self._semaphore.release()


class Backend:
    """Uniform execution contract all backend kinds implement."""

    def __init__(self, descriptor: BackendDescriptor):
        self._descriptor = descriptor
        self.gauge = _CapacityGauge(descriptor.capacity)

    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    def prepare(self, bundle: ExperimentBundle) -> BackendSession:
        raise NotImplementedError

    def restore(self, bundle: ExperimentBundle, data: dict[str, Any]) -> BackendSession:
        """Reattach to a previously prepared session after a restart."""
        return BackendSession(self._descriptor.id, bundle, dict(data))

    def execute(self, session: BackendSession, action: Phase) -> ActionOutcome:
        raise NotImplementedError

    def fetch_results(self, session: BackendSession) -> ResultIndex:
        raise NotImplementedError

    def result_payload(self, session: BackendSession, index: ResultIndex, key: str) -> Path:
        entry = index[key]
        assert entry.host_path, "present entries carry a host path"
        return Path(entry.host_path)

    def log_file(self, session: BackendSession, action: Phase) -> Path:
        raise NotImplementedError

    def teardown(self, session: BackendSession) -> None:
        """Release per-experiment resources; artifacts stay downloadable."""


class _HostExecution:
    """Checkout + workspace staging + action execution on this host.

    Shared by the local backend and the loopback remote transport.
    """

    def __init__(self, storage: SystemStorage, runtime: ContainerRuntime):
        self.storage = storage
        self.runtime = runtime

    def workspace_root(self, bundle: ExperimentBundle) -> Path:
        return bundle.session_dir / "workspace"

    def prepare(self, bundle: ExperimentBundle) -> ExperimentWorkspace:
        root = self.workspace_root(bundle)
        source = self.storage.checkout(bundle.system, root / "repository")
        ws = prepare_workspace(source, bundle.syscfg, bundle.file_inputs, root=root)
        self.runtime.pull_if_absent(bundle.sysdef.image)
        return ws

    def attach(self, bundle: ExperimentBundle) -> ExperimentWorkspace:
        return ExperimentWorkspace(root=self.workspace_root(bundle))

    def execute(self, bundle: ExperimentBundle, action: Phase, gate=None) -> ActionOutcome:
        ws = self.attach(bundle)
        return execute_action(
            ws,
            bundle.sysdef,
            action,
            self.runtime,
            timeout_s=bundle.action_timeout_s,
            label=bundle.experiment_id,
            gate=gate,
        )

    def results(self, bundle: ExperimentBundle) -> ResultIndex:
        return collect_results(self.attach(bundle), bundle.sysdef)

    def log_file(self, bundle: ExperimentBundle, action: Phase) -> Path:
        return self.attach(bundle).meta / f"{action.value}.log"


class LocalBackend(Backend):
    """Direct execution on this host (full control, fixed capacity)."""

    def __init__(self, descriptor: BackendDescriptor, storage: SystemStorage, runtime: ContainerRuntime):
        super().__init__(descriptor)
        self._host = _HostExecution(storage, runtime)

    def prepare(self, bundle: ExperimentBundle) -> BackendSession:
        ws = self._host.prepare(bundle)
        return BackendSession(self._descriptor.id, bundle, {"workspace": str(ws.root)})

    def execute(self, session: BackendSession, action: Phase) -> ActionOutcome:
        # the capacity slot guards exactly the container execution, so a
        # queued successor launches the moment its predecessor's container
        # exits rather than after the bookkeeping tail
        return self._host.execute(session.bundle, action, gate=self.gauge.slot)

    def fetch_results(self, session: BackendSession) -> ResultIndex:
        return self._host.results(session.bundle)

    def log_file(self, session: BackendSession, action: Phase) -> Path:
        return self._host.log_file(session.bundle, action)


@dataclass(frozen=True)
class RemoteProvisioningModel:
    """Cost model of per-experiment provisioned capacity.

    A single action runs `per_action_slowdown` times longer than locally
    (resource bring-up and weaker single-core performance); provisioning and
    release take fixed delays. Only remote backends apply it.
    """

    provision_delay_s: float = 0.0
    per_action_slowdown: float = 1.0
    release_delay_s: float = 0.0

    def __post_init__(self) -> None:
        if self.per_action_slowdown < 1.0:
            raise ValueError("per_action_slowdown must be >= 1")
        if self.provision_delay_s < 0 or self.release_delay_s < 0:
            raise ValueError("delays must be >= 0")


class RemoteTransport:
    """Executes one experiment's actions on remote capacity.

    Implementations against real providers create an isolated host per
    experiment, sync the workspace, run the container there and sync results
    back. The shipped loopback implementation executes locally and leaves the
    cost modelling to `RemoteBackend`.
    """

    def provision(self, bundle: ExperimentBundle) -> dict[str, Any]:
        raise NotImplementedError

    def execute(self, bundle: ExperimentBundle, action: Phase) -> ActionOutcome:
        raise NotImplementedError

    def results(self, bundle: ExperimentBundle) -> ResultIndex:
        raise NotImplementedError

    def log_file(self, bundle: ExperimentBundle, action: Phase) -> Path:
        raise NotImplementedError

    def release(self, bundle: ExperimentBundle) -> None:
        pass


class LoopbackTransport(RemoteTransport):
    """Simulated remote capacity backed by this host's executor."""

    def __init__(self, storage: SystemStorage, runtime: ContainerRuntime):
        self._host = _HostExecution(storage, runtime)

    def provision(self, bundle: ExperimentBundle) -> dict[str, Any]:
        try:
            ws = self._host.prepare(bundle)
        except SimlabError as exc:
            raise ProvisionError(f"workspace provisioning failed: {exc.detail}") from exc
        return {"workspace": str(ws.root)}

    def execute(self, bundle: ExperimentBundle, action: Phase) -> ActionOutcome:
        return self._host.execute(bundle, action)

    def results(self, bundle: ExperimentBundle) -> ResultIndex:
        return self._host.results(bundle)

    def log_file(self, bundle: ExperimentBundle, action: Phase) -> Path:
        return self._host.log_file(bundle, action)


class RemoteBackend(Backend):
    """Per-experiment provisioned capacity with a modelled cost overhead.

    Dedicated resources per experiment make capacity unbounded by default;
    after release the simulation data stays available, and a later run
    re-provisions transparently.
    """

    def __init__(
        self,
        descriptor: BackendDescriptor,
        transport: RemoteTransport,
        provisioning: RemoteProvisioningModel,
    ):
        super().__init__(descriptor)
        self.transport = transport
        self.provisioning = provisioning

    def _provision(self, bundle: ExperimentBundle) -> dict[str, Any]:
        if self.provisioning.provision_delay_s:
            time.sleep(self.provisioning.provision_delay_s)
        return self.transport.provision(bundle)

    def prepare(self, bundle: ExperimentBundle) -> BackendSession:
        data = self._provision(bundle)
        data["released"] = False
        return BackendSession(self._descriptor.id, bundle, data)

    def execute(self, session: BackendSession, action: Phase) -> ActionOutcome:
        with self.gauge.slot():
            if session.data.get("released"):
                session.data.update(self._provision(session.bundle))
                session.data["released"] = False
            outcome = self.transport.execute(session.bundle, action)
            # hold the session for the modelled extra time, then report the
            # modelled duration: slower remote execution of the same action
            padding = (self.provisioning.per_action_slowdown - 1.0) * outcome.duration_s
            if padding > 0:
                time.sleep(padding)
            outcome.duration_s *= self.provisioning.per_action_slowdown
            return outcome

    def fetch_results(self, session: BackendSession) -> ResultIndex:
        return self.transport.results(session.bundle)

    def log_file(self, session: BackendSession, action: Phase) -> Path:
        return self.transport.log_file(session.bundle, action)

    def teardown(self, session: BackendSession) -> None:
        if not session.data.get("released"):
            if self.provisioning.release_delay_s:
                time.sleep(self.provisioning.release_delay_s)
            session.data["released"] = True


@dataclass(frozen=True)
class CascadeBinding:
    """Where a cascaded backend delegates to, and how it authenticates."""

    base_url: str
    token: str | None = None
    poll_deadline_s: float = 3600.0


class CascadedBackend(Backend):
    """Delegates the whole lifecycle to another service over its REST API.

    The delegate keeps system sources, images and result artifacts inside its
    own domain; this side uploads the user's inputs and pulls result payloads
    back after a finished run.
    """

    def __init__(self, descriptor: BackendDescriptor, binding: CascadeBinding):
        super().__init__(descriptor)
        self.binding = binding

    def client(self) -> EvalClient:
        return EvalClient(self.binding.base_url, token=self.binding.token)

    def prepare(self, bundle: ExperimentBundle) -> BackendSession:
        with self.client() as client:
            offered = client.find_system(bundle.system.name, bundle.system.version)
            if offered is None or offered.get("error"):
                raise SystemNotOffered(
                    f"delegate {self.binding.base_url} does not offer {bundle.system}"
                )
            created = client.create_experiment(bundle.system.name, bundle.system.version)
            remote_id = created["id"]
            client.configure(remote_id, syscfg_to_dict(bundle.syscfg))
            for key, host_path in bundle.file_inputs.items():
                client.upload_input(remote_id, key, Path(host_path).name, Path(host_path).read_bytes())
        (bundle.session_dir / "meta").mkdir(parents=True, exist_ok=True)
        return BackendSession(self._descriptor.id, bundle, {"remote_id": remote_id})

    def _remote_outcome(self, client: EvalClient, remote_id: str, action: Phase) -> dict | None:
        record = client.experiment(remote_id)
        outcomes = [o for o in record.get("action_log", []) if o.get("action") == action.value]
        return outcomes[-1] if outcomes else None

    def execute(self, session: BackendSession, action: Phase) -> ActionOutcome:
        bundle = session.bundle
        remote_id = session.data["remote_id"]
        started_at = time.time()
        t0 = time.perf_counter()
        with self.gauge.slot(), self.client() as client:
            transient = "Building" if action is Phase.BUILD else "Running"
            try:
                if action is Phase.BUILD:
                    client.build(remote_id)
                else:
                    client.run(remote_id)
                state_doc = client.wait_while(
                    remote_id, transient, min(bundle.action_timeout_s, self.binding.poll_deadline_s)
                )
            except SimlabError as exc:
                raise DelegateRejected(
                    f"delegate refused {action.value}: {exc.detail}", remote_experiment_id=remote_id
                ) from exc

            log_file = bundle.session_dir / "meta" / f"{action.value}.log"
            try:
                log_file.write_text(client.log(remote_id, action.value))
            except SimlabError:
                pass

            if state_doc["state"] == transient:
                return ActionOutcome(
                    action=action,
                    exit_status=TIMEOUT_EXIT_STATUS,
                    duration_s=time.perf_counter() - t0,
                    log_ref=log_file.name,
                    started_at=started_at,
                )

            remote = self._remote_outcome(client, remote_id, action)
        if remote is None:
            raise DelegateRejected(
                f"delegate finished {action.value} without an action record",
                remote_experiment_id=remote_id,
            )
        return ActionOutcome(
            action=action,
            exit_status=int(remote["exit_status"]),
            duration_s=float(remote["duration_s"]),
            log_ref=log_file.name,
            started_at=float(remote.get("started_at", started_at)),
        )

    def fetch_results(self, session: BackendSession) -> ResultIndex:
        bundle = session.bundle
        remote_id = session.data["remote_id"]
        index: ResultIndex = {}
        with self.client() as client:
            remote_index = client.results(remote_id)
            for key, entry in remote_index.items():
                local = ResultEntry(
                    path=entry["path"],
                    type=entry.get("type", ""),
                    present=bool(entry["present"]),
                    size_bytes=int(entry.get("size_bytes", 0)),
                )
                if local.present:
                    payload = client.result_payload(remote_id, key)
                    target = bundle.session_dir / "results" / local.path
                    target.parent.mkdir(parents=True, exist_ok=True)
                    target.write_bytes(payload)
                    local.host_path = str(target)
                    local.size_bytes = len(payload)
                index[key] = local
        return index

    def log_file(self, session: BackendSession, action: Phase) -> Path:
        return session.bundle.session_dir / "meta" / f"{action.value}.log"


def select_backend(
    explicit_id: str | None,
    sysdef: SysDef,
    backends: dict[str, Backend],
    default_id: str | None,
) -> str:
    """Pick the backend an experiment binds to.

    Explicit user selection wins; otherwise a system-level kind constraint
    filters candidates; otherwise the configured default.
    """
    if not backends:
        raise NoEligibleBackend("no backends configured")
    if explicit_id is not None:
        if explicit_id not in backends:
            raise NoEligibleBackend(f"backend {explicit_id!r} is not configured")
        backend = backends[explicit_id]
        required = sysdef.required_backend_kind
        if required and backend.descriptor().kind.value != required:
            raise NoEligibleBackend(
                f"system requires a {required} backend, {explicit_id!r} is {backend.descriptor().kind.value}"
            )
        return explicit_id
    required = sysdef.required_backend_kind
    if required:
        for backend_id, backend in backends.items():
            if backend.descriptor().kind.value == required:
                return backend_id
        raise NoEligibleBackend(f"system requires a {required} backend, none configured")
    if default_id and default_id in backends:
        return default_id
    return next(iter(backends))


def build_backends(
    entries: list[dict[str, Any]],
    storage: SystemStorage,
    runtime: ContainerRuntime,
) -> dict[str, Backend]:
    """Instantiate the configured backend registry (static service config)."""
    backends: dict[str, Backend] = {}
    for entry in entries:
        kind = BackendKind(entry["kind"])
        descriptor = BackendDescriptor(
            id=entry["id"],
            kind=kind,
            capacity=entry.get("capacity"),
            cost_tag=entry.get("cost_tag", ""),
        )
        if kind is BackendKind.LOCAL:
            backend: Backend = LocalBackend(descriptor, storage, runtime)
        elif kind is BackendKind.REMOTE:
            provisioning = RemoteProvisioningModel(
                provision_delay_s=float(entry.get("provision_delay_s", 0.0)),
                per_action_slowdown=float(entry.get("per_action_slowdown", 1.5)),
                release_delay_s=float(entry.get("release_delay_s", 0.0)),
            )
            backend = RemoteBackend(descriptor, LoopbackTransport(storage, runtime), provisioning)
        else:
            binding = CascadeBinding(base_url=entry["base_url"], token=entry.get("token"))
            backend = CascadedBackend(descriptor, binding)
        backends[descriptor.id] = backend
    return backends
