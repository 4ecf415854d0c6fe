"""Domain types and the experiment lifecycle state machine.

Everything here is a plain value type plus one pure function (`transition`);
mutation of experiment records is owned by the store, so these types are safe
to share across threads without coordination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from simlab.errors import IllegalTransition, SchemaError

Scalar = str | int | float | bool

_KIND_NAMES = {str: "string", bool: "boolean", int: "number", float: "number"}


def scalar_kind(value: Scalar) -> str:
    """Classify a scalar as string / number / boolean (bool before int!)."""
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    raise TypeError(f"not a scalar: {type(value).__name__}")


def is_scalar(value: Any) -> bool:
    return isinstance(value, (str, int, float, bool))


class Phase(str, Enum):
    """The two parameterized actions of a system's workflow."""

    BUILD = "build"
    RUN = "run"


@dataclass(frozen=True)
class SystemId:
    """Unique key of a system: exact string match on both fields."""

    name: str
    version: str

    def __post_init__(self) -> None:
        if not self.name:
            raise SchemaError("name", "must be a non-empty string")
        if not self.version:
            raise SchemaError("version", "must be a non-empty string")

    def __str__(self) -> str:
        return f"{self.name} v{self.version}"


@dataclass(frozen=True)
class ParameterDef:
    """A user-configurable parameter with its default value.

    File parameters (`is_file`) default to a path interpreted relative to the
    repository root of the system workspace; once a file is staged for them the
    effective value becomes the in-container path of the staged copy.
    """

    key: str
    default_value: Scalar
    is_file: bool = False
    phase: Phase = Phase.RUN

    def __post_init__(self) -> None:
        if not self.key:
            raise SchemaError("parameter", "key must be non-empty")
        if not is_scalar(self.default_value):
            raise SchemaError(self.key, "default_value must be a scalar")
        if self.is_file and not isinstance(self.default_value, str):
            raise SchemaError(self.key, "file parameter default must be a string path")


@dataclass(frozen=True)
class ResultDecl:
    """A result artifact the system promises to produce during the run action.

    `path` is relative to the repository directory and must stay confined to
    the workspace (no leading slash, no `..`).
    """

    key: str
    path: str
    type: str = ""

    def __post_init__(self) -> None:
        if not self.key:
            raise SchemaError("results", "result key must be non-empty")
        if not self.path or self.path.startswith("/") or self.path.startswith("\\"):
            raise SchemaError(f"results.{self.key}", "path must be relative")
        if ".." in self.path.split("/"):
            raise SchemaError(f"results.{self.key}", "path must not contain '..'")


@dataclass(frozen=True)
class SysDef:
    """The machine-readable contract of a system (identity, image, actions,
    parameter schemas, declared results)."""

    id: SystemId
    image: str
    build_command: str
    run_command: str
    build_parameters: tuple[ParameterDef, ...] = ()
    run_parameters: tuple[ParameterDef, ...] = ()
    results: tuple[ResultDecl, ...] = ()
    required_backend_kind: str | None = None

    def __post_init__(self) -> None:
        if not self.image:
            raise SchemaError("docker_image", "must be non-empty")
        if not self.build_command:
            raise SchemaError("build_command", "must be non-empty")
        if not self.run_command:
            raise SchemaError("run_command", "must be non-empty")
        for phase, params in ((Phase.BUILD, self.build_parameters), (Phase.RUN, self.run_parameters)):
            seen: set[str] = set()
            for p in params:
                if p.phase is not phase:
                    raise SchemaError(p.key, f"parameter declared under {phase.value} has phase {p.phase.value}")
                if p.key in seen:
                    raise SchemaError(p.key, f"duplicate {phase.value} parameter")
                seen.add(p.key)

    def parameters(self, phase: Phase) -> tuple[ParameterDef, ...]:
        return self.build_parameters if phase is Phase.BUILD else self.run_parameters

    def parameter_map(self, phase: Phase) -> dict[str, ParameterDef]:
        return {p.key: p for p in self.parameters(phase)}

    def command(self, phase: Phase) -> str:
        return self.build_command if phase is Phase.BUILD else self.run_command


@dataclass(frozen=True)
class SysCfg:
    """A user's partial override of SysDef parameters for one experiment."""

    system: SystemId
    build_overrides: Mapping[str, Scalar] = field(default_factory=dict)
    run_overrides: Mapping[str, Scalar] = field(default_factory=dict)

    def overrides(self, phase: Phase) -> Mapping[str, Scalar]:
        return self.build_overrides if phase is Phase.BUILD else self.run_overrides

    def with_run_override(self, key: str, value: Scalar) -> "SysCfg":
        merged = dict(self.run_overrides)
        merged[key] = value
        return SysCfg(self.system, dict(self.build_overrides), merged)


class ExperimentState(str, Enum):
    CREATED = "Created"
    CONFIGURED = "Configured"
    BUILDING = "Building"
    BUILT = "Built"
    BUILD_FAILED = "BuildFailed"
    RUNNING = "Running"
    FINISHED = "Finished"
    RUN_FAILED = "RunFailed"


class LifecycleEvent(str, Enum):
    CONFIGURE = "Configure"
    START_BUILD = "StartBuild"
    BUILD_OK = "BuildOk"
    BUILD_ERR = "BuildErr"
    START_RUN = "StartRun"
    RUN_OK = "RunOk"
    RUN_ERR = "RunErr"
    RECONFIGURE = "Reconfigure"


_S = ExperimentState
_E = LifecycleEvent

# The normative transition table. Anything absent is an illegal transition.
# A finished experiment may start another run with the same build; every
# non-transient state can be reconfigured, which restarts the workflow.
TRANSITIONS: dict[tuple[ExperimentState, LifecycleEvent], ExperimentState] = {
    (_S.CREATED, _E.CONFIGURE): _S.CONFIGURED,
    (_S.CONFIGURED, _E.CONFIGURE): _S.CONFIGURED,
    (_S.CONFIGURED, _E.START_BUILD): _S.BUILDING,
    (_S.BUILDING, _E.BUILD_OK): _S.BUILT,
    (_S.BUILDING, _E.BUILD_ERR): _S.BUILD_FAILED,
    (_S.BUILT, _E.START_RUN): _S.RUNNING,
    (_S.RUNNING, _E.RUN_OK): _S.FINISHED,
    (_S.RUNNING, _E.RUN_ERR): _S.RUN_FAILED,
    (_S.BUILT, _E.CONFIGURE): _S.CONFIGURED,
    (_S.FINISHED, _E.CONFIGURE): _S.CONFIGURED,
    (_S.BUILD_FAILED, _E.CONFIGURE): _S.CONFIGURED,
    (_S.RUN_FAILED, _E.CONFIGURE): _S.CONFIGURED,
    (_S.FINISHED, _E.START_RUN): _S.RUNNING,
}


def transition(current: ExperimentState, event: LifecycleEvent) -> ExperimentState:
    """Pure, total successor function over state x event.

    Raises IllegalTransition for every pair not in the table.
    """
    try:
        return TRANSITIONS[(current, event)]
    except KeyError:
        raise IllegalTransition(current.value, event.value) from None


def is_legal(current: ExperimentState, event: LifecycleEvent) -> bool:
    return (current, event) in TRANSITIONS


class BackendKind(str, Enum):
    LOCAL = "local"
    REMOTE = "remote"
    CASCADED = "cascaded"


@dataclass(frozen=True)
class BackendDescriptor:
    """Identity and capacity of an execution target.

    capacity None means unbounded; otherwise at most `capacity` actions may
    execute concurrently on the backend.
    """

    id: str
    kind: BackendKind
    capacity: int | None = None
    cost_tag: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise SchemaError("backend.id", "must be non-empty")
        if self.capacity is not None and self.capacity < 1:
            raise SchemaError("backend.capacity", "must be a positive integer or null")


@dataclass
class ActionOutcome:
    """Record of one executed build/run action. exit_status 0 is success."""

    action: Phase
    exit_status: int
    duration_s: float
    log_ref: str
    started_at: float

    @property
    def ok(self) -> bool:
        return self.exit_status == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "action": self.action.value,
            "exit_status": self.exit_status,
            "duration_s": self.duration_s,
            "log_ref": self.log_ref,
            "started_at": self.started_at,
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "ActionOutcome":
        return ActionOutcome(
            action=Phase(d["action"]),
            exit_status=int(d["exit_status"]),
            duration_s=float(d["duration_s"]),
            log_ref=str(d["log_ref"]),
            started_at=float(d["started_at"]),
        )


@dataclass
class ResultEntry:
    """Presence/size record for one declared result artifact."""

    path: str
    type: str
    present: bool
    size_bytes: int = 0
    host_path: str | None = None
    error: str | None = None

    def to_dict(self, public: bool = False) -> dict[str, Any]:
        d: dict[str, Any] = {
            "path": self.path,
            "type": self.type,
            "present": self.present,
            "size_bytes": self.size_bytes,
        }
        if not public:
            d["host_path"] = self.host_path
        if self.error:
            d["error"] = self.error
        return d

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "ResultEntry":
        return ResultEntry(
            path=d["path"],
            type=d.get("type", ""),
            present=bool(d["present"]),
            size_bytes=int(d.get("size_bytes", 0)),
            host_path=d.get("host_path"),
            error=d.get("error"),
        )


ResultIndex = dict[str, ResultEntry]


@dataclass
class Experiment:
    """One lifecycle instance of a system on a backend.

    The backend binding is fixed at creation. `results` is present exactly in
    the Finished state; reconfiguring clears it.
    """

    id: str
    system: SystemId
    backend: str
    state: ExperimentState = ExperimentState.CREATED
    state_reason: str | None = None
    config: SysCfg | None = None
    staged_inputs: dict[str, str] = field(default_factory=dict)
    created_at: float = 0.0
    updated_at: float = 0.0
    action_log: list[ActionOutcome] = field(default_factory=list)
    results: ResultIndex | None = None
    session: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "system": {"name": self.system.name, "version": self.system.version},
            "backend": self.backend,
            "state": self.state.value,
            "state_reason": self.state_reason,
            "config": {
                "build_overrides": dict(self.config.build_overrides),
                "run_overrides": dict(self.config.run_overrides),
            }
            if self.config
            else None,
            "staged_inputs": dict(self.staged_inputs),
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "action_log": [o.to_dict() for o in self.action_log],
            "results": {k: e.to_dict() for k, e in self.results.items()} if self.results is not None else None,
            "session": self.session,
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "Experiment":
        system = SystemId(d["system"]["name"], d["system"]["version"])
        config = None
        if d.get("config") is not None:
            config = SysCfg(
                system=system,
                build_overrides=dict(d["config"].get("build_overrides", {})),
                run_overrides=dict(d["config"].get("run_overrides", {})),
            )
        results = None
        if d.get("results") is not None:
            results = {k: ResultEntry.from_dict(e) for k, e in d["results"].items()}
        return Experiment(
            id=d["id"],
            system=system,
            backend=d["backend"],
            state=ExperimentState(d["state"]),
            state_reason=d.get("state_reason"),
            config=config,
            staged_inputs=dict(d.get("staged_inputs", {})),
            created_at=float(d.get("created_at", 0.0)),
            updated_at=float(d.get("updated_at", 0.0)),
            action_log=[ActionOutcome.from_dict(o) for o in d.get("action_log", [])],
            results=results,
            session=d.get("session"),
        )


def experiment_id_for(seq: int) -> str:
    """Creation-ordered, lexically sortable opaque id."""
    return f"exp-{seq:08d}"


def sorted_by_creation(experiments: Iterable[Experiment]) -> list[Experiment]:
    return sorted(experiments, key=lambda e: e.id)
