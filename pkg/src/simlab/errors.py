"""Exception taxonomy shared by the library, the REST service and its clients.

Every error carries a stable machine-readable ``code`` (what goes on the wire
as ``{"error": code, "detail": ...}``) and the HTTP status the service maps it
to. Library callers get ordinary exceptions; the service layer does the
translation in one place.
"""

from __future__ import annotations


class SimlabError(Exception):
    code = "internal"
    http_status = 500

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.code)
        self.detail = detail or self.code


class SchemaError(SimlabError):
    """A SysDef/SysCfg document violates the format contract."""

    code = "schema_error"
    http_status = 400

    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class UnknownParameter(SimlabError):
    code = "unknown_parameter"
    http_status = 400

    def __init__(self, key: str, phase: str = ""):
        where = f" in {phase} parameters" if phase else ""
        super().__init__(f"override key {key!r} is not declared{where}")
        self.key = key


class TypeMismatch(SimlabError):
    code = "type_mismatch"
    http_status = 400

    def __init__(self, key: str, expected: str, got: str):
        super().__init__(f"override for {key!r} must be {expected}, got {got}")
        self.key = key


class SystemMismatch(SimlabError):
    code = "system_mismatch"
    http_status = 400


class IllegalTransition(SimlabError):
    """Lifecycle step attempted out of order (e.g. run before build)."""

    code = "illegal_transition"
    http_status = 409

    def __init__(self, state: str, event: str):
        super().__init__(f"event {event} is not legal in state {state}")
        self.state = state
        self.event = event


class UnknownSystem(SimlabError):
    code = "unknown_system"
    http_status = 404


class SystemConflict(SimlabError):
    """Second registration of an already-taken (name, version) identity."""

    code = "system_conflict"
    http_status = 409


class FetchError(SimlabError):
    code = "fetch_error"
    http_status = 502

    def __init__(self, repo_url: str, detail: str):
        super().__init__(f"{repo_url}: {detail}")
        self.repo_url = repo_url


class UnknownExperiment(SimlabError):
    code = "unknown_experiment"
    http_status = 404


class NotAFileParameter(SimlabError):
    code = "not_a_file_parameter"
    http_status = 400

    def __init__(self, key: str):
        super().__init__(f"parameter {key!r} is not declared as a file parameter")
        self.key = key


class StagingIOError(SimlabError):
    code = "staging_io_error"
    http_status = 500


class ImageUnavailable(SimlabError):
    code = "image_unavailable"
    http_status = 502


class RuntimeUnavailable(SimlabError):
    code = "runtime_unavailable"
    http_status = 503


class NoEligibleBackend(SimlabError):
    code = "no_eligible_backend"
    http_status = 409


class ProvisionError(SimlabError):
    code = "provision_error"
    http_status = 502


class TransportError(SimlabError):
    code = "transport_error"
    http_status = 502


class DelegateUnreachable(SimlabError):
    code = "delegate_unreachable"
    http_status = 502


class DelegateRejected(SimlabError):
    """The delegate runtime refused or failed a lifecycle step."""

    code = "delegate_rejected"
    http_status = 502

    def __init__(self, detail: str, remote_experiment_id: str | None = None):
        super().__init__(detail)
        self.remote_experiment_id = remote_experiment_id


class SystemNotOffered(SimlabError):
    code = "system_not_offered"
    http_status = 409


class ResultNotPresent(SimlabError):
    code = "result_not_present"
    http_status = 404


class ResultsNotReady(SimlabError):
    code = "results_not_ready"
    http_status = 409


class MergeValidationError(SimlabError):
    code = "merge_validation_error"
    http_status = 400

    def __init__(self, point: str, detail: str):
        super().__init__(f"point {point}: {detail}")
        self.point = point


class ConfigError(SimlabError):
    code = "config_error"
    http_status = 400


class Unauthorized(SimlabError):
    code = "unauthorized"
    http_status = 401


class ApiError(SimlabError):
    """Error response received from a remote simlab service."""

    code = "api_error"
    http_status = 502

    def __init__(self, code: str, detail: str, status: int):
        super().__init__(detail)
        self.remote_code = code
        self.status = status

    def __str__(self) -> str:  # pragma: no cover - repr convenience
        return f"[{self.status} {self.remote_code}] {self.detail}"
