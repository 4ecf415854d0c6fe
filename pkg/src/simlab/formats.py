"""Codec for the two JSON document formats: SysDef and SysCfg.

Parameter entries in a SysDef accept two shapes: the scalar shorthand
``"key": <scalar>`` and the object form ``"key": {"default_value": ...,
"is_file": ...}``. The object form is required whenever ``is_file`` needs to
be set. Scalar kinds are preserved as-typed; systems may parse the SysCfg
themselves inside the container, so nothing is coerced to strings.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

from simlab.errors import SchemaError, SystemMismatch, TypeMismatch, UnknownParameter
from simlab.model import (
    ParameterDef,
    Phase,
    ResultDecl,
    Scalar,
    SysCfg,
    SysDef,
    SystemId,
    is_scalar,
    scalar_kind,
)

log = logging.getLogger(__name__)

SYSDEF_FIELDS = {
    "name",
    "version",
    "docker_image",
    "build_command",
    "run_command",
    "build_parameters",
    "run_parameters",
    "results",
    "required_backend_kind",
}
SYSCFG_FIELDS = {"system", "build_parameters", "run_parameters"}


@dataclass
class EffectiveConfig:
    """Fully resolved parameter values for one phase.

    Contains exactly the keys declared in the SysDef for the phase, in
    declaration order; overridden keys carry the override, the rest their
    default.
    """

    phase: Phase
    values: dict[str, Scalar] = field(default_factory=dict)


def _loads(text: str, doc: str) -> dict[str, Any]:
    def reject_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for k, v in pairs:
            if k in out:
                raise SchemaError(k, "duplicate key")
            out[k] = v
        return out

    try:
        data = json.loads(text, object_pairs_hook=reject_duplicates)
    except SchemaError:
        raise
    except json.JSONDecodeError as exc:
        raise SchemaError(doc, f"not well-formed JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError(doc, "top-level value must be an object")
    return data


def _require_str(data: Mapping[str, Any], key: str, doc: str) -> str:
    if key not in data:
        raise SchemaError(f"{doc}.{key}" if doc else key, "missing required field")
    value = data[key]
    if not isinstance(value, str) or not value:
        raise SchemaError(f"{doc}.{key}" if doc else key, "must be a non-empty string")
    return value


def _decode_parameters(raw: Any, phase: Phase, section: str) -> tuple[ParameterDef, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, dict):
        raise SchemaError(section, "must be an object")
    params: list[ParameterDef] = []
    for key, value in raw.items():
        if isinstance(value, dict):
            if "default_value" not in value:
                raise SchemaError(f"{section}.{key}", "missing default_value")
            default = value["default_value"]
            is_file = value.get("is_file", False)
            if not isinstance(is_file, bool):
                raise SchemaError(f"{section}.{key}", "is_file must be a boolean")
            unknown = set(value) - {"default_value", "is_file"}
            if unknown:
                log.warning("ignoring unknown parameter fields %s in %s.%s", sorted(unknown), section, key)
        elif is_scalar(value):
            default, is_file = value, False
        else:
            raise SchemaError(f"{section}.{key}", "must be a scalar or a parameter object")
        if not is_scalar(default):
            raise SchemaError(f"{section}.{key}", "default_value must be a scalar")
        if is_file and not isinstance(default, str):
            raise SchemaError(f"{section}.{key}", "file parameter default must be a string path")
        params.append(ParameterDef(key=key, default_value=default, is_file=is_file, phase=phase))
    return tuple(params)


def _decode_results(raw: Any) -> tuple[ResultDecl, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, dict):
        raise SchemaError("results", "must be an object")
    decls: list[ResultDecl] = []
    for key, value in raw.items():
        if not isinstance(value, dict):
            raise SchemaError(f"results.{key}", "must be an object with a path")
        path = value.get("path")
        if not isinstance(path, str) or not path:
            raise SchemaError(f"results.{key}", "missing path")
        rtype = value.get("type", "")
        if not isinstance(rtype, str):
            raise SchemaError(f"results.{key}", "type must be a string")
        decls.append(ResultDecl(key=key, path=path, type=rtype))
    return tuple(decls)


def parse_sysdef(text: str) -> SysDef:
    """Decode a SysDef document.

    Required top-level fields: name, version, docker_image, build_command,
    run_command. Absent parameter/result sections decode as empty. Unknown
    top-level fields are ignored with a warning (forward compatibility).
    """
    data = _loads(text, "sysdef")
    unknown = set(data) - SYSDEF_FIELDS
    if unknown:
        log.warning("ignoring unknown SysDef fields: %s", sorted(unknown))

    name = _require_str(data, "name", "")
    version = _require_str(data, "version", "")
    image = _require_str(data, "docker_image", "")
    build_command = _require_str(data, "build_command", "")
    run_command = _require_str(data, "run_command", "")

    required_kind = data.get("required_backend_kind")
    if required_kind is not None and not isinstance(required_kind, str):
        raise SchemaError("required_backend_kind", "must be a string")

    return SysDef(
        id=SystemId(name, version),
        image=image,
        build_command=build_command,
        run_command=run_command,
        build_parameters=_decode_parameters(data.get("build_parameters"), Phase.BUILD, "build_parameters"),
        run_parameters=_decode_parameters(data.get("run_parameters"), Phase.RUN, "run_parameters"),
        results=_decode_results(data.get("results")),
        required_backend_kind=required_kind,
    )


def _decode_overrides(raw: Any, section: str) -> dict[str, Scalar]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise SchemaError(section, "must be an object")
    overrides: dict[str, Scalar] = {}
    for key, value in raw.items():
        if not is_scalar(value):
            raise SchemaError(f"{section}.{key}", "override value must be a scalar")
        overrides[key] = value
    return overrides


def parse_syscfg(text: str) -> SysCfg:
    """Decode a SysCfg document (system identity + optional override maps)."""
    data = _loads(text, "syscfg")
    unknown = set(data) - SYSCFG_FIELDS
    if unknown:
        log.warning("ignoring unknown SysCfg fields: %s", sorted(unknown))

    system = data.get("system")
    if system is None:
        raise SchemaError("system", "missing required field")
    if not isinstance(system, dict):
        raise SchemaError("system", "must be an object")
    system_id = SystemId(_require_str(system, "name", "system"), _require_str(system, "version", "system"))

    return SysCfg(
        system=system_id,
        build_overrides=_decode_overrides(data.get("build_parameters"), "build_parameters"),
        run_overrides=_decode_overrides(data.get("run_parameters"), "run_parameters"),
    )


def merge(sysdef: SysDef, syscfg: SysCfg, phase: Phase) -> EffectiveConfig:
    """Resolve one phase's effective values: override if present, else default.

    Rejects overrides for undeclared keys, overrides whose scalar kind differs
    from the default's kind, and configs addressed to a different system.
    """
    if syscfg.system != sysdef.id:
        raise SystemMismatch(
            f"config is for {syscfg.system}, system is {sysdef.id}"
        )
    declared = sysdef.parameter_map(phase)
    overrides = syscfg.overrides(phase)
    for key, value in overrides.items():
        param = declared.get(key)
        if param is None:
            raise UnknownParameter(key, phase.value)
        if param.is_file:
            if not isinstance(value, str):
                raise TypeMismatch(key, "string (file path)", scalar_kind(value))
        elif scalar_kind(value) != scalar_kind(param.default_value):
            raise TypeMismatch(key, scalar_kind(param.default_value), scalar_kind(value))
    values: dict[str, Scalar] = {}
    for param in sysdef.parameters(phase):
        values[param.key] = overrides.get(param.key, param.default_value)
    return EffectiveConfig(phase=phase, values=values)


def syscfg_to_dict(syscfg: SysCfg) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "system": {"name": syscfg.system.name, "version": syscfg.system.version}
    }
    if syscfg.build_overrides:
        doc["build_parameters"] = dict(syscfg.build_overrides)
    if syscfg.run_overrides:
        doc["run_parameters"] = dict(syscfg.run_overrides)
    return doc


def render_syscfg(syscfg: SysCfg) -> str:
    """Deterministic serialization; parse_syscfg(render_syscfg(c)) == c.

    Stable block order (system, build_parameters, run_parameters); empty
    override maps are omitted.
    """
    return json.dumps(syscfg_to_dict(syscfg), indent=2) + "\n"


def sysdef_to_dict(sysdef: SysDef) -> dict[str, Any]:
    """Canonical document form: shorthand for plain parameters, object form
    where is_file must be carried."""

    def params_block(params: tuple[ParameterDef, ...]) -> dict[str, Any]:
        block: dict[str, Any] = {}
        for p in params:
            if p.is_file:
                block[p.key] = {"default_value": p.default_value, "is_file": True}
            else:
                block[p.key] = p.default_value
        return block

    doc: dict[str, Any] = {
        "name": sysdef.id.name,
        "version": sysdef.id.version,
        "docker_image": sysdef.image,
        "build_command": sysdef.build_command,
        "run_command": sysdef.run_command,
    }
    if sysdef.build_parameters:
        doc["build_parameters"] = params_block(sysdef.build_parameters)
    if sysdef.run_parameters:
        doc["run_parameters"] = params_block(sysdef.run_parameters)
    if sysdef.results:
        doc["results"] = {r.key: {"path": r.path, "type": r.type} for r in sysdef.results}
    if sysdef.required_backend_kind:
        doc["required_backend_kind"] = sysdef.required_backend_kind
    return doc


def render_sysdef(sysdef: SysDef) -> str:
    return json.dumps(sysdef_to_dict(sysdef), indent=2) + "\n"
