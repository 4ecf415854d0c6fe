"""simlab: experiment service for containerized simulation systems.

A system is a git repository (sources + a ``sysdef.json`` contract) plus a
container image. simlab registers systems, runs their build/run lifecycle as
Experiments inside ephemeral containers over a shared volume, and dispatches
each experiment to one of several compute backends (local, simulated remote,
or a cascade onto another simlab instance's REST API).
"""

__version__ = "0.1.0"

from simlab.model import (
    ActionOutcome,
    BackendDescriptor,
    BackendKind,
    Experiment,
    ExperimentState,
    LifecycleEvent,
    ParameterDef,
    Phase,
    ResultDecl,
    SysCfg,
    SysDef,
    SystemId,
    transition,
)

__all__ = [
    "ActionOutcome",
    "BackendDescriptor",
    "BackendKind",
    "Experiment",
    "ExperimentState",
    "LifecycleEvent",
    "ParameterDef",
    "Phase",
    "ResultDecl",
    "SysCfg",
    "SysDef",
    "SystemId",
    "transition",
    "__version__",
]
