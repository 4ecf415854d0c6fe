"""Durable experiment records with serialized mutation and change signals.

Every mutation is written to disk before it becomes observable: readers and
writers share one lock, and the record file is replaced (write + rename)
inside the critical section. On restart, experiments that were mid-action are
demoted to the matching failed state with reason "interrupted" instead of
resurrecting orphaned work.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Any, Callable, Iterable

from simlab.errors import UnknownExperiment
from simlab.model import (
    Experiment,
    ExperimentState,
    LifecycleEvent,
    SystemId,
    experiment_id_for,
    transition,
)

log = logging.getLogger(__name__)

INTERRUPTED_REASON = "interrupted"

_DEMOTIONS = {
    ExperimentState.BUILDING: ExperimentState.BUILD_FAILED,
    ExperimentState.RUNNING: ExperimentState.RUN_FAILED,
}


class ExperimentStore:
    def __init__(self, data_dir: Path):
        self._dir = Path(data_dir) / "experiments"
        self._dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._experiments: dict[str, Experiment] = {}
        self._seq = 0
        self._listeners: list[Callable[[str], None]] = []
        self._load()

    # -- persistence ----------------------------------------------------------

    def _path(self, experiment_id: str) -> Path:
        return self._dir / f"{experiment_id}.json"

    def _persist_dict(self, experiment_id: str, snapshot: dict[str, Any]) -> None:
        tmp = self._path(experiment_id).with_suffix(".tmp")
        tmp.write_text(json.dumps(snapshot) + "\n")
        os.replace(tmp, self._path(experiment_id))

    def _persist(self, exp: Experiment) -> None:
        self._persist_dict(exp.id, exp.to_dict())

    def _load(self) -> None:
        for path in sorted(self._dir.glob("exp-*.json")):
            try:
                exp = Experiment.from_dict(json.loads(path.read_text()))
            except (ValueError, KeyError) as exc:
                log.warning("skipping unreadable experiment record %s: %s", path.name, exc)
                continue
            demoted = _DEMOTIONS.get(exp.state)
            if demoted is not None:
                exp.state = demoted
                exp.state_reason = INTERRUPTED_REASON
                exp.updated_at = time.time()
                self._persist(exp)
            self._experiments[exp.id] = exp
            seq = int(exp.id.split("-")[1])
            self._seq = max(self._seq, seq)

    # -- change notification ---------------------------------------------------

    def add_listener(self, callback: Callable[[str], None]) -> None:
        """callback(experiment_id) fires after each persisted mutation."""
        self._listeners.append(callback)

    def _notify(self, experiment_id: str) -> None:
        for callback in self._listeners:
            try:
                callback(experiment_id)
            except Exception:  # pragma: no cover - listener bugs must not corrupt state
                log.exception("experiment change listener failed")

    # -- access -----------------------------------------------------------------

    def create(self, system: SystemId, backend: str) -> dict[str, Any]:
        with self._lock:
            self._seq += 1
            now = time.time()
            exp = Experiment(
                id=experiment_id_for(self._seq),
                system=system,
                backend=backend,
                created_at=now,
                updated_at=now,
            )
            snapshot = exp.to_dict()
            self._persist_dict(exp.id, snapshot)
            self._experiments[exp.id] = exp
        self._notify(snapshot["id"])
        return snapshot

    def _get(self, experiment_id: str) -> Experiment:
        exp = self._experiments.get(experiment_id)
        if exp is None:
            raise UnknownExperiment(f"no experiment {experiment_id}")
        return exp

    def view(self, experiment_id: str) -> dict[str, Any]:
        with self._lock:
            return self._get(experiment_id).to_dict()

    def record(self, experiment_id: str) -> Experiment:
        """The live record; callers must treat it as read-only."""
        with self._lock:
            return self._get(experiment_id)

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._experiments)

    def list(
        self,
        state: str | None = None,
        system_name: str | None = None,
        system_version: str | None = None,
        backend: str | None = None,
        limit: int | None = None,
        offset: int = 0,
    ) -> tuple[list[dict[str, Any]], int]:
        """Creation-ordered snapshots plus the total matching count."""
        with self._lock:
            rows: Iterable[Experiment] = (self._experiments[i] for i in sorted(self._experiments))
            selected = [
                e
                for e in rows
                if (state is None or e.state.value == state)
                and (system_name is None or e.system.name == system_name)
                and (system_version is None or e.system.version == system_version)
                and (backend is None or e.backend == backend)
            ]
            total = len(selected)
            end = offset + limit if limit is not None else None
            return [e.to_dict() for e in selected[offset:end]], total

    # -- mutation ----------------------------------------------------------------

    def apply_event(
        self,
        experiment_id: str,
        event: LifecycleEvent,
        mutate: Callable[[Experiment], None] | None = None,
        reason: str | None = None,
    ) -> dict[str, Any]:
        """Advance the lifecycle; transition legality is checked under the lock.

        Reconfiguring clears results so the stored configuration and results
        can never disagree; starting a new run clears them too, so a failed
        repetition cannot leave stale results behind.
        """
        with self._lock:
            exp = self._get(experiment_id)
            exp.state = transition(exp.state, event)
            if event in (LifecycleEvent.CONFIGURE, LifecycleEvent.START_RUN):
                exp.results = None
            if mutate is not None:
                mutate(exp)
            exp.state_reason = reason
            exp.updated_at = time.time()
            snapshot = exp.to_dict()
            self._persist_dict(exp.id, snapshot)
        self._notify(experiment_id)
        return snapshot

    def update(self, experiment_id: str, mutate: Callable[[Experiment], None]) -> dict[str, Any]:
        """Non-transition mutation (staging bookkeeping, session handles)."""
        with self._lock:
            exp = self._get(experiment_id)
            mutate(exp)
            exp.updated_at = time.time()
            snapshot = exp.to_dict()
            self._persist_dict(exp.id, snapshot)
        self._notify(experiment_id)
        return snapshot
