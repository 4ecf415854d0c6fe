"""System storage: a registry of repository links and checkout machinery.

The registry persists only {repo_url, revision} records (one JSON file,
rewritten atomically); everything else about a system is re-derived from the
``sysdef.json`` at the repository root. Checkouts are fresh copies pinned to
an immutable resolved revision, so experiments stay hermetic with respect to
registry state.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path

from simlab.errors import FetchError, SystemConflict, UnknownSystem
from simlab.formats import parse_sysdef
from simlab.model import SysDef, SystemId

log = logging.getLogger(__name__)

SYSDEF_FILENAME = "sysdef.json"


def tree_digest(root: Path) -> str:
    """Digest of a file tree: relative paths + contents, order-independent."""
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel.startswith(".git/"):
            continue
        h.update(rel.encode())
        h.update(b"\0")
        h.update(path.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


class FetchAdapter:
    """Obtains a writable copy of a repository at a pinned revision."""

    def fetch(self, repo_url: str, revision: str | None, dest: Path) -> str:
        """Populate dest; return the resolved immutable revision."""
        raise NotImplementedError


class GitFetchAdapter(FetchAdapter):
    """Drives the git command line tool. Clones shallowly when possible."""

    def fetch(self, repo_url: str, revision: str | None, dest: Path) -> str:
        dest.mkdir(parents=True, exist_ok=True)
        cmd = ["git", "clone", "--quiet"]
        if revision is None:
            cmd += ["--depth", "1"]
        cmd += [repo_url, str(dest)]
        try:
            subprocess.run(cmd, check=True, capture_output=True, text=True, timeout=600)
            if revision is not None:
                subprocess.run(
                    ["git", "-C", str(dest), "checkout", "--quiet", revision],
                    check=True,
                    capture_output=True,
                    text=True,
                    timeout=120,
                )
            out = subprocess.run(
                ["git", "-C", str(dest), "rev-parse", "HEAD"],
                check=True,
                capture_output=True,
                text=True,
                timeout=60,
            )
        except subprocess.CalledProcessError as exc:
            raise FetchError(repo_url, exc.stderr.strip() or str(exc)) from exc
        except (subprocess.TimeoutExpired, OSError) as exc:
            raise FetchError(repo_url, str(exc)) from exc
        return out.stdout.strip()


class LocalDirFetchAdapter(FetchAdapter):
    """Copies a plain local directory; revision is a content digest.

    This is the fixture convention for tests: any local directory is an
    acceptable repo_url.
    """

    def fetch(self, repo_url: str, revision: str | None, dest: Path) -> str:
        src = Path(repo_url)
        if not src.is_dir():
            raise FetchError(repo_url, "not a directory")
        shutil.copytree(src, dest, dirs_exist_ok=True)
        return "dir-" + tree_digest(dest)[:40]


def adapter_for(repo_url: str) -> FetchAdapter:
    if repo_url.startswith(("http://", "https://", "git://", "ssh://", "git@")):
        return GitFetchAdapter()
    p = Path(repo_url)
    if p.is_dir() and (p / ".git").exists():
        return GitFetchAdapter()
    return LocalDirFetchAdapter()


@dataclass
class SystemRecord:
    repo_url: str
    revision: str | None = None
    sysdef: SysDef | None = None
    resolved_revision: str | None = None
    error: str | None = None

    @property
    def cached_id(self) -> SystemId | None:
        return self.sysdef.id if self.sysdef else None


@dataclass
class SystemWorkspaceSource:
    """A checkout ready to seed an experiment workspace."""

    checkout_path: Path
    sysdef: SysDef
    resolved_revision: str


class SystemStorage:
    """Registry of system repository links with on-demand checkout.

    Registry mutations are serialized behind one lock; checkouts into distinct
    destinations may run concurrently.
    """

    def __init__(self, registry_file: Path, cache_dir: Path | None = None):
        self._registry_file = Path(registry_file)
        self._cache_dir = Path(cache_dir) if cache_dir else self._registry_file.parent / "system-cache"
        self._records: list[SystemRecord] = []
        self._lock = threading.RLock()
        if self._registry_file.exists():
            self._load()

    def _load(self) -> None:
        raw = json.loads(self._registry_file.read_text())
        for entry in raw:
            record = SystemRecord(repo_url=entry["repo_url"], revision=entry.get("revision"))
            self._records.append(record)
            self._refresh(record)

    def _save(self) -> None:
        payload = [{"repo_url": r.repo_url, "revision": r.revision} for r in self._records]
        tmp = self._registry_file.with_suffix(".tmp")
        self._registry_file.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(json.dumps(payload, indent=2) + "\n")
        os.replace(tmp, self._registry_file)

    def _refresh(self, record: SystemRecord) -> None:
        """Fetch the repository once and cache its parsed SysDef summary."""
        scratch = self._cache_dir / hashlib.sha256(record.repo_url.encode()).hexdigest()[:16]
        if scratch.exists():
            shutil.rmtree(scratch)
        try:
            resolved = adapter_for(record.repo_url).fetch(record.repo_url, record.revision, scratch)
            sysdef_path = scratch / SYSDEF_FILENAME
            if not sysdef_path.is_file():
                raise FetchError(record.repo_url, f"missing {SYSDEF_FILENAME}")
            record.sysdef = parse_sysdef(sysdef_path.read_text())
            record.resolved_revision = resolved
            record.error = None
        except Exception as exc:
            record.sysdef = None
            record.resolved_revision = None
            record.error = str(exc)
            log.warning("system fetch failed for %s: %s", record.repo_url, exc)

    def register_system(self, repo_url: str, revision: str | None = None) -> SystemRecord:
        """Add (or update) a repository link and cache its SysDef summary.

        Re-registering the same repo_url updates the revision selector instead
        of duplicating. A second repository claiming an already-registered
        (name, version) identity is rejected.
        """
        with self._lock:
            record = next((r for r in self._records if r.repo_url == repo_url), None)
            if record is None:
                record = SystemRecord(repo_url=repo_url, revision=revision)
                self._records.append(record)
            else:
                record.revision = revision
            self._refresh(record)
            if record.sysdef is not None:
                for other in self._records:
                    if other is not record and other.cached_id == record.cached_id:
                        self._records.remove(record)
                        self._save()
                        raise SystemConflict(
                            f"{record.cached_id} already registered from {other.repo_url}"
                        )
            self._save()
            if record.error is not None:
                raise FetchError(repo_url, record.error)
            return record

    def list_systems(self) -> list[SystemRecord]:
        """All registered records; fetch failures appear with an error marker."""
        with self._lock:
            return list(self._records)

    def _find(self, system: SystemId) -> SystemRecord:
        with self._lock:
            for record in self._records:
                if record.cached_id == system:
                    return record
        raise UnknownSystem(f"no registered system {system}")

    def get_sysdef(self, system: SystemId) -> SysDef:
        record = self._find(system)
        assert record.sysdef is not None
        return record.sysdef

    def checkout(self, system: SystemId, destination: Path) -> SystemWorkspaceSource:
        """Produce a fresh writable copy of the system repository.

        Image pulling is left to the executing backend; only the host that
        runs the action needs the image.
        """
        record = self._find(system)
        destination = Path(destination)
        destination.mkdir(parents=True, exist_ok=True)
        resolved = adapter_for(record.repo_url).fetch(record.repo_url, record.revision, destination)
        sysdef_path = destination / SYSDEF_FILENAME
        if not sysdef_path.is_file():
            raise FetchError(record.repo_url, f"missing {SYSDEF_FILENAME}")
        sysdef = parse_sysdef(sysdef_path.read_text())
        return SystemWorkspaceSource(checkout_path=destination, sysdef=sysdef, resolved_revision=resolved)
