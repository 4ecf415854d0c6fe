"""Action execution on a container runtime over a shared experiment volume.

The contract: a host directory is mounted into the system's container at
``/sysapi`` with three system-visible subdirectories (``repository/`` holds
the checkout, ``inputs/`` the SysCfg file plus staged file parameters,
``outputs/`` whatever the system hands back). One ephemeral container per
action runs the SysDef's build/run command with the working directory set to
``/sysapi/repository`` and the absolute SysCfg path appended as the final
argument; the container is removed after exit. A ``meta/`` sibling holds
framework artifacts (captured logs) so user-declared results never collide
with them.

Two runtimes implement the launch: `DockerRuntime` drives the docker CLI;
`ProcessRuntime` fulfils the same workspace contract with plain host
subprocesses (the command receives the host path of the SysCfg file instead
of the in-container one), which is what tests and container-less hosts use.
"""

from __future__ import annotations

import os
import shlex
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from simlab.errors import (
    ImageUnavailable,
    NotAFileParameter,
    RuntimeUnavailable,
    StagingIOError,
)
from simlab.formats import render_syscfg
from simlab.model import ActionOutcome, Phase, ResultEntry, ResultIndex, SysCfg, SysDef
from simlab.storage import SystemWorkspaceSource

CONTAINER_ROOT = "/sysapi"
SYSCFG_FILENAME = "syscfg.json"
SYSCFG_CONTAINER_PATH = f"{CONTAINER_ROOT}/inputs/{SYSCFG_FILENAME}"

TIMEOUT_EXIT_STATUS = 124
DEFAULT_ACTION_TIMEOUT_S = 3600.0


@dataclass
class ExperimentWorkspace:
    """Host directory mounted into action containers at /sysapi."""

    root: Path

    @property
    def repository(self) -> Path:
        return self.root / "repository"

    @property
    def inputs(self) -> Path:
        return self.root / "inputs"

    @property
    def outputs(self) -> Path:
        return self.root / "outputs"

    @property
    def meta(self) -> Path:
        return self.root / "meta"

    @property
    def syscfg_path(self) -> Path:
        return self.inputs / SYSCFG_FILENAME

    def create_dirs(self) -> None:
        for d in (self.repository, self.inputs, self.outputs, self.meta):
            d.mkdir(parents=True, exist_ok=True)


def prepare_workspace(
    source: SystemWorkspaceSource,
    syscfg: SysCfg,
    file_inputs: dict[str, Path] | None = None,
    root: Path | None = None,
) -> ExperimentWorkspace:
    """Stage the experiment volume.

    Copies the checkout into ``repository/`` (skipped when the checkout
    already lives there), copies each staged file into ``inputs/`` under its
    original name, rewrites the corresponding override to the in-container
    path ``/sysapi/inputs/<filename>``, and renders the rewritten SysCfg to
    ``inputs/syscfg.json``. Unstaged file parameters keep their SysDef
    default, a repository-relative path the system resolves itself.
    """
    file_inputs = file_inputs or {}
    if root is None:
        root = source.checkout_path.parent / "workspace"
    ws = ExperimentWorkspace(root=Path(root))
    ws.create_dirs()

    declared_files = {
        p.key for p in source.sysdef.build_parameters + source.sysdef.run_parameters if p.is_file
    }
    for key in file_inputs:
        if key not in declared_files:
            raise NotAFileParameter(key)

    if source.checkout_path.resolve() != ws.repository.resolve():
        try:
            shutil.copytree(source.checkout_path, ws.repository, dirs_exist_ok=True)
        except OSError as exc:
            raise StagingIOError(f"copying checkout: {exc}") from exc

    staged = syscfg
    file_params = {
        p.key: p for p in source.sysdef.build_parameters + source.sysdef.run_parameters if p.is_file
    }
    for key, host_file in file_inputs.items():
        host_file = Path(host_file)
        try:
            target = ws.inputs / host_file.name
            shutil.copyfile(host_file, target)
        except OSError as exc:
            raise StagingIOError(f"staging {key} from {host_file}: {exc}") from exc
        container_path = f"{CONTAINER_ROOT}/inputs/{host_file.name}"
        if file_params[key].phase is Phase.BUILD:
            overrides = dict(staged.build_overrides)
            overrides[key] = container_path
            staged = SysCfg(staged.system, overrides, dict(staged.run_overrides))
        else:
            staged = staged.with_run_override(key, container_path)

    ws.syscfg_path.write_text(render_syscfg(staged))
    return ws


@dataclass(frozen=True)
class ContainerInvocation:
    """One ephemeral container launch for a build or run action."""

    image: str
    command: str
    volume_root: Path
    label: str = ""

    def render(self) -> str:
        """Loggable command line for this launch, in `docker run` form."""
        return (
            f"docker run --rm -v {self.volume_root}:{CONTAINER_ROOT} "
            f"-w {CONTAINER_ROOT}/repository {self.image} "
            f"{self.command} {SYSCFG_CONTAINER_PATH}"
        )

    def docker_argv(self) -> list[str]:
        """argv for the docker CLI. The action command runs through a shell
        inside the container: commands like ``source run.sh`` use shell
        builtins and would fail under a direct exec."""
        argv = [
            "docker",
            "run",
            "--rm",
            "-v",
            f"{self.volume_root}:{CONTAINER_ROOT}",
            "-w",
            f"{CONTAINER_ROOT}/repository",
        ]
        if self.label:
            argv += ["--label", f"simlab.experiment={self.label}"]
        argv += [self.image, "sh", "-c", f"{self.command} {SYSCFG_CONTAINER_PATH}"]
        return argv


@dataclass
class LaunchPlan:
    """A fully staged action launch: argv plus an open log sink.

    Staging is separated from launching so capacity gating can bracket the
    container execution alone; queued actions then start the instant a slot
    frees instead of paying their setup inside the serialized window.
    """

    argv: list[str]
    log_file: Any
    label: str = ""

    def close(self) -> None:
        try:
            self.log_file.close()
        except OSError:  # pragma: no cover - close failures are harmless
            pass


class ContainerRuntime:
    """Launches one action invocation and reports its exit status."""

    def stage(self, invocation: ContainerInvocation, ws: ExperimentWorkspace, log_path: Path) -> LaunchPlan:
        raise NotImplementedError

    def launch(self, plan: LaunchPlan, timeout_s: float) -> int:
        raise NotImplementedError

    def run(self, invocation: ContainerInvocation, ws: ExperimentWorkspace, log_path: Path, timeout_s: float) -> int:
        plan = self.stage(invocation, ws, log_path)
        try:
            return self.launch(plan, timeout_s)
        finally:
            plan.close()

    def pull_if_absent(self, image: str) -> None:
        """Ensure the image is usable; never re-pull silently mid-experiment."""


class DockerRuntime(ContainerRuntime):
    def __init__(self, binary: str = "docker"):
        self.binary = binary

    def available(self) -> bool:
        return shutil.which(self.binary) is not None

    def pull_if_absent(self, image: str) -> None:
        if not self.available():
            raise RuntimeUnavailable(f"{self.binary} not found on PATH")
        probe = subprocess.run(
            [self.binary, "image", "inspect", image], capture_output=True, text=True
        )
        if probe.returncode == 0:
            return
        pull = subprocess.run([self.binary, "pull", image], capture_output=True, text=True)
        if pull.returncode != 0:
            raise ImageUnavailable(f"{image}: {pull.stderr.strip()}")

    def stage(self, invocation: ContainerInvocation, ws: ExperimentWorkspace, log_path: Path) -> LaunchPlan:
        binary = shutil.which(self.binary)
        if binary is None:
            raise RuntimeUnavailable(f"{self.binary} not found on PATH")
        argv = invocation.docker_argv()
        argv[0] = binary
        return LaunchPlan(argv=argv, log_file=open(log_path, "ab"), label=invocation.label)

    def launch(self, plan: LaunchPlan, timeout_s: float) -> int:
        status = _spawn_and_wait(plan.argv, plan.log_file, timeout_s)
        if status == TIMEOUT_EXIT_STATUS and plan.label:
            # killing the CLI leaves the container behind; remove it by label
            leftovers = self._containers_with_label(plan.label)
            if leftovers:
                subprocess.run([self.binary, "rm", "-f", "-v", *leftovers], capture_output=True)
        return status

    def _containers_with_label(self, label: str) -> list[str]:
        out = subprocess.run(
            [self.binary, "ps", "-aq", "--filter", f"label=simlab.experiment={label}"],
            capture_output=True,
            text=True,
        )
        return out.stdout.split()


_SHELL_META = set("|&;<>()$`\"'*?[]#~=%\\{}!\n")


def _is_shell_plain(command_line: str) -> bool:
    """True when the command line carries no shell syntax, so `exec`-ing it
    is equivalent to leaving a shell wrapped around it."""
    return not any(c in _SHELL_META for c in command_line)


class _Watchdog(threading.Thread):
    """One shared deadline enforcer for all running actions.

    A timer thread per action would double the thread churn on the hot
    path; this keeps arm/disarm at dictionary cost. The first firing sends
    SIGTERM (a supervising launcher forwards it to its whole action), with a
    SIGKILL escalation shortly after.
    """

    _instance: "_Watchdog | None" = None
    _instance_lock = threading.Lock()

    def __init__(self) -> None:
        super().__init__(daemon=True, name="simlab-watchdog")
        self._cv = threading.Condition()
        self._heap: list[tuple[float, int]] = []
        self._entries: dict[int, dict] = {}
        self._seq = 0

    @classmethod
    def shared(cls) -> "_Watchdog":
        with cls._instance_lock:
            if cls._instance is None or not cls._instance.is_alive():
                cls._instance = _Watchdog()
                cls._instance.start()
            return cls._instance

    def arm(self, pid: int, timeout_s: float) -> int:
        import heapq

        deadline = time.monotonic() + timeout_s
        with self._cv:
            self._seq += 1
            token = self._seq
            self._entries[token] = {"pid": pid, "fired": False, "deadline": deadline}
            heapq.heappush(self._heap, (deadline, token))
            if len(self._heap) > 1024 and len(self._heap) > 4 * len(self._entries):
                # drop disarmed leftovers so far-future deadlines cannot pile up
                self._heap = [(e["deadline"], t) for t, e in self._entries.items()]
                heapq.heapify(self._heap)
            if self._heap[0][1] == token:
                # only a new earliest deadline changes the wake-up time
                self._cv.notify()
        return token

    def disarm(self, token: int) -> bool:
        """Remove the entry; returns True when the deadline already fired."""
        with self._cv:
            entry = self._entries.pop(token, None)
        return entry is not None and entry["fired"]

    def run(self) -> None:  # pragma: no cover - timing-driven loop
        import heapq
        import signal as _signal

        while True:
            with self._cv:
                while not self._heap:
                    self._cv.wait()
                deadline, token = self._heap[0]
                now = time.monotonic()
                if deadline > now:
                    self._cv.wait(timeout=deadline - now)
                    continue
                heapq.heappop(self._heap)
                entry = self._entries.get(token)
                if entry is not None:
                    entry["fired"] = True
                    if entry.get("terminated"):
                        signum = _signal.SIGKILL
                    else:
                        entry["terminated"] = True
                        entry["deadline"] = now + 5.0
                        heapq.heappush(self._heap, (now + 5.0, token))
                        signum = _signal.SIGTERM
                    # signalled under the lock: disarm has not run, so the pid
                    # is not yet reaped and cannot have been recycled
                    try:
                        os.kill(entry["pid"], signum)
                    except OSError:
                        pass


_devnull_fd: int | None = None


def _stdin_devnull_fd() -> int:
    global _devnull_fd
    if _devnull_fd is None:
        fd = os.open(os.devnull, os.O_RDONLY)
        os.set_inheritable(fd, False)
        _devnull_fd = fd
    return _devnull_fd


def _spawn_and_wait(
    argv: list[str],
    log_file,
    timeout_s: float,
) -> int:
    """Launch argv (argv[0] must be an absolute path) and wait for it exactly.

    `subprocess.run(timeout=...)` detects child exit by polling with a
    backoff that reaches 50 ms, distorting measured action durations, and
    `Popen` setup itself costs around a millisecond inside what may be a
    capacity-serialized window. A raw posix_spawn plus blocking waitpid keeps
    both the measurement and the dispatch tight; the shared watchdog still
    enforces the timeout.
    """
    log_file.flush()
    pid = os.posix_spawn(
        argv[0],
        argv,
        os.environ,
        file_actions=[
            (os.POSIX_SPAWN_DUP2, _stdin_devnull_fd(), 0),
            (os.POSIX_SPAWN_DUP2, log_file.fileno(), 1),
            (os.POSIX_SPAWN_DUP2, log_file.fileno(), 2),
        ],
    )
    watchdog = _Watchdog.shared()
    token = watchdog.arm(pid, timeout_s)
    _, raw_status = os.waitpid(pid, 0)
    if watchdog.disarm(token):
        log_file.write(b"\n[simlab] action timed out\n")
        return TIMEOUT_EXIT_STATUS
    code = os.waitstatus_to_exitcode(raw_status)
    return code if code >= 0 else 128 - code


_launcher_lock = threading.Lock()
_launcher_path: Path | None = None
_launcher_failed = False

# Small supervisor compiled once per process: chdir, fork+exec the action,
# wait for it and record exact start/duration/status. Measuring next to the
# child keeps reported durations honest no matter how loaded the service
# process is (GIL queueing at spawn/wake bursts otherwise pollutes them).
# SIGTERM makes it kill the whole action; the exit status mirrors the child.
_LAUNCHER_SOURCE = r"""
#include <errno.h>
#include <signal.h>
#include <stdio.h>
#include <stdlib.h>
#include <sys/wait.h>
#include <time.h>
#include <unistd.h>

static pid_t child_pid = 0;
static void forward_kill(int sig) { (void)sig; if (child_pid > 0) kill(child_pid, SIGKILL); }

int main(int argc, char **argv) {
    if (argc < 4) return 125;
    const char *dir = argv[1];
    const char *timing = argv[2];
    struct sigaction sa;
    sa.sa_handler = forward_kill;
    sigemptyset(&sa.sa_mask);
    sa.sa_flags = 0;            /* no SA_RESTART: waitpid must see EINTR */
    sigaction(SIGTERM, &sa, 0);
    sigaction(SIGINT, &sa, 0);

    struct timespec wall, m0, m1;
    clock_gettime(CLOCK_REALTIME, &wall);
    clock_gettime(CLOCK_MONOTONIC, &m0);
    /* systems that pace themselves against the action start can read it from
     * the environment instead of re-measuring after exec */
    char stamp[32];
    snprintf(stamp, sizeof stamp, "%lld",
             (long long)m0.tv_sec * 1000000000LL + (long long)m0.tv_nsec);
    setenv("SIMLAB_ACTION_START_NS", stamp, 1);
    child_pid = fork();
    if (child_pid < 0) return 125;
    if (child_pid == 0) {
        if (chdir(dir) != 0) { perror(dir); _exit(126); }
        signal(SIGTERM, SIG_DFL);
        signal(SIGINT, SIG_DFL);
        execvp(argv[3], &argv[3]);
        perror(argv[3]);
        _exit(127);
    }
    int status = 0;
    while (waitpid(child_pid, &status, 0) < 0) {
        if (errno != EINTR) { status = 125 << 8; break; }
    }
    clock_gettime(CLOCK_MONOTONIC, &m1);
    double duration = (double)(m1.tv_sec - m0.tv_sec) + (double)(m1.tv_nsec - m0.tv_nsec) / 1e9;
    double started = (double)wall.tv_sec + (double)wall.tv_nsec / 1e9;
    FILE *f = fopen(timing, "w");
    if (f) { fprintf(f, "%.9f %.9f\n", started, duration); fclose(f); }
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
    return 125;
}
"""


def _chdir_exec_launcher() -> Path | None:
    """Compile (once per process) and return the action supervisor binary.

    Plain commands launch through it instead of a shell; without a C
    compiler the shell fallback is used and durations are measured from
    Python instead.
    """
    global _launcher_path, _launcher_failed
    with _launcher_lock:
        if _launcher_path is not None or _launcher_failed:
            return _launcher_path
        cc = shutil.which("cc") or shutil.which("gcc")
        if cc is None:
            _launcher_failed = True
            return None
        import tempfile

        workdir = Path(tempfile.mkdtemp(prefix="simlab-launch-"))
        source = workdir / "launch.c"
        source.write_text(_LAUNCHER_SOURCE)
        binary = workdir / "launch"
        # static first: dynamic-loader startup would otherwise tax every
        # single action launch; fall back where static libc is unavailable
        for flags in (["-O2", "-static"], ["-O2"]):
            compiled = subprocess.run(
                [cc, *flags, "-o", str(binary), str(source)], capture_output=True
            )
            if compiled.returncode == 0 and binary.is_file():
                _launcher_path = binary
                return _launcher_path
        _launcher_failed = True
        return None


def timing_file_for(log_path: Path) -> Path:
    return log_path.with_name(log_path.name + ".timing")


def read_action_timing(timing_path: Path) -> tuple[float, float] | None:
    """(started_at_epoch, duration_s) recorded by the supervisor, if any."""
    try:
        fields = timing_path.read_text().split()
        return float(fields[0]), float(fields[1])
    except (OSError, ValueError, IndexError):
        return None


class ProcessRuntime(ContainerRuntime):
    """Runs actions as host subprocesses against the same workspace layout.

    The mount becomes an identity mapping: the command is executed with the
    repository directory as its working directory and receives the host path
    of the SysCfg file as its final argument. Systems that resolve staged
    ``/sysapi/...`` values against the workspace root derived from that
    argument behave identically under both runtimes.

    Launches avoid `fork` of the (large, multi-threaded) service process:
    the working-directory change rides inside the `sh -c` script so CPython
    can take its `posix_spawn` path, which keeps per-action spawn cost flat
    no matter how big the service grows. All Python-created fds are cloexec
    (PEP 446), so `close_fds=False` leaks nothing through the exec.

    `known_images` restricts which image references are accepted, emulating
    pull failures for tests; the default accepts anything.
    """

    def __init__(self, known_images: set[str] | None = None):
        self.known_images = known_images
        self._sh = shutil.which("sh") or "/bin/sh"
        self._active = 0
        self._high_water = 0
        self._gauge_lock = threading.Lock()

    @property
    def high_water(self) -> int:
        """Max observed concurrent actions (for capacity assertions)."""
        return self._high_water

    def pull_if_absent(self, image: str) -> None:
        if self.known_images is not None and image not in self.known_images:
            raise ImageUnavailable(f"{image} is not available to this runtime")

    def _argv(self, invocation: ContainerInvocation, ws: ExperimentWorkspace, timing_path: Path) -> list[str]:
        command_line = f"{invocation.command} {ws.syscfg_path}"
        if _is_shell_plain(command_line):
            launcher = _chdir_exec_launcher()
            if launcher is not None:
                return [str(launcher), str(ws.repository), str(timing_path), *command_line.split()]
            command_line = f"exec {command_line}"
        script = f"cd {shlex.quote(str(ws.repository))} && {command_line}"
        return [self._sh, "-c", script]

    def stage(self, invocation: ContainerInvocation, ws: ExperimentWorkspace, log_path: Path) -> LaunchPlan:
        self.pull_if_absent(invocation.image)
        timing_path = timing_file_for(log_path)
        timing_path.unlink(missing_ok=True)
        argv = self._argv(invocation, ws, timing_path)
        return LaunchPlan(argv=argv, log_file=open(log_path, "ab"), label=invocation.label)

    def launch(self, plan: LaunchPlan, timeout_s: float) -> int:
        with self._gauge_lock:
            self._active += 1
            self._high_water = max(self._high_water, self._active)
        try:
            try:
                return _spawn_and_wait(plan.argv, plan.log_file, timeout_s)
            except FileNotFoundError as exc:
                plan.log_file.write(f"[simlab] cannot launch: {exc}\n".encode())
                return 127
        finally:
            with self._gauge_lock:
                self._active -= 1


def execute_action(
    ws: ExperimentWorkspace,
    sysdef: SysDef,
    action: Phase,
    runtime: ContainerRuntime,
    timeout_s: float = DEFAULT_ACTION_TIMEOUT_S,
    label: str = "",
    log_name: str | None = None,
    gate=None,
) -> ActionOutcome:
    """Run one build/run action and capture its combined output.

    Timeouts are recorded as a nonzero-status outcome, not raised: the caller
    feeds the outcome into the lifecycle as a failed action either way.
    `gate`, when given, is a context-manager factory (a backend capacity
    slot) held exactly for the container execution.
    """
    if not ws.syscfg_path.is_file():
        raise StagingIOError("workspace is not prepared (missing inputs/syscfg.json)")
    invocation = ContainerInvocation(
        image=sysdef.image,
        command=sysdef.command(action),
        volume_root=ws.root,
        label=label,
    )
    log_ref = log_name or f"{action.value}.log"
    log_path = ws.meta / log_ref
    plan = runtime.stage(invocation, ws, log_path)
    try:
        if gate is None:
            started_at = time.time()
            t0 = time.perf_counter()
            exit_status = runtime.launch(plan, timeout_s)
        else:
            with gate():
                started_at = time.time()
                t0 = time.perf_counter()
                exit_status = runtime.launch(plan, timeout_s)
        duration = time.perf_counter() - t0
    finally:
        plan.close()
    # prefer the supervisor's in-situ measurement: it is immune to load in
    # this process and reflects the action's true lifetime
    timing = read_action_timing(timing_file_for(log_path))
    if timing is not None:
        started_at, duration = timing
    return ActionOutcome(
        action=action,
        exit_status=exit_status,
        duration_s=duration,
        log_ref=log_ref,
        started_at=started_at,
    )


def collect_results(ws: ExperimentWorkspace, sysdef: SysDef) -> ResultIndex:
    """Harvest declared result artifacts after a run.

    Paths resolve relative to the repository directory (the action's working
    directory). Missing files are recorded with present=False rather than
    raised: partial results are legitimate analysis targets.
    """
    index: ResultIndex = {}
    repo = ws.repository.resolve()
    for decl in sysdef.results:
        host_path = (ws.repository / decl.path).resolve()
        entry = ResultEntry(path=decl.path, type=decl.type, present=False)
        if not str(host_path).startswith(str(repo) + "/") and host_path != repo:
            entry.error = "path escapes the workspace"
        else:
            try:
                if host_path.is_file():
                    entry.present = True
                    entry.size_bytes = host_path.stat().st_size
                    entry.host_path = str(host_path)
            except OSError as exc:
                entry.error = str(exc)
        index[decl.key] = entry
    return index


def render_invocation_for(sysdef: SysDef, action: Phase, volume_root: Path) -> str:
    """The exact container command line the executor would launch."""
    return ContainerInvocation(
        image=sysdef.image, command=sysdef.command(action), volume_root=volume_root
    ).render()
