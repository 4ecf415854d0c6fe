"""Workspace staging, action execution, and result collection."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from conftest import run_echo_oracle
from fixture_systems import make_sleep_sim_repo
from listing_docs import REFERENCE_RUN_COMMAND_LINE, REFERENCE_SYSDEF
from simlab.errors import ImageUnavailable, NotAFileParameter, StagingIOError
from simlab.executor import (
    SYSCFG_CONTAINER_PATH,
    TIMEOUT_EXIT_STATUS,
    ContainerInvocation,
    DockerRuntime,
    ProcessRuntime,
    collect_results,
    execute_action,
    prepare_workspace,
    render_invocation_for,
)
from simlab.formats import parse_syscfg, parse_sysdef
from simlab.model import Phase, SysCfg, SystemId
from simlab.storage import SystemStorage, tree_digest


@pytest.fixture()
def checkout(tmp_path, echo_repo):
    storage = SystemStorage(tmp_path / "systems.json", cache_dir=tmp_path / "cache")
    storage.register_system(str(echo_repo))
    return storage.checkout(SystemId("echo-sim", "1.0"), tmp_path / "checkout")


def empty_cfg(source):
    return SysCfg(system=source.sysdef.id)


class TestPrepareWorkspace:
    def test_layout(self, checkout, tmp_path):
        ws = prepare_workspace(checkout, empty_cfg(checkout), root=tmp_path / "ws")
        for sub in ("repository", "inputs", "outputs", "meta"):
            assert (ws.root / sub).is_dir()
        assert ws.syscfg_path.is_file()
        assert (ws.repository / "sysdef.json").is_file()

    def test_no_overrides_yields_system_only_config(self, checkout, tmp_path):
        ws = prepare_workspace(checkout, empty_cfg(checkout), root=tmp_path / "ws")
        assert json.loads(ws.syscfg_path.read_text()) == {
            "system": {"name": "echo-sim", "version": "1.0"}
        }

    def test_staged_file_rewrites_override(self, checkout, tmp_path):
        payload = tmp_path / "myApp.elf"
        payload.write_bytes(b"\x7fELF fake payload")
        ws = prepare_workspace(
            checkout,
            empty_cfg(checkout),
            file_inputs={"app": payload},
            root=tmp_path / "ws",
        )
        staged_cfg = parse_syscfg(ws.syscfg_path.read_text())
        assert staged_cfg.run_overrides["app"] == "/sysapi/inputs/myApp.elf"
        assert (ws.inputs / "myApp.elf").read_bytes() == payload.read_bytes()

    def test_staging_scalar_parameter_rejected(self, checkout, tmp_path):
        payload = tmp_path / "f.bin"
        payload.write_bytes(b"x")
        with pytest.raises(NotAFileParameter):
            prepare_workspace(
                checkout, empty_cfg(checkout), file_inputs={"run_time_ms": payload}, root=tmp_path / "ws"
            )

    def test_unreadable_input_is_a_staging_error(self, checkout, tmp_path):
        with pytest.raises(StagingIOError):
            prepare_workspace(
                checkout,
                empty_cfg(checkout),
                file_inputs={"app": tmp_path / "does-not-exist.elf"},
                root=tmp_path / "ws",
            )

    def test_unstaged_file_parameter_keeps_default(self, checkout, tmp_path):
        ws = prepare_workspace(checkout, empty_cfg(checkout), root=tmp_path / "ws")
        # nothing staged: the config carries no app override at all, the
        # system resolves the repository-relative default itself
        assert "app" not in json.loads(ws.syscfg_path.read_text()).get("run_parameters", {})


class TestInvocation:
    def test_reference_command_line(self, tmp_path):
        sysdef = parse_sysdef(REFERENCE_SYSDEF)
        volume = tmp_path / "vol"
        rendered = render_invocation_for(sysdef, Phase.RUN, volume)
        assert rendered == REFERENCE_RUN_COMMAND_LINE.format(volume=volume)

    def test_docker_argv_runs_command_through_shell(self, tmp_path):
        inv = ContainerInvocation(
            image="img:1", command="source run.sh", volume_root=tmp_path, label="exp-1"
        )
        argv = inv.docker_argv()
        assert argv[:3] == ["docker", "run", "--rm"]
        assert f"{tmp_path}:/sysapi" in argv
        assert argv[-4:] == ["img:1", "sh", "-c", f"source run.sh {SYSCFG_CONTAINER_PATH}"]
        assert "--label" in argv and "simlab.experiment=exp-1" in argv

    def test_docker_runtime_unavailable_probe(self):
        runtime = DockerRuntime(binary="definitely-not-a-container-cli")
        assert not runtime.available()

    @pytest.mark.skipif(not DockerRuntime().available(), reason="no docker daemon on this host")
    def test_no_labelled_container_survives_the_action(self, checkout, tmp_path):
        """Ephemerality contract: after an action returns, no container with
        the experiment's label remains."""
        ws = prepare_workspace(checkout, empty_cfg(checkout), root=tmp_path / "ws")
        runtime = DockerRuntime()
        execute_action(ws, checkout.sysdef, Phase.BUILD, runtime, timeout_s=300, label="exp-ephemeral")
        assert runtime._containers_with_label("exp-ephemeral") == []


class TestExecuteAndCollect:
    def test_successful_build_and_run(self, checkout, tmp_path):
        ws = prepare_workspace(checkout, empty_cfg(checkout), root=tmp_path / "ws")
        runtime = ProcessRuntime()
        build = execute_action(ws, checkout.sysdef, Phase.BUILD, runtime, timeout_s=60)
        assert build.exit_status == 0
        assert build.ok
        run = execute_action(ws, checkout.sysdef, Phase.RUN, runtime, timeout_s=60)
        assert run.exit_status == 0
        assert run.duration_s > 0
        assert (ws.meta / run.log_ref).read_text().strip().endswith("run ok")

    def test_result_collection_matches_oracle(self, checkout, tmp_path):
        ws = prepare_workspace(checkout, empty_cfg(checkout), root=tmp_path / "ws")
        runtime = ProcessRuntime()
        execute_action(ws, checkout.sysdef, Phase.BUILD, runtime, timeout_s=60)
        execute_action(ws, checkout.sysdef, Phase.RUN, runtime, timeout_s=60)
        index = collect_results(ws, checkout.sysdef)
        assert set(index) == {"signal_trace", "metrics"}
        trace = index["signal_trace"]
        assert trace.present and trace.type == "txt"
        got = Path(trace.host_path).read_bytes()
        expected = run_echo_oracle(checkout.checkout_path / "sysdef.json", ws.syscfg_path)
        assert got == expected
        assert trace.size_bytes == len(expected)

    def test_failing_run_propagates_exit_status(self, checkout, tmp_path):
        cfg = SysCfg(system=checkout.sysdef.id, run_overrides={"fail_with": 3})
        ws = prepare_workspace(checkout, cfg, root=tmp_path / "ws")
        runtime = ProcessRuntime()
        execute_action(ws, checkout.sysdef, Phase.BUILD, runtime, timeout_s=60)
        run = execute_action(ws, checkout.sysdef, Phase.RUN, runtime, timeout_s=60)
        assert run.exit_status == 3
        assert not run.ok

    def test_missing_result_recorded_not_raised(self, checkout, tmp_path):
        cfg = SysCfg(system=checkout.sysdef.id, run_overrides={"emit_metrics": False})
        ws = prepare_workspace(checkout, cfg, root=tmp_path / "ws")
        runtime = ProcessRuntime()
        execute_action(ws, checkout.sysdef, Phase.BUILD, runtime, timeout_s=60)
        execute_action(ws, checkout.sysdef, Phase.RUN, runtime, timeout_s=60)
        index = collect_results(ws, checkout.sysdef)
        assert index["signal_trace"].present
        assert not index["metrics"].present
        assert index["metrics"].size_bytes == 0

    def test_empty_results_declaration(self, tmp_path, sleep_repo):
        storage = SystemStorage(tmp_path / "s.json", cache_dir=tmp_path / "cache")
        storage.register_system(str(sleep_repo))
        source = storage.checkout(SystemId("sleep-sim", "1.0"), tmp_path / "co")
        ws = prepare_workspace(source, SysCfg(system=source.sysdef.id), root=tmp_path / "ws")
        assert collect_results(ws, source.sysdef) == {}

    def test_timeout_records_nonzero_status(self, tmp_path):
        repo = make_sleep_sim_repo(tmp_path / "repo", name="slowpoke")
        storage = SystemStorage(tmp_path / "s.json", cache_dir=tmp_path / "cache")
        storage.register_system(str(repo))
        source = storage.checkout(SystemId("slowpoke", "1.0"), tmp_path / "co")
        cfg = SysCfg(system=source.sysdef.id, run_overrides={"run_time_ms": 30000})
        ws = prepare_workspace(source, cfg, root=tmp_path / "ws")
        runtime = ProcessRuntime()
        build = execute_action(ws, source.sysdef, Phase.BUILD, runtime, timeout_s=60)
        assert build.exit_status == 0
        run = execute_action(ws, source.sysdef, Phase.RUN, runtime, timeout_s=0.3)
        assert run.exit_status == TIMEOUT_EXIT_STATUS

    def test_image_allowlist_enforced(self, checkout, tmp_path):
        ws = prepare_workspace(checkout, empty_cfg(checkout), root=tmp_path / "ws")
        runtime = ProcessRuntime(known_images={"some-other:img"})
        with pytest.raises(ImageUnavailable):
            execute_action(ws, checkout.sysdef, Phase.BUILD, runtime, timeout_s=60)

    def test_hermeticity(self, checkout, tmp_path):
        """The only host-visible side effects live inside the workspace."""
        sentinel = tmp_path / "sentinel"
        (sentinel / "nested").mkdir(parents=True)
        (sentinel / "nested" / "file.txt").write_text("untouched")
        before = tree_digest(sentinel)

        ws = prepare_workspace(checkout, empty_cfg(checkout), root=tmp_path / "ws")
        runtime = ProcessRuntime()
        execute_action(ws, checkout.sysdef, Phase.BUILD, runtime, timeout_s=60)
        execute_action(ws, checkout.sysdef, Phase.RUN, runtime, timeout_s=60)

        assert tree_digest(sentinel) == before

    def test_determinism_across_runs(self, checkout, tmp_path):
        """Identical effective config yields byte-identical declared results."""
        cfg = SysCfg(system=checkout.sysdef.id, run_overrides={"simulator_args": "--fast"})
        payloads = []
        for n in range(2):
            ws = prepare_workspace(checkout, cfg, root=tmp_path / f"ws{n}")
            runtime = ProcessRuntime()
            execute_action(ws, checkout.sysdef, Phase.BUILD, runtime, timeout_s=60)
            execute_action(ws, checkout.sysdef, Phase.RUN, runtime, timeout_s=60)
            index = collect_results(ws, checkout.sysdef)
            payloads.append(Path(index["signal_trace"].host_path).read_bytes())
        assert payloads[0] == payloads[1]

    def test_sleep_sim_duration_tracks_config(self, tmp_path, sleep_repo):
        storage = SystemStorage(tmp_path / "s.json", cache_dir=tmp_path / "cache")
        storage.register_system(str(sleep_repo))
        source = storage.checkout(SystemId("sleep-sim", "1.0"), tmp_path / "co")
        cfg = SysCfg(system=source.sysdef.id, run_overrides={"run_time_ms": 150})
        ws = prepare_workspace(source, cfg, root=tmp_path / "ws")
        runtime = ProcessRuntime()
        build = execute_action(ws, source.sysdef, Phase.BUILD, runtime, timeout_s=120)
        assert build.exit_status == 0, (ws.meta / build.log_ref).read_text()
        run = execute_action(ws, source.sysdef, Phase.RUN, runtime, timeout_s=60)
        assert run.exit_status == 0
        assert 0.15 <= run.duration_s < 0.35
