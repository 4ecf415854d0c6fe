"""SysDef/SysCfg codec: parsing, merge semantics, deterministic rendering."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from listing_docs import REFERENCE_SYSCFG, REFERENCE_SYSDEF
from simlab.errors import SchemaError, SystemMismatch, TypeMismatch, UnknownParameter
from simlab.formats import (
    merge,
    parse_syscfg,
    parse_sysdef,
    render_syscfg,
    render_sysdef,
    sysdef_to_dict,
)
from simlab.model import Phase, SysCfg, SystemId


@pytest.fixture()
def sysdef():
    return parse_sysdef(REFERENCE_SYSDEF)


@pytest.fixture()
def syscfg():
    return parse_syscfg(REFERENCE_SYSCFG)


class TestParseSysdef:
    def test_reference_document(self, sysdef):
        assert sysdef.id == SystemId("System 3", "1.2")
        assert sysdef.image == "my_registry.com/image-b:demo"
        assert sysdef.build_command == "python build.py"
        assert sysdef.run_command == "source run.sh"

        build = sysdef.parameter_map(Phase.BUILD)
        assert set(build) == {"compile_args"}
        assert build["compile_args"].default_value == "-O3 -Wall"
        assert build["compile_args"].is_file is False

        run = sysdef.parameter_map(Phase.RUN)
        assert set(run) == {"run_time_ms", "app", "simulator_args"}
        assert run["run_time_ms"].default_value == 1000
        assert isinstance(run["run_time_ms"].default_value, int)
        assert run["app"].default_value == "demo_sw/demo_app"
        assert run["app"].is_file is True
        assert run["simulator_args"].default_value == "--verbose"

        assert len(sysdef.results) == 1
        trace = sysdef.results[0]
        assert (trace.key, trace.path, trace.type) == ("signal_trace", "vp/output/sim_trace.vcd", "vcd")

    def test_minimal_document(self):
        sd = parse_sysdef('{"name":"x","version":"1","docker_image":"i","build_command":"b","run_command":"r"}')
        assert sd.id == SystemId("x", "1")
        assert sd.build_parameters == ()
        assert sd.run_parameters == ()
        assert sd.results == ()

    def test_file_parameter_without_default_is_rejected(self):
        doc = json.loads(REFERENCE_SYSDEF)
        del doc["run_parameters"]["app"]["default_value"]
        with pytest.raises(SchemaError) as err:
            parse_sysdef(json.dumps(doc))
        assert "run_parameters.app" in err.value.detail

    @pytest.mark.parametrize("missing", ["name", "version", "docker_image", "build_command", "run_command"])
    def test_missing_required_field(self, missing):
        doc = json.loads(REFERENCE_SYSDEF)
        del doc[missing]
        with pytest.raises(SchemaError) as err:
            parse_sysdef(json.dumps(doc))
        assert missing in err.value.detail

    def test_duplicate_parameter_key_rejected(self):
        text = REFERENCE_SYSDEF.replace('"compile_args": "-O3 -Wall"', '"a": 1, "a": 2')
        with pytest.raises(SchemaError):
            parse_sysdef(text)

    def test_result_path_escaping_workspace_rejected(self):
        doc = json.loads(REFERENCE_SYSDEF)
        doc["results"]["signal_trace"]["path"] = "../outside.vcd"
        with pytest.raises(SchemaError):
            parse_sysdef(json.dumps(doc))
        doc["results"]["signal_trace"]["path"] = "/etc/passwd"
        with pytest.raises(SchemaError):
            parse_sysdef(json.dumps(doc))

    def test_unknown_top_level_fields_warn_not_reject(self, caplog):
        doc = json.loads(REFERENCE_SYSDEF)
        doc["future_field"] = {"x": 1}
        with caplog.at_level("WARNING"):
            sd = parse_sysdef(json.dumps(doc))
        assert sd.id.name == "System 3"
        assert any("future_field" in r.message for r in caplog.records)

    def test_not_json(self):
        with pytest.raises(SchemaError):
            parse_sysdef("not json at all {")

    def test_is_file_allowed_in_build_parameters(self):
        doc = json.loads(REFERENCE_SYSDEF)
        doc["build_parameters"]["overlay"] = {"default_value": "src/overlay.tar", "is_file": True}
        sd = parse_sysdef(json.dumps(doc))
        assert sd.parameter_map(Phase.BUILD)["overlay"].is_file is True

    def test_required_backend_kind_extension(self):
        doc = json.loads(REFERENCE_SYSDEF)
        doc["required_backend_kind"] = "cascaded"
        assert parse_sysdef(json.dumps(doc)).required_backend_kind == "cascaded"


class TestParseSyscfg:
    def test_reference_document(self, syscfg):
        assert syscfg.system == SystemId("System 3", "1.2")
        assert dict(syscfg.build_overrides) == {"compile_args": "-Os"}
        assert dict(syscfg.run_overrides) == {"run_time_ms": 20, "app": "/sysapi/inputs/myApp.elf"}
        assert isinstance(syscfg.run_overrides["run_time_ms"], int)

    def test_system_only(self):
        cfg = parse_syscfg('{"system":{"name":"x","version":"1"}}')
        assert cfg.system == SystemId("x", "1")
        assert not cfg.build_overrides
        assert not cfg.run_overrides

    def test_missing_system(self):
        with pytest.raises(SchemaError) as err:
            parse_syscfg('{"build_parameters":{}}')
        assert "system" in err.value.detail

    def test_non_scalar_override_rejected(self):
        with pytest.raises(SchemaError):
            parse_syscfg('{"system":{"name":"x","version":"1"},"run_parameters":{"a":[1,2]}}')


class TestMerge:
    def test_run_phase_reference_pair(self, sysdef, syscfg):
        eff = merge(sysdef, syscfg, Phase.RUN)
        assert eff.values == {
            "run_time_ms": 20,
            "app": "/sysapi/inputs/myApp.elf",
            "simulator_args": "--verbose",
        }
        # declaration order is preserved
        assert list(eff.values) == ["run_time_ms", "app", "simulator_args"]

    def test_build_phase_reference_pair(self, sysdef, syscfg):
        assert merge(sysdef, syscfg, Phase.BUILD).values == {"compile_args": "-Os"}

    def test_defaults_when_no_overrides(self, sysdef):
        empty = SysCfg(system=sysdef.id)
        assert merge(sysdef, empty, Phase.BUILD).values == {"compile_args": "-O3 -Wall"}
        assert merge(sysdef, empty, Phase.RUN).values == {
            "run_time_ms": 1000,
            "app": "demo_sw/demo_app",
            "simulator_args": "--verbose",
        }

    def test_undeclared_override_rejected(self, sysdef):
        cfg = SysCfg(system=sysdef.id, run_overrides={"bogus": 1})
        with pytest.raises(UnknownParameter) as err:
            merge(sysdef, cfg, Phase.RUN)
        assert err.value.key == "bogus"

    def test_system_mismatch_rejected(self, sysdef):
        cfg = SysCfg(system=SystemId("Other", "1.2"))
        with pytest.raises(SystemMismatch):
            merge(sysdef, cfg, Phase.RUN)

    def test_scalar_kind_mismatch_rejected(self, sysdef):
        cfg = SysCfg(system=sysdef.id, run_overrides={"run_time_ms": "twenty"})
        with pytest.raises(TypeMismatch):
            merge(sysdef, cfg, Phase.RUN)
        cfg = SysCfg(system=sysdef.id, run_overrides={"simulator_args": True})
        with pytest.raises(TypeMismatch):
            merge(sysdef, cfg, Phase.RUN)

    def test_int_float_share_the_number_kind(self, sysdef):
        cfg = SysCfg(system=sysdef.id, run_overrides={"run_time_ms": 20.5})
        assert merge(sysdef, cfg, Phase.RUN).values["run_time_ms"] == 20.5

    def test_file_override_must_be_string(self, sysdef):
        cfg = SysCfg(system=sysdef.id, run_overrides={"app": 42})
        with pytest.raises(TypeMismatch):
            merge(sysdef, cfg, Phase.RUN)


class TestRender:
    def test_reference_round_trip(self, syscfg):
        assert parse_syscfg(render_syscfg(syscfg)) == syscfg

    def test_reference_semantic_equality(self, syscfg):
        assert json.loads(render_syscfg(syscfg)) == json.loads(REFERENCE_SYSCFG)

    def test_block_order_and_empty_blocks_omitted(self):
        cfg = SysCfg(system=SystemId("x", "1"))
        doc = render_syscfg(cfg)
        assert json.loads(doc) == {"system": {"name": "x", "version": "1"}}
        cfg = SysCfg(system=SystemId("x", "1"), build_overrides={"a": 1}, run_overrides={"b": True})
        assert list(json.loads(doc := render_syscfg(cfg))) == ["system", "build_parameters", "run_parameters"]
        assert json.loads(doc)["run_parameters"] == {"b": True}

    def test_sysdef_canonical_render_is_idempotent(self, sysdef):
        rendered = render_sysdef(sysdef)
        assert parse_sysdef(rendered) == sysdef
        assert render_sysdef(parse_sysdef(rendered)) == rendered

    def test_sysdef_canonical_form_matches_reference(self, sysdef):
        assert sysdef_to_dict(sysdef) == json.loads(REFERENCE_SYSDEF)


_scalars = st.one_of(
    st.text(min_size=0, max_size=20),
    st.integers(min_value=-(10**9), max_value=10**9),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
    st.booleans(),
)
_keys = st.text(alphabet="abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=12)


@given(
    name=st.text(min_size=1, max_size=12),
    version=st.text(min_size=1, max_size=6),
    build=st.dictionaries(_keys, _scalars, max_size=5),
    run=st.dictionaries(_keys, _scalars, max_size=5),
)
@settings(max_examples=150, deadline=None)
def test_syscfg_round_trip_property(name, version, build, run):
    cfg = SysCfg(system=SystemId(name, version), build_overrides=build, run_overrides=run)
    assert parse_syscfg(render_syscfg(cfg)) == cfg


@given(
    defaults=st.dictionaries(_keys, _scalars, min_size=1, max_size=6),
    data=st.data(),
)
@settings(max_examples=150, deadline=None)
def test_merge_totality_and_override_bias(defaults, data):
    """For any declared set and any override subset, the merged key set equals
    the declared set and every value is override-if-present else default."""
    from simlab.model import ParameterDef, SysDef

    params = tuple(
        ParameterDef(key=k, default_value=v, phase=Phase.RUN) for k, v in defaults.items()
    )
    sysdef = SysDef(
        id=SystemId("p", "1"),
        image="img",
        build_command="b",
        run_command="r",
        run_parameters=params,
    )
    chosen = data.draw(st.sets(st.sampled_from(sorted(defaults)), max_size=len(defaults)))
    overrides = {}
    for key in chosen:
        kind_source = defaults[key]
        if isinstance(kind_source, bool):
            overrides[key] = data.draw(st.booleans())
        elif isinstance(kind_source, (int, float)):
            overrides[key] = data.draw(st.integers(min_value=-1000, max_value=1000))
        else:
            overrides[key] = data.draw(st.text(max_size=10))
    cfg = SysCfg(system=sysdef.id, run_overrides=overrides)
    eff = merge(sysdef, cfg, Phase.RUN)
    assert set(eff.values) == set(defaults)
    for key, value in eff.values.items():
        assert value == (overrides[key] if key in overrides else defaults[key])
