"""Lifecycle state machine: transition table, totality, reachability."""

from __future__ import annotations

import itertools

import pytest

from simlab.errors import IllegalTransition, SchemaError
from simlab.model import (
    TRANSITIONS,
    BackendDescriptor,
    BackendKind,
    ExperimentState as S,
    LifecycleEvent as E,
    ParameterDef,
    Phase,
    ResultDecl,
    SystemId,
    experiment_id_for,
    is_legal,
    scalar_kind,
    transition,
)


def test_first_workflow_step():
    assert transition(S.CREATED, E.CONFIGURE) is S.CONFIGURED


def test_run_requires_prior_successful_build():
    with pytest.raises(IllegalTransition):
        transition(S.CONFIGURED, E.START_RUN)


def test_finished_experiment_can_run_again():
    # repeat a run with the same build
    assert transition(S.FINISHED, E.START_RUN) is S.RUNNING


def test_happy_path():
    state = S.CREATED
    for event in (E.CONFIGURE, E.START_BUILD, E.BUILD_OK, E.START_RUN, E.RUN_OK):
        state = transition(state, event)
    assert state is S.FINISHED


def test_failure_states_only_exit_via_configure():
    for failed in (S.BUILD_FAILED, S.RUN_FAILED):
        for event in E:
            if event is E.CONFIGURE:
                assert transition(failed, event) is S.CONFIGURED
            else:
                with pytest.raises(IllegalTransition):
                    transition(failed, event)


def test_total_over_all_pairs():
    # every (state, event) pair either yields a state or IllegalTransition
    for state, event in itertools.product(S, E):
        if (state, event) in TRANSITIONS:
            assert isinstance(transition(state, event), S)
            assert is_legal(state, event)
        else:
            with pytest.raises(IllegalTransition) as err:
                transition(state, event)
            assert err.value.state == state.value
            assert err.value.event == event.value
            assert not is_legal(state, event)


def test_illegal_transition_carries_context():
    with pytest.raises(IllegalTransition) as err:
        transition(S.CREATED, E.START_RUN)
    assert "Created" in str(err.value.detail)
    assert "StartRun" in str(err.value.detail)


def _reachability_oracle(max_len: int) -> dict[S, set[tuple[E, ...]]]:
    """Brute-force enumeration of every event string up to max_len."""
    reached: dict[S, set[tuple[E, ...]]] = {s: set() for s in S}
    frontier: list[tuple[S, tuple[E, ...]]] = [(S.CREATED, ())]
    for _ in range(max_len):
        nxt: list[tuple[S, tuple[E, ...]]] = []
        for state, path in frontier:
            for event in E:
                if (state, event) in TRANSITIONS:
                    succ = TRANSITIONS[(state, event)]
                    new_path = path + (event,)
                    reached[succ].add(new_path)
                    nxt.append((succ, new_path))
        frontier = nxt
    return reached


def test_finished_reachable_only_through_full_workflow_prefix():
    reached = _reachability_oracle(6)
    workflow = (E.CONFIGURE, E.START_BUILD, E.BUILD_OK, E.START_RUN, E.RUN_OK)
    # within 6 events the only paths landing in Finished are the workflow
    # order itself, optionally with the idempotent Configure repeated
    assert reached[S.FINISHED] == {
        workflow,
        (E.CONFIGURE,) + workflow,
    }


def test_every_state_reachable():
    reached = _reachability_oracle(6)
    for state in S:
        if state is S.CREATED:
            continue
        assert reached[state], f"{state} unreachable within 6 events"


def test_transition_is_pure():
    # repeated application gives identical answers; the table is not mutated
    before = dict(TRANSITIONS)
    for _ in range(3):
        assert transition(S.CREATED, E.CONFIGURE) is S.CONFIGURED
    assert TRANSITIONS == before


def test_scalar_kind_classification():
    assert scalar_kind("x") == "string"
    assert scalar_kind(3) == "number"
    assert scalar_kind(3.5) == "number"
    assert scalar_kind(True) == "boolean"
    with pytest.raises(TypeError):
        scalar_kind(None)  # type: ignore[arg-type]


def test_system_id_requires_nonempty_fields():
    with pytest.raises(SchemaError):
        SystemId("", "1.0")
    with pytest.raises(SchemaError):
        SystemId("x", "")


def test_result_decl_confinement():
    with pytest.raises(SchemaError):
        ResultDecl(key="r", path="/abs/path")
    with pytest.raises(SchemaError):
        ResultDecl(key="r", path="a/../../b")
    ResultDecl(key="r", path="out/ok.bin")  # fine


def test_file_parameter_default_must_be_string():
    with pytest.raises(SchemaError):
        ParameterDef(key="app", default_value=1, is_file=True, phase=Phase.RUN)


def test_backend_descriptor_capacity_validation():
    with pytest.raises(SchemaError):
        BackendDescriptor(id="b", kind=BackendKind.LOCAL, capacity=0)
    unbounded = BackendDescriptor(id="b", kind=BackendKind.REMOTE, capacity=None)
    assert unbounded.capacity is None


def test_experiment_ids_sort_by_creation_order():
    ids = [experiment_id_for(n) for n in (1, 2, 10, 99, 100)]
    assert ids == sorted(ids)
