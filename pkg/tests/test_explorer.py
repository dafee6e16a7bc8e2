from collections import Counter

import pytest

from src.errors import ParseError, TraceMismatchError
from src.explorer import ChoiceTrace, explore, outputs_of, replay
from src.machine import Decision

from .conftest import load_corpus


def test_fault_injection_enumerates_every_allocation_failure():
    report = explore(load_corpus('fault_injection_three.ehir'), fault_injection=True, keep_logs=True)
    assert report.executions == 8
    assert dict(report.outcomes) == {'halted(0)': 8}
    assert report.exit_code == 0
    totals = Counter(outputs_of(log.events)[0] for log in report.logs)
    assert totals == {'3': 1, '2': 3, '1': 3, '0': 1}


def test_without_fault_injection_allocations_succeed():
    report = explore(load_corpus('fault_injection_three.ehir'))
    assert report.executions == 1
    assert dict(report.outcomes) == {'halted(0)': 1}


def test_depth_first_order():
    report = explore(load_corpus('fault_injection_three.ehir'), fault_injection=True, keep_logs=True)
    first, last = report.logs[0].trace.decisions, report.logs[-1].trace.decisions
    assert [d.taken for d in first] == [0, 0, 0]
    assert [d.taken for d in last] == [1, 1, 1]
    assert [d.taken for d in report.logs[1].trace.decisions] == [0, 0, 1]


def test_reverse_order_visits_the_same_executions():
    forward = explore(load_corpus('choose_throw.ehir'))
    backward = explore(load_corpus('choose_throw.ehir'), reverse=True, keep_logs=True)
    assert backward.outcomes == forward.outcomes
    assert [d.taken for d in backward.logs[0].trace.decisions] == [2, 1]


def test_counterexample_is_the_first_fault():
    report = explore(load_corpus('choose_throw.ehir'))
    assert report.executions == 4
    assert dict(report.outcomes) == {'halted(0)': 2, 'fault(terminate)': 2}
    assert report.exit_code == 1
    example = report.counterexample
    assert example.fault.kind == 'terminate'
    assert example.trace.decisions == [Decision(0, 3, 2), Decision(1, 2, 0)]
    assert example.events[-1].startswith('FAULT terminate')


def test_exploration_bound():
    report = explore(load_corpus('choose_throw.ehir'), max_executions=2)
    assert report.executions == 2
    assert report.bound_exhausted
    assert report.exit_code == 2


def test_fault_takes_precedence_over_the_bound():
    report = explore(load_corpus('choose_throw.ehir'), max_executions=3)
    assert report.bound_exhausted
    assert report.exit_code == 1


def test_execution_callback():
    seen = []
    report = explore(load_corpus('choose_throw.ehir'), on_execution=seen.append)
    assert len(seen) == report.executions
    assert [log.outcome for log in seen].count('fault(terminate)') == 2
    assert report.logs == []


def test_failing_exception_allocation_terminates():
    report = explore(load_corpus('fi_exception.ehir'), fault_injection=True)
    assert dict(report.outcomes) == {'halted(0)': 1, 'fault(terminate)': 1}


def test_trace_text_format():
    trace = ChoiceTrace([Decision(0, 3, 2), Decision(1, 2, 0)])
    assert trace.to_text() == "CHOICE 0 3 2\nCHOICE 1 2 0\n"
    assert ChoiceTrace.from_text(trace.to_text()) == trace
    assert ChoiceTrace.from_text("# counterexample\n\nCHOICE 0 2 1\n").decisions == [Decision(0, 2, 1)]
    assert len(ChoiceTrace.from_text("")) == 0


@pytest.mark.parametrize('text', [
    "CHOICE 0 2\n",
    "PICK 0 2 1\n",
    "CHOICE 0 two 1\n",
    "CHOICE 1 2 1\n",
    "CHOICE 0 2 1\nCHOICE 0 2 1\n",
])
def test_malformed_traces(text):
    with pytest.raises(ParseError):
        ChoiceTrace.from_text(text)


def test_replay_reproduces_every_execution():
    module = load_corpus('choose_throw.ehir')
    report = explore(module, keep_logs=True)
    for log in report.logs:
        assert replay(module, log.trace) == log.events


def test_replay_with_fault_injection():
    module = load_corpus('fault_injection_three.ehir')
    trace = ChoiceTrace([Decision(0, 2, 1), Decision(1, 2, 0), Decision(2, 2, 1)])
    events = replay(module, trace, fault_injection=True)
    assert outputs_of(events) == ['1']


@pytest.mark.parametrize('decisions', [
    [Decision(0, 2, 0)],
    [Decision(0, 3, 2)],
    [Decision(0, 3, 0), Decision(1, 2, 0)],
    [Decision(0, 3, 5)],
])
def test_replay_mismatch(decisions):
    with pytest.raises(TraceMismatchError):
        replay(load_corpus('choose_throw.ehir'), ChoiceTrace(decisions))
