import itertools
import random

import pytest

from src.cxxrt import CLEANUP_FOUND, CONTINUE, HANDLER_FOUND, SPEC_VIOLATION, HandlerDecision
from src.ehpass import run_pass
from src.explorer import outputs_of, run_once
from src.lsda import ActionEntry, CallSiteRecord, LsdaTable
from src.ir import TypeInfoRegistry
from src.machine import ChoiceSource, Decision, Machine
from src.unwind import PERSONALITY_VERSION, ReasonCode, UnwindAction, UnwindContext, UnwindException

from .conftest import load_corpus

# Typeinfo ids in diamond_catch.ehir
BASE, LEFT, RIGHT, DIAMOND, OTHER = 1, 2, 3, 4, 5


@pytest.fixture
def runtime():
    return Machine(run_pass(load_corpus('diamond_catch.ehir'))).cxx


def table_with(actions, types=(), specs=()):
    return LsdaTable(
        callsites=[CallSiteRecord(0, 1, 5, 1 if actions else 0)],
        actions=list(actions), types=list(types), specs=[list(s) for s in specs],
    )


def test_diamond_reaches_the_shared_base(runtime):
    assert runtime.match_type(DIAMOND, BASE)
    assert runtime.match_type(DIAMOND, LEFT)
    assert runtime.match_type(DIAMOND, RIGHT)
    assert runtime.match_type(DIAMOND, DIAMOND)
    assert not runtime.match_type(DIAMOND, OTHER)
    assert not runtime.match_type(BASE, DIAMOND)
    assert not runtime.match_type(LEFT, RIGHT)


def test_catch_all_matches_everything(runtime):
    assert runtime.match_type(OTHER, 0)
    assert runtime.match_type(OTHER, 0, foreign=True)
    assert not runtime.match_type(OTHER, OTHER, foreign=True)


def test_decide_takes_the_first_matching_clause(runtime):
    table = table_with([ActionEntry(1, 1), ActionEntry(2, 1), ActionEntry(3, 0)], types=[OTHER, BASE, LEFT])
    decision = runtime.decide(table, table.callsites[0], DIAMOND)
    assert decision == HandlerDecision(HANDLER_FOUND, 2, False)
    assert decision.is_handler


def test_decide_cleanup_only(runtime):
    table = table_with([])
    assert runtime.decide(table, table.callsites[0], DIAMOND) == HandlerDecision(CLEANUP_FOUND, 0, True)


def test_decide_cleanup_without_matching_catch(runtime):
    table = table_with([ActionEntry(0, 1), ActionEntry(1, 0)], types=[OTHER])
    decision = runtime.decide(table, table.callsites[0], DIAMOND)
    assert decision.outcome == CLEANUP_FOUND
    assert not decision.is_handler


def test_decide_nothing_applies(runtime):
    table = table_with([ActionEntry(1, 0)], types=[OTHER])
    assert runtime.decide(table, table.callsites[0], BASE).outcome == CONTINUE


def test_exception_specification(runtime):
    table = table_with([ActionEntry(-1, 0)], specs=[[LEFT]])
    allowed = runtime.decide(table, table.callsites[0], DIAMOND)
    assert allowed.outcome == CONTINUE
    violated = runtime.decide(table, table.callsites[0], RIGHT)
    assert violated == HandlerDecision(SPEC_VIOLATION, -1, False)
    assert violated.is_handler


def test_empty_specification_rejects_everything(runtime):
    table = table_with([ActionEntry(-1, 0)], specs=[[]])
    assert runtime.decide(table, table.callsites[0], BASE).outcome == SPEC_VIOLATION


def test_foreign_exceptions_only_reach_catch_all(runtime):
    typed = table_with([ActionEntry(1, 0)], types=[BASE])
    assert runtime.decide(typed, typed.callsites[0], 0, foreign=True).outcome == CONTINUE
    catch_all = table_with([ActionEntry(1, 0)], types=[0])
    assert runtime.decide(catch_all, catch_all.callsites[0], 0, foreign=True).outcome == HANDLER_FOUND
    spec = table_with([ActionEntry(-1, 0)], specs=[[BASE]])
    assert runtime.decide(spec, spec.callsites[0], 0, foreign=True).outcome == SPEC_VIOLATION


def test_diamond_program_selects_the_base_clause():
    machine = run_once(load_corpus('diamond_catch.ehir'))
    assert outputs_of(machine.events) == ['2']
    assert 'INSTALL main 2 2' in machine.events


def test_destructor_runs_at_end_catch():
    machine = run_once(load_corpus('exception_destructor.ehir'), check_leaks=True)
    assert outputs_of(machine.events) == ['1', '42', '2']
    assert machine.outcome.label == 'halted(0)'


def test_rethrow_reuses_the_exception_object():
    machine = run_once(load_corpus('rethrow.ehir'), check_leaks=True)
    assert outputs_of(machine.events) == ['1', '2']
    assert machine.outcome.label == 'halted(0)'
    assert sum(1 for event in machine.events if event.startswith('RAISE')) == 2


def test_handler_may_throw_a_new_exception():
    machine = run_once(load_corpus('handler_throws_new.ehir'), check_leaks=True)
    assert outputs_of(machine.events) == ['1', '2']
    assert machine.outcome.label == 'halted(0)'


def test_rethrow_without_caught_exception(module_from):
    machine = run_once(module_from("fn @main() {\nentry:\n  call @__cxa_rethrow()\n  ret 0\n}\n"))
    assert machine.outcome.label == 'fault(terminate)'


def test_end_catch_without_caught_exception():
    machine = run_once(load_corpus('end_catch_unbalanced.ehir'))
    assert machine.outcome.label == 'fault(terminate)'
    assert outputs_of(machine.events) == ['1']


def test_throw_with_invalid_typeinfo(module_from):
    machine = run_once(module_from("""
typeinfo @A

fn @main() {
entry:
  %e = call @__cxa_allocate_exception(1)
  call @__cxa_throw(%e, 7, 0)
  ret 0
}
"""))
    assert machine.outcome.label == 'fault(trap)'


def test_exception_allocation_can_fail(module_from):
    module = module_from("fn @main() {\nentry:\n  %e = call @__cxa_allocate_exception(1)\n  ret 0\n}\n")
    ok = run_once(module, ChoiceSource(), fault_injection=True)
    assert ok.outcome.label == 'halted(0)'
    failed = run_once(module, ChoiceSource([Decision(0, 2, 1)]), fault_injection=True)
    assert failed.outcome.label == 'fault(terminate)'


def runtime_for(module_from, bases, order):
    """A runtime whose typeinfo T<i> has direct bases T<b> for b in bases[i], declared in `order`."""
    module = module_from("fn @main() {\nentry:\n  ret 0\n}\n")
    module.typeinfos = TypeInfoRegistry({f"T{i}": [f"T{b}" for b in bases[i]] for i in order})
    return Machine(module).cxx


def reachability(bases):
    size = len(bases)
    reach = [[i == j for j in range(size)] for i in range(size)]
    for derived, direct in enumerate(bases):
        for base in direct:
            reach[derived][base] = True
    for k in range(size):
        for i in range(size):
            if reach[i][k]:
                for j in range(size):
                    if reach[k][j]:
                        reach[i][j] = True
    return reach


def assert_matches_reachability(runtime, bases):
    registry = runtime.machine.module.typeinfos
    reach = reachability(bases)
    for derived in range(len(bases)):
        for base in range(len(bases)):
            thrown, clause = registry.id_of(f"T{derived}"), registry.id_of(f"T{base}")
            assert runtime.match_type(thrown, clause) == reach[derived][base], (bases, derived, base)


def test_match_type_on_every_four_node_dag(module_from):
    pairs = [(i, j) for i in range(4) for j in range(i)]
    for present in itertools.product([False, True], repeat=len(pairs)):
        bases = [[] for _ in range(4)]
        for (derived, base), on in zip(pairs, present):
            if on:
                bases[derived].append(base)
        assert_matches_reachability(runtime_for(module_from, bases, range(4)), bases)


def random_dag(rng: random.Random, size: int):
    bases = []
    for node in range(size):
        direct = rng.sample(range(node), rng.randrange(0, min(node, 3) + 1))
        # Repeated base
        if direct and rng.random() < 0.2:
            direct.append(direct[0])
        bases.append(direct)
    return bases


def test_match_type_on_random_dags(module_from, rng):
    for _ in range(150):
        size = rng.randrange(1, 13)
        bases = random_dag(rng, size)
        order = list(range(size))
        rng.shuffle(order)
        assert_matches_reachability(runtime_for(module_from, bases, order), bases)


CATCH_IN_MAIN = """
fn @main() personality @__ehvm_personality_v0 {
entry:
  invoke @throw_a() to %ok unwind %lp
ok:
  ret 0
lp:
  %p = landingpad CLAUSE
  ret 1
}
"""


def personality_at_main(module_from, clause, actions):
    machine = Machine(run_pass(module_from(CATCH_IN_MAIN.replace('CLAUSE', clause), with_thrower=True)))
    main = machine.active_frame
    ctx = UnwindContext(main.id, machine.region_start('main') + main.pc)
    exc = UnwindException(b"FOREIGN\0")
    reason = machine.cxx.personality(PERSONALITY_VERSION, actions, exc.exception_class, exc, ctx)
    return machine, ctx, reason


def test_foreign_exception_reaching_catch_all(module_from):
    _, _, reason = personality_at_main(module_from, 'catch any', UnwindAction.SEARCH_PHASE)
    assert reason == ReasonCode.FOREIGN_CAUGHT


def test_foreign_exception_skips_typed_catch(module_from):
    _, _, reason = personality_at_main(module_from, 'catch @A', UnwindAction.SEARCH_PHASE)
    assert reason == ReasonCode.CONTINUE_UNWIND


def test_installed_ip_is_relative_to_the_region_start(module_from):
    actions = UnwindAction.CLEANUP_PHASE | UnwindAction.HANDLER_FRAME
    machine, ctx, reason = personality_at_main(module_from, 'catch any', actions)
    assert reason == ReasonCode.INSTALL_CONTEXT
    assert ctx.ip == machine.region_start('main') + 2
    assert machine.unwinder.get_gr(ctx, 1) == 1
