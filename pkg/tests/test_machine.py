import pytest

from src.ehpass import run_pass
from src.errors import ExecutionError
from src.explorer import outputs_of, run_once
from src.machine import ChoiceSource, Decision, Machine
from src.memory import GuestFault, Heap, Pointer
from src.unwind import UnwindContext

from .conftest import load_corpus


def run_text(module_from, text, **options):
    return run_once(module_from(text), ChoiceSource(), **options)


def test_arithmetic_and_phi(module_from):
    machine = run_text(module_from, """
fn @main() {
entry:
  %a = add 40, 5
  %b = sub %a, 3
  %c = lt %b, 100
  condbr %c, %yes, %no
yes:
  br %join
no:
  br %join
join:
  %r = phi [%b, %yes], [0, %no]
  call @__ehvm_out(%r)
  ret 0
}
""")
    assert outputs_of(machine.events) == ['42']
    assert machine.outcome.label == 'halted(0)'
    assert machine.events[-1] == 'HALT 0'


def test_exit_code_is_the_return_value_of_main(module_from):
    machine = run_text(module_from, "fn @main() {\nentry:\n  ret 7\n}\n")
    assert machine.outcome.exit_code == 7


def test_symbol_values(module_from):
    machine = run_text(module_from, """
typeinfo @A
typeinfo @B
global @g = [1]

fn @main() {
entry:
  %f = const @main
  call @__ehvm_out(%f)
  %t = const @B
  call @__ehvm_out(%t)
  %p = const @g
  call @__ehvm_out(%p)
  ret 0
}
""")
    assert outputs_of(machine.events) == [str(1 << 16), '2', str(Pointer(-1, 0))]


def test_step_events_name_function_pc_and_opcode(module_from):
    machine = run_text(module_from, "fn @main() {\nentry:\n  %x = add 1, 2\n  ret %x\n}\n")
    assert machine.events == ['STEP main 0 add', 'STEP main 1 ret', 'HALT 3']


def test_uninitialized_load_faults(module_from):
    machine = run_text(module_from, """
fn @main() {
entry:
  %p = alloca 1
  %v = load %p
  ret 0
}
""")
    assert machine.outcome.label == 'fault(uninitialized)'
    assert machine.outcome.fault.location == ('main', 1)
    assert machine.events[-1] == 'FAULT uninitialized main 1'


def test_out_of_bounds_store_faults(module_from):
    machine = run_text(module_from, """
fn @main() {
entry:
  %p = alloca 2
  %q = gep %p, 2
  store 1, %q
  ret 0
}
""")
    assert machine.outcome.label == 'fault(bounds)'
    assert machine.outcome.fault.location == ('main', 2)


def test_alloca_dies_with_its_frame():
    machine = run_once(load_corpus('dangling_alloca.ehir'))
    assert machine.outcome.label == 'fault(use-after-free)'
    assert machine.outcome.fault.location == ('main', 1)


def test_double_free_faults(module_from):
    machine = run_text(module_from, """
fn @main() {
entry:
  %p = call @malloc(1)
  call @free(%p)
  call @free(%p)
  ret 0
}
""")
    assert machine.outcome.label == 'fault(use-after-free)'


def test_trap_and_assert(module_from):
    trap = run_text(module_from, "fn @main() {\nentry:\n  trap\n}\n")
    assert trap.outcome.label == 'fault(trap)'
    failed = run_text(module_from, "fn @main() {\nentry:\n  call @__ehvm_assert(0)\n  ret 0\n}\n")
    assert failed.outcome.label == 'fault(trap)'
    assert 'assertion' in failed.outcome.fault.message


def test_step_limit(module_from):
    machine = run_text(module_from, "fn @main() {\nloop:\n  br %loop\n}\n", max_steps=50)
    assert machine.outcome.label == 'fault(trap)'
    assert 'step limit' in machine.outcome.fault.message
    assert machine.steps == 51


def test_step_after_halt_is_a_host_error(module_from):
    machine = run_text(module_from, "fn @main() {\nentry:\n  ret 0\n}\n")
    with pytest.raises(ExecutionError):
        machine.step()


def test_module_without_main(module_from):
    with pytest.raises(ExecutionError):
        Machine(module_from("fn @other() {\nentry:\n  ret 0\n}\n"))


def test_unlowered_module_has_no_landing_pads():
    module = load_corpus('uncaught_dtor.ehir')
    machine = Machine(module, ChoiceSource([Decision(0, 2, 1)]))
    outcome = machine.run()
    # Without the pass there is no LSDA, so the cleanup never runs
    assert outcome.label == 'fault(terminate)'
    assert outputs_of(machine.events) == []


def test_longjmp_unwinds_intermediate_frames():
    machine = run_once(load_corpus('longjmp_multi.ehir'))
    assert outputs_of(machine.events) == ['7']
    assert 'UNWIND level2 main freed=2' in machine.events
    assert machine.outcome.label == 'halted(0)'


def test_longjmp_to_returned_frame():
    machine = run_once(load_corpus('longjmp_dead_frame.ehir'))
    assert machine.outcome.label == 'fault(use-after-free)'


def test_unwinding_frees_allocas_of_every_removed_frame():
    machine = run_once(load_corpus('cleanup_alloca.ehir'))
    unwinds = [event for event in machine.events if event.startswith('UNWIND')]
    assert unwinds == ['UNWIND throw_a inner freed=0', 'UNWIND inner main freed=2']
    assert outputs_of(machine.events) == ['5', '1']


def test_census_after_halt_is_empty():
    machine = run_once(load_corpus('cleanup_alloca.ehir'), check_leaks=True)
    assert machine.outcome.label == 'halted(0)'
    assert machine.census() == {}


def test_leak_check_reports_live_user_memory(module_from):
    text = "fn @main() {\nentry:\n  %p = call @malloc(3)\n  ret 0\n}\n"
    assert run_text(module_from, text).outcome.label == 'halted(0)'
    leaky = run_text(module_from, text, check_leaks=True)
    assert leaky.outcome.label == 'fault(leak)'
    assert '1 user' in leaky.outcome.fault.message


def test_threads_interleave_only_at_visible_accesses():
    machine = run_once(load_corpus('threads_shared.ehir'))
    assert 'SPAWN 1 worker' in machine.events
    assert [event for event in machine.events if event.startswith('CHOICE')] == ['CHOICE 2 0']
    assert outputs_of(machine.events) == ['1']

    other = run_once(load_corpus('threads_shared.ehir'), ChoiceSource([Decision(0, 2, 1)]))
    assert outputs_of(other.events) == ['2']


def test_masked_section_has_no_scheduling_choices(module_from):
    machine = run_text(module_from, """
global @g = [0]

fn @worker(%x) {
entry:
  store 1, @g
  ret 0
}

fn @main() {
entry:
  %old = call @__dios_mask(1)
  %t = call @__dios_spawn(@worker, 0)
  store 2, @g
  store 3, @g
  %m = call @__dios_mask(%old)
  %r = call @__dios_join(%t)
  ret 0
}
""")
    assert not any(event.startswith('CHOICE') for event in machine.events)
    assert machine.events.count('MASK 1') == 1
    assert 'MASK 0' in machine.events


def test_choose_records_decisions(module_from):
    machine = run_text(module_from, """
fn @main() {
entry:
  %c = call @__dios_choose(3)
  call @__ehvm_out(%c)
  %d = call @__dios_choose(1)
  ret 0
}
""")
    # A single-branch choice is not a choice point
    assert machine.choices.decisions == [Decision(0, 3, 0)]
    assert 'CHOICE 3 0' in machine.events


def test_context_accessors_reject_unsupported_registers(module_from):
    machine = Machine(run_pass(module_from("fn @main() {\nentry:\n  ret 0\n}\n")))
    ctx = UnwindContext(frame=machine.active_frame.id, ip=0)
    machine.unwinder.set_gr(ctx, 1, 5)
    assert machine.unwinder.get_gr(ctx, 1) == 5
    with pytest.raises(GuestFault) as caught:
        machine.unwinder.set_gr(ctx, 2, 0)
    assert caught.value.kind == 'unsupported-register'
    with pytest.raises(GuestFault):
        machine.unwinder.get_gr(ctx, 7)


def test_region_start_and_lsda_accessors():
    module = run_pass(load_corpus('catch_plain.ehir'))
    machine = Machine(module)
    ctx = UnwindContext(frame=machine.active_frame.id, ip=0)
    index = [f.name for f in module.functions].index('main')
    assert machine.unwinder.get_region_start(ctx) == (index + 1) << 16
    assert machine.unwinder.get_lsda(ctx) == machine.global_pointer('__lsda.main')


def test_trace_sink_receives_every_event(module_from):
    seen = []
    machine = run_text(module_from, "fn @main() {\nentry:\n  call @__ehvm_out(1)\n  ret 0\n}\n",
                       trace_sink=seen.append)
    assert seen == machine.events


DEEP_STACK = """
fn @c() {
entry:
  %z = alloca 1
  ret 0
}

fn @b() {
entry:
  %y = alloca 1
  call @c()
  ret 0
}

fn @a() {
entry:
  %x = alloca 1
  call @b()
  ret 0
}

fn @main() {
entry:
  %w = alloca 1
  call @a()
  ret 0
}
"""


def paused_in_c(module_from):
    """A machine stopped inside @c of main -> a -> b -> c; returns it and the frames innermost first."""
    machine = Machine(module_from(DEEP_STACK))
    while not (machine.active_frame.function == 'c' and machine.active_frame.pc == 1):
        machine.step()
    frames = []
    frame = machine.active_frame
    while frame is not None:
        frames.append(frame)
        frame = machine.frames.get(frame.parent) if frame.parent is not None else None
    return machine, frames


def live_allocas(machine):
    return {obj.id for obj in machine.heap.live_objects('alloca')}


def test_unwind_to_the_same_frame_is_a_no_op(module_from):
    machine, (c, b, a, main) = paused_in_c(module_from)
    events = list(machine.events)
    census = machine.census()
    assert machine.dios_unwind(0, c.id, c.id) == 0
    assert machine.events == events
    assert machine.census() == census


def test_unwind_to_the_parent_frees_exactly_its_allocas(module_from):
    machine, (c, b, a, main) = paused_in_c(module_from)
    before = live_allocas(machine)
    assert machine.dios_unwind(0, c.id, b.id) == 1
    assert before - live_allocas(machine) == set(c.allocas)
    assert c.id not in machine.frames
    assert machine.events[-1] == 'UNWIND c b freed=1'


def test_unwinding_three_frames_updates_the_census(module_from):
    machine, (c, b, a, main) = paused_in_c(module_from)
    assert machine.census() == {'alloca': 4, 'frame': 4}
    assert machine.dios_unwind(0, c.id, main.id) == 3
    assert machine.census() == {'alloca': 1, 'frame': 1}
    assert machine.events[-1] == 'UNWIND c main freed=3'


def test_consecutive_unwinds_compose(module_from):
    stepwise, (c, b, a, main) = paused_in_c(module_from)
    freed = [stepwise.dios_unwind(0, c.id, b.id), stepwise.dios_unwind(0, b.id, a.id),
             stepwise.dios_unwind(0, a.id, main.id)]
    combined, _ = paused_in_c(module_from)
    assert sum(freed) == combined.dios_unwind(0, c.id, main.id)
    assert sorted(stepwise.frames) == sorted(combined.frames)
    assert live_allocas(stepwise) == live_allocas(combined)
    assert stepwise.census() == combined.census()


def test_unwind_to_a_non_ancestor_faults(module_from):
    machine, (c, b, a, main) = paused_in_c(module_from)
    with pytest.raises(GuestFault) as caught:
        machine.dios_unwind(0, main.id, c.id)
    assert caught.value.kind == 'trap'
    # Nothing is destroyed when the target is not reachable
    assert machine.census() == {'alloca': 4, 'frame': 4}


def test_unwind_to_a_dead_frame_faults(module_from):
    machine, (c, b, a, main) = paused_in_c(module_from)
    machine.dios_unwind(0, c.id, a.id)
    with pytest.raises(GuestFault) as caught:
        machine.dios_unwind(0, a.id, b.id)
    assert caught.value.kind == 'use-after-free'


def test_jump_can_clear_the_mask(module_from):
    machine, (c, b, a, main) = paused_in_c(module_from)
    machine.set_mask(True)
    machine.dios_jump(c.id, 1, mask_restore=False)
    assert machine.registers.interrupt_mask is False
    assert machine.events[-1] == 'MASK 0'


def test_jump_to_an_ancestor_drops_the_frames_above_it(module_from):
    machine, (c, b, a, main) = paused_in_c(module_from)
    machine.dios_jump(a.id, 2)
    assert machine.active_frame is a
    assert sorted(machine.frames) == sorted([a.id, main.id])
    assert machine.events[-1] == 'UNWIND c a freed=2'
    assert machine.run().label == 'halted(0)'


def test_jump_argument_checks(module_from):
    machine, (c, b, a, main) = paused_in_c(module_from)
    for frame_id, pc, kind in [(Pointer(1, 0), 0, 'trap'), (main.id, Pointer(1, 0), 'trap'),
                               (main.id, 99, 'trap'), (10 ** 6, 0, 'use-after-free')]:
        with pytest.raises(GuestFault) as caught:
            machine.dios_jump(frame_id, pc)
        assert caught.value.kind == kind


def test_set_mask_returns_the_previous_value(module_from):
    machine = Machine(module_from("fn @main() {\nentry:\n  ret 0\n}\n"))
    assert machine.set_mask(True) is False
    assert machine.set_mask(True) is True
    assert machine.set_mask(False) is True
    assert machine.events == ['MASK 1', 'MASK 1', 'MASK 0']


def test_guest_jump_to_a_pointer_pc_faults(module_from):
    machine = run_text(module_from, """
fn @main() {
entry:
  %f = call @__dios_frame()
  %a = alloca 1
  call @__dios_jump(%f, %a, -1)
  ret 0
}
""")
    assert machine.outcome.label == 'fault(trap)'
    assert machine.outcome.fault.location == ('main', 2)


def test_guest_unwind_of_a_pointer_faults(module_from):
    machine = run_text(module_from, """
fn @main() {
entry:
  %a = alloca 1
  %n = call @__dios_unwind(%a, 0)
  ret 0
}
""")
    assert machine.outcome.label == 'fault(trap)'


def test_return_into_an_unwound_frame_faults(module_from):
    machine = run_text(module_from, """
fn @leaf(%mid, %top) {
entry:
  %n = call @__dios_unwind(%mid, %top)
  ret 0
}

fn @mid(%top) {
entry:
  %me = call @__dios_frame()
  call @leaf(%me, %top)
  ret 0
}

fn @main() {
entry:
  %f = call @__dios_frame()
  call @mid(%f)
  ret 0
}
""")
    assert machine.outcome.label == 'fault(use-after-free)'
    assert machine.outcome.fault.location == ('leaf', 1)


def test_guest_unwind_and_jump():
    machine = run_once(load_corpus('dios_unwind_parent.ehir'), check_leaks=True)
    assert outputs_of(machine.events) == ['2', '3']
    assert 'UNWIND mid main freed=2' in machine.events
    assert 'UNWIND leaf main freed=0' in machine.events
    assert machine.outcome.label == 'halted(0)'


def test_guest_jump_restores_the_mask():
    machine = run_once(load_corpus('dios_jump_mask.ehir'), check_leaks=True)
    assert outputs_of(machine.events) == ['0']
    assert 'UNWIND escape main freed=1' in machine.events
    assert machine.outcome.label == 'halted(0)'


def test_fault_kinds_and_origins_are_closed():
    with pytest.raises(ValueError):
        GuestFault('oops')
    with pytest.raises(ValueError):
        Heap().allocate(1, 'stack')
