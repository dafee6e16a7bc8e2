"""
The abstract machine that executes EHIR.

Activation frames form singly-linked lists (one per thread) and live in the
same tracked object space as heap objects. The machine exposes the
hypercalls the unwinder and language runtime are built from: nondeterministic
choice, stack unwinding (`dios_unwind`), non-local jumps (`dios_jump`) and the
interrupt mask. Every executed instruction and every runtime decision is
appended to an event log, one line per event.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

from .cxxrt import CxxRuntime
from .errors import ExecutionError, TraceMismatchError
from .ir import (
    BINARY_OPCODES, BUILTIN_ARITY, PERSONALITY_SYMBOL, TYPEID_INTRINSIC,
    CodeLayout, FunctionIR, Global, InstructionIR, Local, ModuleIR, Value,
)
from .memory import FaultReport, GuestFault, Heap, LandingPair, Pointer, census, format_value
from .unwind import Unwinder, header_of

logger = logging.getLogger(__name__)

# `@fn` evaluates to (index + 1) << REGION_SHIFT, its region start token
REGION_SHIFT = 16


class _Transferred:
    """Returned by a built-in that moved control somewhere else."""

    def __repr__(self) -> str:
        return 'TRANSFERRED'


TRANSFERRED = _Transferred()


@dataclass(frozen=True)
class Decision:
    """One resolved choice point: sequence number, number of branches, branch taken."""
    id: int
    arity: int
    taken: int


class ChoiceSource:
    """Supplies the values of nondeterministic choices.

    Choices covered by `prefix` replay the recorded branch; later choices
    take branch 0 (or the last branch when `reverse`). In `strict` mode a
    choice beyond the prefix is a mismatch.
    """

    def __init__(self, prefix: Sequence[Decision] = (), reverse: bool = False, strict: bool = False):
        self.prefix = list(prefix)
        self.reverse = reverse
        self.strict = strict
        self.decisions: List[Decision] = []

    def choose(self, arity: int) -> int:
        index = len(self.decisions)
        if index < len(self.prefix):
            recorded = self.prefix[index]
            if recorded.arity != arity:
                raise TraceMismatchError(
                    f"recorded arity {recorded.arity} but the program offers {arity} branches", index)
            if not 0 <= recorded.taken < arity:
                raise TraceMismatchError(f"branch {recorded.taken} out of range", index)
            taken = recorded.taken
        elif self.strict:
            raise TraceMismatchError("the program makes more choices than the trace records", index)
        else:
            taken = arity - 1 if self.reverse else 0
        self.decisions.append(Decision(index, arity, taken))
        return taken

    @property
    def exhausted(self) -> bool:
        return len(self.decisions) >= len(self.prefix)


@dataclass
class Frame:
    id: int
    parent: Optional[int]
    function: str
    pc: int = 0
    locals: Dict[str, Any] = field(default_factory=dict)
    allocas: List[int] = field(default_factory=list)
    prev_block: Optional[str] = None
    thread: int = 0
    # Host continuation run instead of completing the caller's call
    return_action: Optional[Callable[['Frame', Any], None]] = None


@dataclass
class Thread:
    tid: int
    root: int
    top: Optional[int]
    state: str = 'runnable'
    join_target: Optional[int] = None
    result: Any = None
    # Object id of the most recently caught exception (caught-exception stack)
    caught_top: Optional[int] = None


@dataclass
class ControlRegisters:
    active_frame: Optional[int] = None
    interrupt_mask: bool = False
    fault_injection: bool = False
    error: Optional[FaultReport] = None


@dataclass
class StepOutcome:
    kind: str
    exit_code: Optional[int] = None
    fault: Optional[FaultReport] = None
    decisions: List[Decision] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return self.kind in ('halted', 'fault')

    @property
    def label(self) -> str:
        if self.kind == 'halted':
            return f"halted({self.exit_code})"
        if self.kind == 'fault':
            return f"fault({self.fault.kind})"
        return self.kind


def _truthy(value: Any) -> bool:
    if isinstance(value, int):
        return value != 0
    return value is not None


class Machine:
    """Executes one module from @main until it halts or faults."""

    def __init__(self, module: ModuleIR, choices: Optional[ChoiceSource] = None,
                 max_steps: int = 100000, check_leaks: bool = False, fault_injection: bool = False,
                 trace_sink: Optional[Callable[[str], None]] = None):
        self.module = module
        self.choices = choices or ChoiceSource()
        self.max_steps = max_steps
        self.check_leaks = check_leaks
        self.trace_sink = trace_sink

        self.events: List[str] = []
        self.heap = Heap()
        self.registers = ControlRegisters(fault_injection=fault_injection)
        self.frames: Dict[int, Frame] = {}
        self.threads: List[Thread] = []
        self.current = 0
        self.steps = 0
        self.outcome: Optional[StepOutcome] = None
        self._decided = False
        self._location = (None, None)

        self._functions: Dict[str, FunctionIR] = {f.name: f for f in module.functions}
        self._layouts: Dict[str, CodeLayout] = {f.name: f.layout() for f in module.functions}
        self._tokens: Dict[str, int] = {
            f.name: (index + 1) << REGION_SHIFT for index, f in enumerate(module.functions)}
        self._token_names: Dict[int, str] = {token: name for name, token in self._tokens.items()}
        self._globals: Dict[str, Pointer] = {}
        for index, (name, data) in enumerate(module.globals):
            self._globals[name] = self.heap.add_global(index, name, data)

        self.unwinder = Unwinder(self)
        self.cxx = CxxRuntime(self)
        self.unwinder.register_personality(PERSONALITY_SYMBOL, self.cxx.personality)
        self.builtins: Dict[str, Callable[[Frame, List[Any]], Any]] = {
            '__cxa_allocate_exception': self._builtin_allocate_exception,
            '__cxa_throw': self._builtin_throw,
            '__cxa_begin_catch': self._builtin_begin_catch,
            '__cxa_end_catch': self._builtin_end_catch,
            '__cxa_rethrow': self._builtin_rethrow,
            '_Unwind_RaiseException': self._builtin_raise,
            '_Unwind_Resume': self._builtin_resume,
            '_Unwind_DeleteException': self._builtin_delete,
            '__dios_unwind': self._builtin_dios_unwind,
            '__dios_jump': self._builtin_dios_jump,
            '__dios_frame': self._builtin_dios_frame,
            '__dios_choose': self._builtin_choose,
            '__dios_mask': self._builtin_mask,
            '__dios_spawn': self._builtin_spawn,
            '__dios_join': self._builtin_join,
            'setjmp': self._builtin_setjmp,
            'longjmp': self._builtin_longjmp,
            'malloc': self._builtin_malloc,
            'free': self._builtin_free,
            '__ehvm_out': self._builtin_out,
            '__ehvm_assert': self._builtin_assert,
        }

        if 'main' not in self._functions:
            raise ExecutionError("module has no @main")
        root = self._new_frame('main', [], parent=None, thread=0)
        self.threads.append(Thread(0, root.id, root.id))
        self.registers.active_frame = root.id

    # Lookup helpers

    def function(self, name: str) -> FunctionIR:
        return self._functions[name]

    def layout(self, name: str) -> CodeLayout:
        return self._layouts[name]

    def region_start(self, name: str) -> int:
        return self._tokens[name]

    def function_of_token(self, token: Any) -> Optional[str]:
        return self._token_names.get(token) if isinstance(token, int) else None

    def global_pointer(self, name: str) -> Pointer:
        return self._globals[name]

    @property
    def current_thread(self) -> Thread:
        return self.threads[self.current]

    @property
    def active_frame(self) -> Frame:
        top = self.current_thread.top
        if top is None:
            raise ExecutionError(f"thread {self.current} has no active frame")
        return self.frames[top]

    def census(self):
        return census(self.heap, len(self.frames))

    def emit(self, event: str) -> None:
        self.events.append(event)
        if self.trace_sink is not None:
            self.trace_sink(event)

    # Frames and threads

    def _new_frame(self, function: str, args: List[Any], parent: Optional[Frame], thread: int,
                   return_action=None) -> Frame:
        params = self._functions[function].params
        if len(args) != len(params):
            raise GuestFault('trap', f"@{function} expects {len(params)} argument(s), got {len(args)}")
        frame = Frame(self.heap.fresh_id(), parent.id if parent else None, function,
                      locals=dict(zip(params, args)), thread=thread, return_action=return_action)
        self.frames[frame.id] = frame
        return frame

    def _set_top(self, thread: Thread, frame_id: Optional[int]) -> None:
        thread.top = frame_id
        if thread.tid == self.current:
            self.registers.active_frame = frame_id

    def _switch(self, tid: int) -> None:
        self.current = tid
        self.registers.active_frame = self.threads[tid].top

    def push_frame(self, function: str, args: List[Any], parent: Frame, return_action=None) -> Frame:
        """Call a guest function from `parent` (whose pc stays on the call)."""
        frame = self._new_frame(function, args, parent, parent.thread, return_action)
        self._set_top(self.threads[parent.thread], frame.id)
        return frame

    def _destroy_frame(self, frame: Frame) -> int:
        for oid in frame.allocas:
            self.heap.kill(oid)
        del self.frames[frame.id]
        return len(frame.allocas)

    def _runnable(self) -> List[Thread]:
        return [t for t in self.threads if t.state == 'runnable']

    def _reschedule(self) -> None:
        runnable = self._runnable()
        if not runnable:
            raise GuestFault('trap', "deadlock: no runnable thread")
        self._decided = False
        self._switch(runnable[0].tid)

    def spawn_thread(self, entry: str, args: List[Any]) -> int:
        if entry not in self._functions:
            raise GuestFault('trap', f"cannot spawn unknown function @{entry}")
        tid = len(self.threads)
        root = self._new_frame(entry, args, parent=None, thread=tid)
        self.threads.append(Thread(tid, root.id, root.id))
        self.emit(f"SPAWN {tid} {entry}")
        return tid

    def _is_visible(self, frame: Frame, instr: InstructionIR) -> bool:
        """Loads and stores of shared (global or malloc'd) memory are scheduling points."""
        if instr.opcode == 'load':
            operand = instr.operands[0]
        elif instr.opcode == 'store':
            operand = instr.operands[1]
        else:
            return False
        try:
            pointer = self.evaluate(frame, operand)
        except GuestFault:
            return False
        if not isinstance(pointer, Pointer):
            return False
        obj = self.heap.objects.get(pointer.obj)
        return obj is not None and obj.origin in ('global', 'user')

    def schedule(self) -> Optional[int]:
        """Offer a choice over runnable threads if the current one is at a visible instruction."""
        if self._decided or self.registers.interrupt_mask:
            return None
        runnable = self._runnable()
        if len(runnable) < 2:
            return None
        frame = self.active_frame
        if not self._is_visible(frame, self._layouts[frame.function].instructions[frame.pc]):
            return None
        chosen = runnable[self.hypercall_choose(len(runnable))].tid
        # The chosen thread runs up to and including its next visible instruction
        self._decided = True
        self._switch(chosen)
        return chosen

    # Hypercalls

    def hypercall_choose(self, n: int) -> int:
        if not isinstance(n, int) or n < 1:
            raise GuestFault('trap', f"choice over {format_value(n)} branches")
        if n == 1:
            return 0
        taken = self.choices.choose(n)
        self.emit(f"CHOICE {n} {taken}")
        return taken

    def set_mask(self, value: bool) -> bool:
        previous = self.registers.interrupt_mask
        self.registers.interrupt_mask = bool(value)
        self.emit(f"MASK {int(bool(value))}")
        return previous

    def dios_unwind(self, thread: int, from_frame: Optional[int], to_frame: Optional[int]) -> int:
        """Destroy the frames from `from_frame` up to (not including) `to_frame`.

        Returns the number of alloca objects freed.
        """
        if to_frame is not None and to_frame not in self.frames:
            raise GuestFault('use-after-free', f"unwind target frame {to_frame} is dead")
        chain: List[Frame] = []
        current = from_frame
        while current != to_frame:
            if current is None:
                raise GuestFault('trap', f"frame {to_frame} is not an ancestor of frame {from_frame}")
            frame = self.frames.get(current)
            if frame is None or frame.thread != thread:
                raise GuestFault('use-after-free', f"frame {current} is not live on thread {thread}")
            chain.append(frame)
            current = frame.parent
        freed = sum(self._destroy_frame(frame) for frame in chain)
        if chain:
            target = self.frames[to_frame].function if to_frame is not None else '-'
            self.emit(f"UNWIND {chain[0].function} {target} freed={freed}")
        return freed

    def _drop_unreachable(self, thread: Thread, target: Frame) -> None:
        """Destroy the frames a jump to `target` leaves unreachable on `thread`."""
        keep = set()
        current: Optional[int] = target.id
        while current is not None and current in self.frames:
            keep.add(current)
            current = self.frames[current].parent
        dropped: List[Frame] = []
        current = thread.top
        while current is not None and current not in keep and current in self.frames:
            dropped.append(self.frames[current])
            current = self.frames[current].parent
        if dropped:
            freed = sum(self._destroy_frame(frame) for frame in dropped)
            self.emit(f"UNWIND {dropped[0].function} {target.function} freed={freed}")

    def dios_jump(self, frame_id: int, pc: int, mask_restore: Optional[bool] = None) -> None:
        """Make `frame` the active frame of its thread at `pc`.

        Frames above `frame` that the jump leaves behind are destroyed.
        """
        if not isinstance(frame_id, int) or not isinstance(pc, int):
            raise GuestFault('trap', f"jump to {format_value(frame_id)}:{format_value(pc)} needs integer frame and pc")
        frame = self.frames.get(frame_id)
        if frame is None:
            raise GuestFault('use-after-free', f"jump to dead frame {frame_id}")
        if not 0 <= pc < len(self._layouts[frame.function]):
            raise GuestFault('trap', f"jump to invalid pc {pc} in @{frame.function}")
        thread = self.threads[frame.thread]
        self._drop_unreachable(thread, frame)
        frame.pc = pc
        self._set_top(thread, frame.id)
        if frame.thread != self.current:
            self._switch(frame.thread)
        if mask_restore is not None:
            self.set_mask(mask_restore)

    # Execution

    def evaluate(self, frame: Frame, value: Value) -> Any:
        if isinstance(value, int):
            return value
        if isinstance(value, Local):
            if value.name not in frame.locals:
                raise GuestFault('uninitialized', f"use of undefined %{value.name}")
            return frame.locals[value.name]
        if isinstance(value, Global):
            name = value.name
            if name in self._globals:
                return self._globals[name]
            if name in self._tokens:
                return self._tokens[name]
            if name in self.module.typeinfos:
                return self.module.typeinfos.id_of(name)
            raise GuestFault('trap', f"@{name} has no value")
        raise ExecutionError(f"cannot evaluate {value!r}")

    def step(self) -> StepOutcome:
        """Execute exactly one instruction of the active frame."""
        if self.outcome is not None:
            raise ExecutionError("the machine has already stopped")
        before = len(self.choices.decisions)
        try:
            outcome = self._step()
        except GuestFault as fault:
            outcome = self._fault(fault.kind, fault.message)
        outcome.decisions = self.choices.decisions[before:]
        if outcome.kind == 'continue' and outcome.decisions:
            outcome.kind = 'choice'
        return outcome

    def run(self) -> StepOutcome:
        while True:
            outcome = self.step()
            if outcome.terminal:
                return outcome

    def _fault(self, kind: str, message: str) -> StepOutcome:
        function, pc = self._location
        report = FaultReport(kind, function, pc, message)
        self.registers.error = report
        self.emit(f"FAULT {kind} {function if function is not None else '-'} {pc if pc is not None else '-'}")
        logger.debug("%s", report)
        self.outcome = StepOutcome('fault', fault=report)
        return self.outcome

    def _halt(self, value: Any) -> None:
        code = value if isinstance(value, int) else 0
        if self.check_leaks:
            leaked = {origin: count for origin, count in census(self.heap).items()
                      if origin in ('alloca', 'exception', 'user')}
            if leaked:
                summary = ', '.join(f"{count} {origin}" for origin, count in sorted(leaked.items()))
                raise GuestFault('leak', f"live objects at exit: {summary}")
        self.emit(f"HALT {code}")
        self.outcome = StepOutcome('halted', exit_code=code)

    def _step(self) -> StepOutcome:
        self.steps += 1
        if self.steps > self.max_steps:
            raise GuestFault('trap', f"step limit of {self.max_steps} exceeded")
        self.schedule()
        frame = self.active_frame
        layout = self._layouts[frame.function]
        self._location = (frame.function, frame.pc)
        if not 0 <= frame.pc < len(layout):
            raise GuestFault('trap', f"pc {frame.pc} outside @{frame.function}")
        instr = layout.instructions[frame.pc]
        self.emit(f"STEP {frame.function} {frame.pc} {instr.opcode}")
        visible = self._is_visible(frame, instr)
        self._execute(frame, instr, layout)
        if visible:
            self._decided = False
        return self.outcome or StepOutcome('continue')

    def _set_result(self, frame: Frame, instr: InstructionIR, value: Any) -> None:
        if instr.result is not None:
            frame.locals[instr.result] = value

    def _branch(self, frame: Frame, label: str) -> None:
        layout = self._layouts[frame.function]
        frame.prev_block = layout.block_of[frame.pc]
        frame.pc = layout.label_pc[label]

    def complete_call(self, frame: Frame, value: Any) -> None:
        """Deliver a call's result to the frame suspended on it and move past the call."""
        instr = self._layouts[frame.function].instructions[frame.pc]
        self._set_result(frame, instr, value)
        if instr.opcode == 'invoke':
            self._branch(frame, instr.targets[0])
        else:
            frame.pc += 1

    def _execute(self, frame: Frame, instr: InstructionIR, layout: CodeLayout) -> None:
        op = instr.opcode
        ev = lambda v: self.evaluate(frame, v)

        if op == 'alloca':
            pointer = self.heap.allocate(instr.operands[0], 'alloca')
            frame.allocas.append(pointer.obj)
            self._set_result(frame, instr, pointer)
        elif op == 'load':
            self._set_result(frame, instr, self.heap.load(ev(instr.operands[0])))
        elif op == 'store':
            self.heap.store(ev(instr.operands[1]), ev(instr.operands[0]))
        elif op in BINARY_OPCODES:
            self._set_result(frame, instr, self._binary(op, ev(instr.operands[0]), ev(instr.operands[1])))
        elif op == 'const':
            self._set_result(frame, instr, ev(instr.operands[0]))
        elif op == 'gep':
            base, delta = ev(instr.operands[0]), ev(instr.operands[1])
            if not isinstance(base, Pointer) or not isinstance(delta, int):
                raise GuestFault('bounds', f"gep on {format_value(base)}")
            self._set_result(frame, instr, base + delta)
        elif op == 'extract':
            pair = ev(instr.operands[0])
            if not isinstance(pair, LandingPair):
                raise GuestFault('trap', f"extract from non-landingpad value {format_value(pair)}")
            self._set_result(frame, instr, pair.exception if instr.operands[1] == 0 else pair.selector)
        elif op == 'br':
            self._branch(frame, instr.targets[0])
            return
        elif op == 'condbr':
            taken = instr.targets[0] if _truthy(ev(instr.operands[0])) else instr.targets[1]
            self._branch(frame, taken)
            return
        elif op == 'phi':
            for value, label in instr.incoming:
                if label == frame.prev_block:
                    self._set_result(frame, instr, ev(value))
                    break
            else:
                raise GuestFault('trap', f"phi has no value for predecessor {frame.prev_block}")
        elif op == 'ret':
            self._return(frame, ev(instr.operands[0]) if instr.operands else 0)
            return
        elif instr.is_call_site:
            self._call(frame, instr)
            return
        elif op == 'landingpad':
            if instr.result not in frame.locals:
                raise GuestFault('trap', "landingpad reached without an exception")
        elif op == 'resume':
            raise GuestFault('trap', "resume must be lowered by the exception-handling pass")
        elif op == 'trap':
            raise GuestFault('trap', "trap instruction")
        else:
            raise GuestFault('trap', f"unknown opcode {op}")
        frame.pc += 1

    @staticmethod
    def _binary(op: str, a: Any, b: Any) -> Any:
        if op == 'eq':
            return int(a == b)
        if isinstance(a, int) and isinstance(b, int):
            if op == 'add':
                return a + b
            if op == 'sub':
                return a - b
            return int(a < b)
        if op == 'add' and isinstance(a, Pointer) and isinstance(b, int):
            return a + b
        if op == 'add' and isinstance(a, int) and isinstance(b, Pointer):
            return b + a
        if op == 'sub' and isinstance(a, Pointer) and isinstance(b, int):
            return a + (-b)
        if isinstance(a, Pointer) and isinstance(b, Pointer) and a.obj == b.obj:
            if op == 'sub':
                return a.offset - b.offset
            if op == 'lt':
                return int(a.offset < b.offset)
        raise GuestFault('trap', f"invalid operands for {op}: {format_value(a)}, {format_value(b)}")

    def _call(self, frame: Frame, instr: InstructionIR) -> None:
        callee = instr.callee
        if callee == TYPEID_INTRINSIC:
            raise GuestFault('trap', "typeid.for must be lowered by the exception-handling pass")
        args = [self.evaluate(frame, value) for value in instr.operands]
        if callee in self._functions:
            self.push_frame(callee, args, frame)
            return
        builtin = self.builtins.get(callee)
        if builtin is None:
            raise GuestFault('trap', f"call to unknown function @{callee}")
        if len(args) != BUILTIN_ARITY[callee]:
            raise GuestFault('trap', f"@{callee} expects {BUILTIN_ARITY[callee]} argument(s), got {len(args)}")
        result = builtin(frame, args)
        if result is not TRANSFERRED:
            self.complete_call(frame, result)

    def _return(self, frame: Frame, value: Any) -> None:
        if frame.parent is not None and frame.parent not in self.frames:
            raise GuestFault('use-after-free', f"return to frame {frame.parent}, which has been unwound")
        self._destroy_frame(frame)
        thread = self.threads[frame.thread]
        if frame.parent is None:
            self._finish_thread(thread, value)
            return
        self._set_top(thread, frame.parent)
        parent = self.frames[frame.parent]
        if frame.return_action is not None:
            frame.return_action(parent, value)
        else:
            self.complete_call(parent, value)

    def _finish_thread(self, thread: Thread, value: Any) -> None:
        thread.state = 'finished'
        thread.result = value
        self._set_top(thread, None)
        for other in self.threads:
            if other.state == 'blocked' and other.join_target == thread.tid:
                other.state = 'runnable'
                other.join_target = None
        if thread.tid == 0:
            self._halt(value)
            return
        if thread.tid == self.current:
            self._reschedule()

    # Built-in functions: (calling frame, evaluated args) -> result or TRANSFERRED

    def _builtin_allocate_exception(self, frame: Frame, args: List[Any]) -> Any:
        return self.cxx.allocate_exception(args[0])

    def _builtin_throw(self, frame: Frame, args: List[Any]) -> Any:
        self.cxx.throw(frame, args[0], args[1], args[2])
        return TRANSFERRED

    def _builtin_begin_catch(self, frame: Frame, args: List[Any]) -> Any:
        return self.cxx.begin_catch(args[0])

    def _builtin_end_catch(self, frame: Frame, args: List[Any]) -> Any:
        return TRANSFERRED if self.cxx.end_catch(frame) else 0

    def _builtin_rethrow(self, frame: Frame, args: List[Any]) -> Any:
        self.cxx.rethrow(frame)
        return TRANSFERRED

    def _builtin_raise(self, frame: Frame, args: List[Any]) -> Any:
        reason = self.unwinder.raise_exception(header_of(self, args[0]), frame)
        return TRANSFERRED if reason is None else int(reason)

    def _builtin_resume(self, frame: Frame, args: List[Any]) -> Any:
        reason = self.unwinder.resume(header_of(self, args[0]), frame)
        if reason is None:
            return TRANSFERRED
        raise GuestFault('terminate', f"exception escaped after the last cleanup ({reason.name})")

    def _builtin_delete(self, frame: Frame, args: List[Any]) -> Any:
        return TRANSFERRED if self.unwinder.delete_exception(header_of(self, args[0]), frame) else 0

    def _builtin_dios_unwind(self, frame: Frame, args: List[Any]) -> Any:
        if not all(isinstance(arg, int) for arg in args):
            raise GuestFault('trap', "__dios_unwind needs integer frame handles")
        from_frame = args[0] or None
        to_frame = args[1] or None
        current = from_frame
        while current is not None and current != to_frame:
            if current == frame.id:
                raise GuestFault('trap', "__dios_unwind cannot remove the calling frame")
            live = self.frames.get(current)
            current = live.parent if live is not None else None
        owner = self.frames.get(from_frame) if from_frame is not None else None
        return self.dios_unwind(owner.thread if owner else frame.thread, from_frame, to_frame)

    def _builtin_dios_jump(self, frame: Frame, args: List[Any]) -> Any:
        mask = args[2]
        self.dios_jump(args[0], args[1], None if not isinstance(mask, int) or mask < 0 else bool(mask))
        return TRANSFERRED

    def _builtin_dios_frame(self, frame: Frame, args: List[Any]) -> Any:
        return frame.id

    def _builtin_choose(self, frame: Frame, args: List[Any]) -> Any:
        return self.hypercall_choose(args[0])

    def _builtin_mask(self, frame: Frame, args: List[Any]) -> Any:
        return int(self.set_mask(_truthy(args[0])))

    def _builtin_spawn(self, frame: Frame, args: List[Any]) -> Any:
        entry = self.function_of_token(args[0])
        if entry is None:
            raise GuestFault('trap', f"__dios_spawn of non-function {format_value(args[0])}")
        params = self._functions[entry].params
        return self.spawn_thread(entry, [args[1]] if len(params) == 1 else [])

    def _builtin_join(self, frame: Frame, args: List[Any]) -> Any:
        tid = args[0]
        if not isinstance(tid, int) or not 0 <= tid < len(self.threads) or tid == self.current:
            raise GuestFault('trap', f"cannot join thread {format_value(tid)}")
        target = self.threads[tid]
        if target.state == 'finished':
            return target.result
        # Blocked threads retry the join when woken
        thread = self.current_thread
        thread.state = 'blocked'
        thread.join_target = tid
        self._reschedule()
        return TRANSFERRED

    def _builtin_setjmp(self, frame: Frame, args: List[Any]) -> Any:
        env = args[0]
        self.heap.store(env, frame.id)
        self.heap.store(env + 1, frame.pc)
        return 0

    def _builtin_longjmp(self, frame: Frame, args: List[Any]) -> Any:
        env, value = args
        target_id = self.heap.load(env)
        pc = self.heap.load(env + 1)
        target = self.frames.get(target_id)
        if target is None:
            raise GuestFault('use-after-free', f"longjmp to frame {target_id}, which has returned")
        ancestor = frame
        while ancestor is not None and ancestor.id != target.id:
            ancestor = self.frames.get(ancestor.parent) if ancestor.parent is not None else None
        if ancestor is None:
            raise GuestFault('use-after-free', f"longjmp to frame {target_id}, which is not on this stack")
        layout = self._layouts[target.function]
        if not isinstance(pc, int) or not 0 <= pc < len(layout) or \
                layout.instructions[pc].callee != 'setjmp':
            raise GuestFault('trap', "longjmp through a corrupted jump buffer")
        result = value if value != 0 else 1
        self.dios_unwind(frame.thread, frame.id, target.id)
        target.pc = pc
        self.complete_call(target, result)
        self.dios_jump(target.id, target.pc)
        logger.debug("longjmp to @%s:%d with %s", target.function, pc, result)
        return TRANSFERRED

    def _builtin_malloc(self, frame: Frame, args: List[Any]) -> Any:
        size = args[0]
        if not isinstance(size, int):
            raise GuestFault('trap', f"malloc of non-integer size {format_value(size)}")
        if self.registers.fault_injection and self.hypercall_choose(2) == 1:
            return 0
        return self.heap.allocate(size, 'user')

    def _builtin_free(self, frame: Frame, args: List[Any]) -> Any:
        if args[0] == 0:
            return 0
        self.heap.free(args[0], origin='user')
        return 0

    def _builtin_out(self, frame: Frame, args: List[Any]) -> Any:
        self.emit(f"OUT {format_value(args[0])}")
        return 0

    def _builtin_assert(self, frame: Frame, args: List[Any]) -> Any:
        if not _truthy(args[0]):
            raise GuestFault('trap', "assertion failed")
        return 0
