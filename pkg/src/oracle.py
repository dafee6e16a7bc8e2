"""
Reference interpreter with direct handler-stack semantics.

Runs the *un-lowered* module: `invoke`, `landingpad`, `resume` and
`typeid.for` are interpreted natively with Python exceptions carrying the
guest exception between activations. There is no LSDA, no personality
routine and no unwinder, so agreement with the machine is a meaningful
check of the whole lowering pipeline.

Only single-threaded programs without explicit nondeterminism are
supported; the low-level hypercalls are rejected with ExecutionError.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .errors import ExecutionError
from .ir import BINARY_OPCODES, CodeLayout, FunctionIR, Global, InstructionIR, Local, ModuleIR, TYPEID_INTRINSIC
from .memory import GuestFault, Heap, LandingPair, Pointer, format_value

logger = logging.getLogger(__name__)

_UNSUPPORTED = frozenset({
    '__dios_unwind', '__dios_jump', '__dios_frame', '__dios_choose', '__dios_spawn', '__dios_join',
    '_Unwind_RaiseException', '_Unwind_Resume', '_Unwind_DeleteException',
})


@dataclass
class OracleResult:
    outputs: List[str] = field(default_factory=list)
    outcome: str = 'halted(0)'


@dataclass
class _Exception:
    pointer: Pointer
    typeinfo: int = 0
    destructor: Optional[str] = None
    handler_count: int = 0
    rethrown: bool = False
    in_cleanup: bool = False


class _GuestThrow(Exception):
    """An exception propagating toward `handler` (an activation serial, or None)."""

    def __init__(self, exc: _Exception, handler: Optional[int]):
        super().__init__(exc.pointer)
        self.exc = exc
        self.handler = handler


class _LongJump(Exception):

    def __init__(self, target: int, pc: int, value: int):
        super().__init__(target)
        self.target = target
        self.pc = pc
        self.value = value


@dataclass
class _Activation:
    serial: int
    function: FunctionIR
    layout: CodeLayout
    locals: Dict[str, Any]
    pc: int = 0
    prev_block: Optional[str] = None
    allocas: List[Pointer] = field(default_factory=list)
    # Handler activation of the exception whose cleanup this activation runs
    handler: Optional[int] = None


def _selectors(function: FunctionIR) -> Tuple[Dict[Optional[str], int], Dict[Tuple[str, ...], int]]:
    """Selector values of a function's clause types and filter lists."""
    types: Dict[Optional[str], int] = {}
    specs: Dict[Tuple[str, ...], int] = {}
    typeids: List[str] = []
    for block in function.blocks:
        for instr in block.instructions:
            if instr.opcode == 'landingpad':
                for clause in instr.clauses:
                    if clause.kind == 'catch':
                        types.setdefault(clause.types[0], len(types) + 1)
                    elif clause.kind == 'filter':
                        specs.setdefault(tuple(clause.types), -(len(specs) + 1))
            elif instr.opcode == 'call' and instr.callee == TYPEID_INTRINSIC:
                typeids.append(instr.operands[0].name)
    for name in typeids:
        types.setdefault(name, len(types) + 1)
    return types, specs


class Oracle:

    def __init__(self, module: ModuleIR, unwind_uncaught: bool = False, max_steps: int = 100000):
        self.module = module
        self.unwind_uncaught = unwind_uncaught
        self.max_steps = max_steps
        self.steps = 0
        self.heap = Heap()
        self.outputs: List[str] = []
        self.stack: List[_Activation] = []
        self.caught: List[_Exception] = []
        self.exceptions: Dict[int, _Exception] = {}
        self.mask = False
        self._serial = 0
        self._functions = {f.name: f for f in module.functions}
        self._tokens = {f.name: (index + 1) << 16 for index, f in enumerate(module.functions)}
        self._selectors = {f.name: _selectors(f) for f in module.functions}
        self._globals = {name: self.heap.add_global(index, name, data)
                         for index, (name, data) in enumerate(module.globals)}

    def run(self) -> OracleResult:
        try:
            value = self.call('main', [])
            outcome = f"halted({value if isinstance(value, int) else 0})"
        except GuestFault as fault:
            outcome = f"fault({fault.kind})"
        except _GuestThrow:
            # Propagated past the last frame while running cleanups
            outcome = 'fault(terminate)'
        except _LongJump:
            outcome = 'fault(use-after-free)'
        return OracleResult(self.outputs, outcome)

    # Values

    def value(self, act: _Activation, operand: Any) -> Any:
        if isinstance(operand, int):
            return operand
        if isinstance(operand, Local):
            if operand.name not in act.locals:
                raise GuestFault('uninitialized', f"use of undefined %{operand.name}")
            return act.locals[operand.name]
        if isinstance(operand, Global):
            if operand.name in self._globals:
                return self._globals[operand.name]
            if operand.name in self._tokens:
                return self._tokens[operand.name]
            if operand.name in self.module.typeinfos:
                return self.module.typeinfos.id_of(operand.name)
            raise GuestFault('trap', f"@{operand.name} has no value")
        raise ExecutionError(f"cannot evaluate {operand!r}")

    # Handler search

    def _matches(self, thrown: int, clause_type: Optional[str]) -> bool:
        if clause_type is None:
            return True
        registry = self.module.typeinfos
        return registry.is_subtype(registry.name_of(thrown), clause_type)

    def _landing(self, act: _Activation, exc: _Exception) -> Tuple[Optional[int], bool]:
        """(selector of the handling clause or None, whether a cleanup clause exists)."""
        instr = act.layout.instructions[act.pc]
        if instr.opcode != 'invoke':
            return None, False
        pad = act.function.block(instr.targets[1]).instructions[0]
        types, specs = self._selectors[act.function.name]
        has_cleanup = False
        for clause in pad.clauses:
            if clause.kind == 'catch':
                if self._matches(exc.typeinfo, clause.types[0]):
                    return types[clause.types[0]], has_cleanup
            elif clause.kind == 'filter':
                if not any(self._matches(exc.typeinfo, name) for name in clause.types):
                    return specs[tuple(clause.types)], has_cleanup
            else:
                has_cleanup = True
        return None, has_cleanup

    def _raise(self, exc: _Exception) -> None:
        if any(other.in_cleanup for other in self.exceptions.values()):
            raise GuestFault('terminate', "exception thrown while a cleanup is running")
        handler = None
        for act in reversed(self.stack):
            if act.function.personality is not None and self._landing(act, exc)[0] is not None:
                handler = act.serial
                break
            if act.function.nounwind:
                raise GuestFault('nounwind-violation', f"exception leaves @{act.function.name}")
        if handler is None and not self.unwind_uncaught:
            raise GuestFault('terminate', "uncaught exception")
        raise _GuestThrow(exc, handler)

    # Calls

    def call(self, name: str, args: List[Any]) -> Any:
        function = self._functions[name]
        if len(args) != len(function.params):
            raise GuestFault('trap', f"@{name} expects {len(function.params)} argument(s)")
        self._serial += 1
        act = _Activation(self._serial, function, function.layout(), dict(zip(function.params, args)))
        self.stack.append(act)
        try:
            return self._execute(act)
        finally:
            self.stack.pop()
            for pointer in act.allocas:
                self.heap.kill(pointer.obj)

    def _complete(self, act: _Activation, instr: InstructionIR, value: Any) -> None:
        if instr.result is not None:
            act.locals[instr.result] = value
        if instr.opcode == 'invoke':
            self._branch(act, instr.targets[0])
        else:
            act.pc += 1

    def _branch(self, act: _Activation, label: str) -> None:
        act.prev_block = act.layout.block_of[act.pc]
        act.pc = act.layout.label_pc[label]

    def _call_site(self, act: _Activation, instr: InstructionIR) -> None:
        args = [self.value(act, operand) for operand in instr.operands]
        try:
            if instr.callee in self._functions:
                result = self.call(instr.callee, args)
            else:
                result = self._builtin(act, instr.callee, args)
        except _GuestThrow as thrown:
            self._deliver(act, instr, thrown)
            return
        except _LongJump as jump:
            if jump.target != act.serial:
                raise
            act.pc = jump.pc
            self._complete(act, act.layout.instructions[jump.pc], jump.value)
            return
        self._complete(act, instr, result)

    def _deliver(self, act: _Activation, instr: InstructionIR, thrown: _GuestThrow) -> None:
        exc = thrown.exc
        if instr.opcode != 'invoke' or act.function.personality is None:
            raise thrown
        selector, has_cleanup = self._landing(act, exc)
        if act.serial == thrown.handler:
            exc.in_cleanup = False
        elif has_cleanup:
            selector = 0
            exc.in_cleanup = True
        else:
            raise thrown
        act.locals[act.function.block(instr.targets[1]).instructions[0].result] = \
            LandingPair(exc.pointer, selector)
        act.handler = thrown.handler
        self._branch(act, instr.targets[1])

    # Instructions

    def _execute(self, act: _Activation) -> Any:
        while True:
            self.steps += 1
            if self.steps > self.max_steps:
                raise GuestFault('trap', f"step limit of {self.max_steps} exceeded")
            if not 0 <= act.pc < len(act.layout):
                raise GuestFault('trap', f"pc {act.pc} outside @{act.function.name}")
            instr = act.layout.instructions[act.pc]
            op = instr.opcode
            ev = lambda operand: self.value(act, operand)

            if op == 'ret':
                return ev(instr.operands[0]) if instr.operands else 0
            if instr.is_call_site:
                if instr.callee == TYPEID_INTRINSIC:
                    types, _ = self._selectors[act.function.name]
                    self._complete(act, instr, types[instr.operands[0].name])
                else:
                    self._call_site(act, instr)
                continue
            if op == 'br':
                self._branch(act, instr.targets[0])
                continue
            if op == 'condbr':
                condition = ev(instr.operands[0])
                truthy = condition != 0 if isinstance(condition, int) else condition is not None
                self._branch(act, instr.targets[0] if truthy else instr.targets[1])
                continue
            if op == 'resume':
                pair = ev(instr.operands[0])
                if not isinstance(pair, LandingPair):
                    raise GuestFault('trap', "resume of a non-landingpad value")
                exc = self.exceptions.get(pair.exception.obj) if isinstance(pair.exception, Pointer) else None
                if exc is None or not exc.in_cleanup:
                    raise GuestFault('terminate', "resume without an active cleanup")
                exc.in_cleanup = False
                raise _GuestThrow(exc, act.handler)
            if op == 'trap':
                raise GuestFault('trap', "trap instruction")

            if op == 'alloca':
                pointer = self.heap.allocate(instr.operands[0], 'alloca')
                act.allocas.append(pointer)
                result = pointer
            elif op == 'load':
                result = self.heap.load(ev(instr.operands[0]))
            elif op == 'store':
                self.heap.store(ev(instr.operands[1]), ev(instr.operands[0]))
                result = None
            elif op in BINARY_OPCODES:
                result = self._binary(op, ev(instr.operands[0]), ev(instr.operands[1]))
            elif op == 'const':
                result = ev(instr.operands[0])
            elif op == 'gep':
                base, delta = ev(instr.operands[0]), ev(instr.operands[1])
                if not isinstance(base, Pointer) or not isinstance(delta, int):
                    raise GuestFault('bounds', f"gep on {format_value(base)}")
                result = base + delta
            elif op == 'extract':
                pair = ev(instr.operands[0])
                if not isinstance(pair, LandingPair):
                    raise GuestFault('trap', "extract from non-landingpad value")
                result = pair.exception if instr.operands[1] == 0 else pair.selector
            elif op == 'phi':
                for operand, label in instr.incoming:
                    if label == act.prev_block:
                        result = ev(operand)
                        break
                else:
                    raise GuestFault('trap', f"phi has no value for predecessor {act.prev_block}")
            elif op == 'landingpad':
                if instr.result not in act.locals:
                    raise GuestFault('trap', "landingpad reached without an exception")
                result = act.locals[instr.result]
            else:
                raise GuestFault('trap', f"unknown opcode {op}")
            if instr.result is not None and result is not None:
                act.locals[instr.result] = result
            act.pc += 1

    @staticmethod
    def _binary(op: str, a: Any, b: Any) -> Any:
        if op == 'eq':
            return int(a == b)
        if isinstance(a, int) and isinstance(b, int):
            return {'add': a + b, 'sub': a - b, 'lt': int(a < b)}[op]
        if isinstance(a, Pointer) and isinstance(b, int) and op in ('add', 'sub'):
            return a + (b if op == 'add' else -b)
        if isinstance(a, int) and isinstance(b, Pointer) and op == 'add':
            return b + a
        if isinstance(a, Pointer) and isinstance(b, Pointer) and a.obj == b.obj and op in ('sub', 'lt'):
            return a.offset - b.offset if op == 'sub' else int(a.offset < b.offset)
        raise GuestFault('trap', f"invalid operands for {op}: {format_value(a)}, {format_value(b)}")

    # Runtime

    def _exception(self, pointer: Any) -> _Exception:
        self.heap.object_of(pointer, 'exception access')
        exc = self.exceptions.get(pointer.obj)
        if exc is None:
            raise GuestFault('trap', f"{format_value(pointer)} is not a C++ exception")
        return exc

    def _function_of_token(self, token: Any) -> str:
        for name, value in self._tokens.items():
            if value == token:
                return name
        raise GuestFault('trap', f"invalid destructor {format_value(token)}")

    def _delete(self, exc: _Exception) -> None:
        if exc.in_cleanup:
            raise GuestFault('terminate', "deleting an exception that is still being unwound")
        if exc.destructor is not None:
            params = self._functions[exc.destructor].params
            self.call(exc.destructor, [exc.pointer] if params else [])
        self.heap.free(exc.pointer, origin='exception')
        del self.exceptions[exc.pointer.obj]

    def _builtin(self, act: _Activation, name: str, args: List[Any]) -> Any:
        if name in _UNSUPPORTED:
            raise ExecutionError(f"@{name} is not supported by the reference interpreter")
        if name == '__ehvm_out':
            self.outputs.append(format_value(args[0]))
            return 0
        if name == '__ehvm_assert':
            if args[0] == 0 or args[0] is None:
                raise GuestFault('trap', "assertion failed")
            return 0
        if name == '__dios_mask':
            previous, self.mask = self.mask, bool(args[0])
            return int(previous)
        if name == 'malloc':
            return self.heap.allocate(args[0], 'user')
        if name == 'free':
            if args[0] != 0:
                self.heap.free(args[0], origin='user')
            return 0
        if name == 'setjmp':
            self.heap.store(args[0], act.serial)
            self.heap.store(args[0] + 1, act.pc)
            return 0
        if name == 'longjmp':
            target = self.heap.load(args[0])
            if target not in {live.serial for live in self.stack}:
                raise GuestFault('use-after-free', "longjmp to a frame that has returned")
            raise _LongJump(target, self.heap.load(args[0] + 1), args[1] if args[1] != 0 else 1)
        if name == '__cxa_allocate_exception':
            pointer = self.heap.allocate(args[0], 'exception')
            self.exceptions[pointer.obj] = _Exception(pointer)
            return pointer
        if name == '__cxa_throw':
            exc = self._exception(args[0])
            if not isinstance(args[1], int) or not 1 <= args[1] <= len(self.module.typeinfos):
                raise GuestFault('trap', f"__cxa_throw with invalid typeinfo {format_value(args[1])}")
            exc.typeinfo = args[1]
            exc.destructor = self._function_of_token(args[2]) if args[2] != 0 else None
            exc.rethrown = False
            self._raise(exc)
        if name == '__cxa_begin_catch':
            exc = self._exception(args[0])
            exc.handler_count += 1
            exc.rethrown = False
            if not self.caught or self.caught[-1] is not exc:
                self.caught.append(exc)
            return args[0]
        if name == '__cxa_end_catch':
            if not self.caught:
                raise GuestFault('terminate', "__cxa_end_catch with no caught exception")
            exc = self.caught[-1]
            exc.handler_count -= 1
            if exc.handler_count == 0:
                self.caught.pop()
                if not exc.rethrown:
                    self._delete(exc)
            return 0
        if name == '__cxa_rethrow':
            if not self.caught:
                raise GuestFault('terminate', "__cxa_rethrow with no caught exception")
            exc = self.caught[-1]
            exc.rethrown = True
            self._raise(exc)
        raise GuestFault('trap', f"call to unknown function @{name}")


def interpret(module: ModuleIR, unwind_uncaught: bool = False, max_steps: int = 100000) -> OracleResult:
    """Run an un-lowered module on the reference interpreter."""
    result = Oracle(module, unwind_uncaught, max_steps).run()
    logger.debug("oracle: %s after %d output(s)", result.outcome, len(result.outputs))
    return result
