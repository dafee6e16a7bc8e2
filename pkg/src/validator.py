"""
Structural validation of EHIR modules.

`validate` accepts exactly the modules the machine can run without running
into a structural surprise; everything else is reported as a Diagnostic.
"""

from dataclasses import dataclass
from typing import List, Optional, Set

from .ir import (
    BINARY_OPCODES, BUILTIN_ARITY, GUEST_CALLABLE, PERSONALITY_SYMBOL, RUNTIME_SYMBOLS, TYPEID_INTRINSIC,
    FunctionIR, Global, InstructionIR, Local, ModuleIR, Value,
)


@dataclass
class Diagnostic:
    """One validation problem with its location."""
    message: str
    function: Optional[str] = None
    block: Optional[str] = None
    pc: Optional[int] = None

    def __str__(self) -> str:
        where = []
        if self.function is not None:
            where.append(f"@{self.function}")
        if self.block is not None:
            where.append(self.block)
        if self.pc is not None:
            where.append(f"pc {self.pc}")
        return (':'.join(where) + ': ' if where else '') + self.message


# Fixed operand counts; None means "checked separately"
_ARITY = {
    'alloca': 1, 'load': 1, 'store': 2, 'const': 1, 'gep': 2, 'extract': 2,
    'condbr': 1, 'br': 0, 'landingpad': 0, 'resume': 1, 'phi': 0, 'trap': 0,
}
for _op in BINARY_OPCODES:
    _ARITY[_op] = 2

# Opcodes that must (or must not) define a result
_NEEDS_RESULT = {'alloca', 'load', 'const', 'gep', 'extract', 'landingpad', 'phi'} | set(BINARY_OPCODES)
_NO_RESULT = {'store', 'br', 'condbr', 'ret', 'resume', 'trap'}


class _Validator:

    def __init__(self, module: ModuleIR):
        self.module = module
        self.diagnostics: List[Diagnostic] = []
        self.functions = {f.name for f in module.functions}
        self.globals = set(module.global_names())

    def report(self, message: str, function: Optional[FunctionIR] = None,
               block: Optional[str] = None, pc: Optional[int] = None) -> None:
        self.diagnostics.append(Diagnostic(message, function.name if function else None, block, pc))

    def run(self) -> List[Diagnostic]:
        self.check_names()
        self.check_typeinfos()
        for function in self.module.functions:
            self.check_function(function)
        return self.diagnostics

    def check_names(self) -> None:
        seen: Set[str] = set()
        names = ([f.name for f in self.module.functions] + self.module.global_names()
                 + self.module.typeinfos.names())
        for name in names:
            if name in seen:
                self.report(f"duplicate definition of @{name}")
            seen.add(name)
        main = self.module.function('main')
        if main is None:
            self.report("module has no @main")
        elif main.params:
            self.report("@main must not take parameters", main)

    def check_typeinfos(self) -> None:
        registry = self.module.typeinfos
        for name in registry.names():
            for base in registry.bases(name):
                if base not in registry:
                    self.report(f"typeinfo @{name} names unknown base @{base}")
        cycle = registry.find_cycle()
        if cycle:
            self.report("typeinfo cycle: " + ' -> '.join(f"@{n}" for n in cycle))

    def check_value(self, value: Value, function: FunctionIR, block: str, pc: int) -> None:
        if isinstance(value, Global):
            name = value.name
            if not (name in self.functions or name in self.globals
                    or name in self.module.typeinfos or name in RUNTIME_SYMBOLS):
                self.report(f"unresolved reference @{name}", function, block, pc)

    def check_function(self, function: FunctionIR) -> None:
        if not function.blocks:
            self.report("function has no blocks", function)
            return
        if len(set(function.params)) != len(function.params):
            self.report("duplicate parameter", function)
        labels = [b.label for b in function.blocks]
        if len(set(labels)) != len(labels):
            self.report("duplicate block label", function)
        label_set = set(labels)

        if function.personality is not None and function.personality != PERSONALITY_SYMBOL:
            self.report(f"unknown personality @{function.personality}", function)
        if function.lsda_ref is not None and function.lsda_ref not in self.globals:
            self.report(f"lsda reference @{function.lsda_ref} is not a global", function)

        layout = function.layout()
        unwind_targets: Set[str] = set()
        branch_targets: Set[str] = set()
        landingpad_results: Set[str] = set()
        for instr in layout.instructions:
            if instr.opcode == 'invoke' and len(instr.targets) == 2:
                unwind_targets.add(instr.targets[1])
                branch_targets.add(instr.targets[0])
            elif instr.opcode in ('br', 'condbr'):
                branch_targets.update(instr.targets)
            if instr.opcode == 'landingpad' and instr.result is not None:
                landingpad_results.add(instr.result)

        if function.entry.label in unwind_targets:
            self.report("entry block cannot be a landing pad", function, function.entry.label, 0)
        for label in sorted(unwind_targets & branch_targets):
            self.report(f"block {label} is both a landing pad and a branch target", function, label)

        for block in function.blocks:
            start = layout.label_pc[block.label]
            if not block.instructions:
                self.report("empty block", function, block.label, start)
                continue
            last = block.instructions[-1]
            if not last.is_terminator:
                self.report("block does not end with a terminator", function, block.label,
                            start + len(block.instructions) - 1)
            for offset, instr in enumerate(block.instructions):
                pc = start + offset
                if instr.is_terminator and offset != len(block.instructions) - 1:
                    self.report(f"terminator {instr.opcode} in the middle of a block",
                                function, block.label, pc)
                if instr.opcode == 'landingpad' and (offset != 0 or block.label not in unwind_targets):
                    self.report("misplaced landingpad", function, block.label, pc)
                self.check_instruction(instr, function, block.label, pc, label_set, landingpad_results)
            if block.label in unwind_targets and block.instructions[0].opcode != 'landingpad':
                self.report("unwind target does not start with a landingpad", function, block.label, start)

        if function.has_landingpad() and function.personality is None:
            self.report("function with a landingpad has no personality", function)

    def check_instruction(self, instr: InstructionIR, function: FunctionIR, block: str, pc: int,
                          labels: Set[str], landingpad_results: Set[str]) -> None:
        op = instr.opcode
        expected = _ARITY.get(op)
        if expected is not None and len(instr.operands) != expected:
            self.report(f"{op} takes {expected} operand(s), got {len(instr.operands)}", function, block, pc)
            return
        if op == 'ret' and len(instr.operands) > 1:
            self.report("ret takes at most one operand", function, block, pc)
        if op in _NEEDS_RESULT and instr.result is None:
            self.report(f"{op} must define a result", function, block, pc)
        if op in _NO_RESULT and instr.result is not None:
            self.report(f"{op} does not produce a value", function, block, pc)

        for value in instr.operands:
            self.check_value(value, function, block, pc)

        if op == 'alloca' and not (isinstance(instr.operands[0], int) and instr.operands[0] >= 1):
            self.report("alloca size must be a positive integer", function, block, pc)
        if op == 'extract' and instr.operands[1] not in (0, 1):
            self.report("extract index must be 0 or 1", function, block, pc)

        wanted_targets = {'br': 1, 'condbr': 2, 'invoke': 2}.get(op, 0)
        if len(instr.targets) != wanted_targets:
            self.report(f"{op} needs {wanted_targets} target label(s)", function, block, pc)
        for label in instr.targets:
            if label not in labels:
                self.report(f"unknown block label {label}", function, block, pc)

        if instr.is_call_site:
            self.check_call(instr, function, block, pc)
        elif op == 'landingpad':
            self.check_clauses(instr, function, block, pc)
        elif op == 'resume':
            operand = instr.operands[0]
            if not (isinstance(operand, Local) and operand.name in landingpad_results):
                self.report("resume operand is not a landingpad result", function, block, pc)
        elif op == 'phi':
            if not instr.incoming:
                self.report("phi without incoming values", function, block, pc)
            for value, label in instr.incoming:
                self.check_value(value, function, block, pc)
                if label not in labels:
                    self.report(f"unknown block label {label}", function, block, pc)

    def check_call(self, instr: InstructionIR, function: FunctionIR, block: str, pc: int) -> None:
        callee = instr.callee
        if callee == TYPEID_INTRINSIC:
            if instr.opcode != 'call' or len(instr.operands) != 1 or not isinstance(instr.operands[0], Global):
                self.report("typeid.for takes exactly one typeinfo operand", function, block, pc)
            elif instr.operands[0].name not in self.module.typeinfos:
                self.report(f"typeid.for of unknown typeinfo @{instr.operands[0].name}", function, block, pc)
            return
        target = self.module.function(callee) if callee else None
        if target is not None:
            if len(instr.operands) != len(target.params):
                self.report(f"@{callee} expects {len(target.params)} argument(s), got {len(instr.operands)}",
                            function, block, pc)
        elif callee not in GUEST_CALLABLE:
            self.report(f"call target @{callee} does not resolve to a callable function", function, block, pc)
        elif len(instr.operands) != BUILTIN_ARITY[callee]:
            self.report(f"@{callee} expects {BUILTIN_ARITY[callee]} argument(s), got {len(instr.operands)}",
                        function, block, pc)

    def check_clauses(self, instr: InstructionIR, function: FunctionIR, block: str, pc: int) -> None:
        cleanups = 0
        for clause in instr.clauses:
            if clause.kind == 'cleanup':
                cleanups += 1
                if clause.types:
                    self.report("cleanup clause takes no types", function, block, pc)
            elif clause.kind == 'catch':
                if len(clause.types) != 1:
                    self.report("catch clause names exactly one type", function, block, pc)
            elif clause.kind != 'filter':
                self.report(f"unknown clause kind {clause.kind}", function, block, pc)
            for name in clause.types:
                if name is not None and name not in self.module.typeinfos:
                    self.report(f"unknown typeinfo @{name} in clause", function, block, pc)
        if cleanups > 1:
            self.report("more than one cleanup clause", function, block, pc)
        if not instr.clauses:
            self.report("landingpad without clauses", function, block, pc)


def validate(module: ModuleIR) -> List[Diagnostic]:
    """Check every structural invariant; an empty list means the module is runnable."""
    return _Validator(module).run()
