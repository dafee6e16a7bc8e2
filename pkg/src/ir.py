"""
EHIR: the exception-aware intermediate representation executed by the machine.

A module is a list of functions plus a typeinfo registry (the class DAG used
for catch matching) and constant-initialised globals. Functions are lists of
basic blocks; code positions are linear pc indices obtained by flattening the
blocks in declaration order.

The textual form printed by `print_module` is canonical: parsing it and
printing again yields the same text.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union


PERSONALITY_SYMBOL = '__ehvm_personality_v0'
TYPEID_INTRINSIC = 'typeid.for'
CATCH_ALL = None  # clause type of `catch any`

TERMINATORS = frozenset({'br', 'condbr', 'ret', 'invoke', 'resume', 'trap'})
OPCODES = frozenset({
    'alloca', 'load', 'store', 'add', 'sub', 'eq', 'lt', 'br', 'condbr', 'ret',
    'call', 'invoke', 'landingpad', 'resume', 'phi', 'const', 'gep', 'extract',
    'trap',
})
BINARY_OPCODES = frozenset({'add', 'sub', 'eq', 'lt'})

# Symbols implemented by the machine and its runtime rather than by guest code
RUNTIME_SYMBOLS = frozenset({
    PERSONALITY_SYMBOL,
    '__cxa_allocate_exception', '__cxa_throw', '__cxa_begin_catch', '__cxa_end_catch',
    '__cxa_rethrow',
    '_Unwind_RaiseException', '_Unwind_Resume', '_Unwind_DeleteException',
    '_Unwind_SetGR', '_Unwind_GetGR', '_Unwind_SetIP', '_Unwind_GetIP',
    '_Unwind_GetLanguageSpecificData', '_Unwind_GetRegionStart',
    '__dios_unwind', '__dios_jump', '__dios_frame', '__dios_choose', '__dios_mask',
    '__dios_spawn', '__dios_join',
    'setjmp', 'longjmp', 'malloc', 'free', '__ehvm_out', '__ehvm_assert',
})

# The context-taking unwinder calls only make sense inside a personality routine
CONTEXT_SYMBOLS = frozenset({
    '_Unwind_SetGR', '_Unwind_GetGR', '_Unwind_SetIP', '_Unwind_GetIP',
    '_Unwind_GetLanguageSpecificData', '_Unwind_GetRegionStart',
})
GUEST_CALLABLE = RUNTIME_SYMBOLS - CONTEXT_SYMBOLS - {PERSONALITY_SYMBOL}

# Argument counts of the guest-callable built-ins
BUILTIN_ARITY = {
    '__cxa_allocate_exception': 1, '__cxa_throw': 3, '__cxa_begin_catch': 1,
    '__cxa_end_catch': 0, '__cxa_rethrow': 0,
    '_Unwind_RaiseException': 1, '_Unwind_Resume': 1, '_Unwind_DeleteException': 1,
    '__dios_unwind': 2, '__dios_jump': 3, '__dios_frame': 0, '__dios_choose': 1,
    '__dios_mask': 1, '__dios_spawn': 2, '__dios_join': 1,
    'setjmp': 1, 'longjmp': 2, 'malloc': 1, 'free': 1,
    '__ehvm_out': 1, '__ehvm_assert': 1,
}


@dataclass(frozen=True)
class Local:
    """Reference to a local value (`%name`)."""
    name: str

    def __str__(self) -> str:
        return f"%{self.name}"


@dataclass(frozen=True)
class Global:
    """Reference to a module-level name (`@name`): global, function or typeinfo."""
    name: str

    def __str__(self) -> str:
        return f"@{self.name}"


Value = Union[Local, Global, int]


def format_value(value: Value) -> str:
    return str(value)


@dataclass
class Clause:
    """One landingpad clause: catch, filter or cleanup."""
    kind: str
    types: List[Optional[str]] = field(default_factory=list)

    @property
    def is_catch_all(self) -> bool:
        return self.kind == 'catch' and self.types == [CATCH_ALL]

    def __str__(self) -> str:
        if self.kind == 'cleanup':
            return 'cleanup'
        if self.kind == 'catch':
            return 'catch any' if self.is_catch_all else f"catch @{self.types[0]}"
        return 'filter [' + ', '.join(f"@{t}" for t in self.types) + ']'


@dataclass
class InstructionIR:
    """A single EHIR instruction.

    `targets` holds block labels: [dest] for br, [then, else] for condbr and
    [normal, unwind] for invoke. `incoming` is only used by phi.
    """
    opcode: str
    operands: List[Value] = field(default_factory=list)
    result: Optional[str] = None
    callee: Optional[str] = None
    targets: List[str] = field(default_factory=list)
    clauses: List[Clause] = field(default_factory=list)
    incoming: List[Tuple[Value, str]] = field(default_factory=list)
    line: int = field(default=0, compare=False, repr=False)

    @property
    def is_terminator(self) -> bool:
        return self.opcode in TERMINATORS

    @property
    def is_call_site(self) -> bool:
        return self.opcode in ('call', 'invoke')

    def __str__(self) -> str:
        return format_instruction(self)


@dataclass
class BlockIR:
    label: str
    instructions: List[InstructionIR] = field(default_factory=list)

    @property
    def terminator(self) -> Optional[InstructionIR]:
        if self.instructions and self.instructions[-1].is_terminator:
            return self.instructions[-1]
        return None


@dataclass
class FunctionIR:
    name: str
    params: List[str] = field(default_factory=list)
    blocks: List[BlockIR] = field(default_factory=list)
    personality: Optional[str] = None
    attrs: List[str] = field(default_factory=list)
    lsda_ref: Optional[str] = None
    line: int = field(default=0, compare=False, repr=False)

    @property
    def nounwind(self) -> bool:
        return 'nounwind' in self.attrs

    @property
    def entry(self) -> BlockIR:
        return self.blocks[0]

    def block(self, label: str) -> Optional[BlockIR]:
        for block in self.blocks:
            if block.label == label:
                return block
        return None

    def has_landingpad(self) -> bool:
        return any(instr.opcode == 'landingpad'
                   for block in self.blocks for instr in block.instructions)

    def layout(self) -> 'CodeLayout':
        return CodeLayout.of(self)


@dataclass
class CodeLayout:
    """Flattened view of a function: pc -> instruction, label -> first pc."""
    instructions: List[InstructionIR]
    block_of: List[str]
    label_pc: Dict[str, int]

    @classmethod
    def of(cls, function: FunctionIR) -> 'CodeLayout':
        instructions: List[InstructionIR] = []
        block_of: List[str] = []
        label_pc: Dict[str, int] = {}
        for block in function.blocks:
            label_pc[block.label] = len(instructions)
            for instr in block.instructions:
                instructions.append(instr)
                block_of.append(block.label)
        return cls(instructions, block_of, label_pc)

    def __len__(self) -> int:
        return len(self.instructions)


class TypeInfoRegistry:
    """The class DAG: each typeinfo name maps to the names of its direct bases.

    Ids are assigned densely from 1 in declaration order; id 0 is reserved for
    the null typeinfo used by catch-all clauses.
    """

    def __init__(self, entries: Optional[Dict[str, List[str]]] = None):
        self.entries: Dict[str, List[str]] = {}
        for name, bases in (entries or {}).items():
            self.add(name, bases)

    def add(self, name: str, bases: List[str]) -> None:
        self.entries[name] = list(bases)

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TypeInfoRegistry) and self.entries == other.entries

    def names(self) -> List[str]:
        return list(self.entries)

    def bases(self, name: str) -> List[str]:
        return self.entries.get(name, [])

    def id_of(self, name: Optional[str]) -> int:
        if name is None:
            return 0
        return self.names().index(name) + 1

    def name_of(self, type_id: int) -> Optional[str]:
        if type_id == 0:
            return None
        names = self.names()
        if 1 <= type_id <= len(names):
            return names[type_id - 1]
        raise KeyError(type_id)

    def find_cycle(self) -> Optional[List[str]]:
        """Return one base-edge cycle as a list of names, or None if acyclic."""
        state: Dict[str, int] = {}
        path: List[str] = []

        def visit(name: str) -> Optional[List[str]]:
            state[name] = 1
            path.append(name)
            for base in self.bases(name):
                if base not in self.entries:
                    continue
                if state.get(base) == 1:
                    return path[path.index(base):] + [base]
                if base not in state:
                    cycle = visit(base)
                    if cycle:
                        return cycle
            path.pop()
            state[name] = 2
            return None

        for name in self.entries:
            if name not in state:
                cycle = visit(name)
                if cycle:
                    return cycle
        return None

    def is_subtype(self, derived: str, base: str) -> bool:
        """Reflexive-transitive reachability along base edges."""
        seen = set()
        work = [derived]
        while work:
            current = work.pop()
            if current == base:
                return True
            if current in seen:
                continue
            seen.add(current)
            work.extend(self.bases(current))
        return False


@dataclass
class ModuleIR:
    functions: List[FunctionIR] = field(default_factory=list)
    typeinfos: TypeInfoRegistry = field(default_factory=TypeInfoRegistry)
    globals: List[Tuple[str, List[int]]] = field(default_factory=list)

    def function(self, name: str) -> Optional[FunctionIR]:
        for function in self.functions:
            if function.name == name:
                return function
        return None

    def global_names(self) -> List[str]:
        return [name for name, _ in self.globals]

    def global_value(self, name: str) -> Optional[List[int]]:
        for global_name, data in self.globals:
            if global_name == name:
                return data
        return None

    def set_global(self, name: str, data: List[int]) -> None:
        for index, (global_name, _) in enumerate(self.globals):
            if global_name == name:
                self.globals[index] = (name, list(data))
                return
        self.globals.append((name, list(data)))


# Printing

def _call_text(instr: InstructionIR) -> str:
    args = ', '.join(format_value(op) for op in instr.operands)
    return f"@{instr.callee}({args})"


def format_instruction(instr: InstructionIR) -> str:
    op = instr.opcode
    prefix = f"%{instr.result} = " if instr.result is not None else ''
    operands = ', '.join(format_value(v) for v in instr.operands)

    if op == 'br':
        body = f"br %{instr.targets[0]}"
    elif op == 'condbr':
        body = f"condbr {format_value(instr.operands[0])}, %{instr.targets[0]}, %{instr.targets[1]}"
    elif op == 'ret':
        body = f"ret {operands}" if instr.operands else 'ret'
    elif op == 'call':
        body = f"call {_call_text(instr)}"
    elif op == 'invoke':
        body = f"invoke {_call_text(instr)} to %{instr.targets[0]} unwind %{instr.targets[1]}"
    elif op == 'landingpad':
        body = 'landingpad ' + ' '.join(str(c) for c in instr.clauses)
    elif op == 'phi':
        body = 'phi ' + ', '.join(f"[{format_value(v)}, %{label}]" for v, label in instr.incoming)
    elif op == 'trap':
        body = 'trap'
    else:
        body = f"{op} {operands}" if operands else op
    return prefix + body


def format_function(function: FunctionIR) -> str:
    header = f"fn @{function.name}(" + ', '.join(f"%{p}" for p in function.params) + ')'
    for attr in function.attrs:
        header += f" {attr}"
    if function.personality:
        header += f" personality @{function.personality}"
    if function.lsda_ref:
        header += f" lsda @{function.lsda_ref}"
    lines = [header + ' {']
    for block in function.blocks:
        lines.append(f"{block.label}:")
        for instr in block.instructions:
            lines.append(f"  {format_instruction(instr)}")
    lines.append('}')
    return '\n'.join(lines)


def print_module(module: ModuleIR) -> str:
    """Render a module in canonical EHIR text."""
    chunks = []
    typeinfo_lines = []
    for name, bases in module.typeinfos.entries.items():
        line = f"typeinfo @{name}"
        if bases:
            line += ' : ' + ', '.join(f"@{b}" for b in bases)
        typeinfo_lines.append(line)
    if typeinfo_lines:
        chunks.append('\n'.join(typeinfo_lines))
    global_lines = [f"global @{name} = [" + ', '.join(str(b) for b in data) + ']'
                    for name, data in module.globals]
    if global_lines:
        chunks.append('\n'.join(global_lines))
    chunks.extend(format_function(f) for f in module.functions)
    return '\n\n'.join(chunks) + '\n'
