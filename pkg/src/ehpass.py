"""
Exception-handling lowering pass.

For every function that contains a landingpad the pass:

  - computes the function's selector assignment,
  - encodes its LSDA into a `global @__lsda.<fn>` and links it with `lsda`,
  - rewrites `resume %lp` into a branch to an appended block that extracts
    the exception pointer and calls `@_Unwind_Resume`.

`call @typeid.for(@T)` is replaced by `const <selector>` in every function.
The rewrites keep existing pcs in place (new blocks are appended after the
last block), so code that never throws executes the same instruction
sequence before and after the pass.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import PassError
from .ir import (
    TYPEID_INTRINSIC, BlockIR, Clause, FunctionIR, Global, InstructionIR, Local, ModuleIR,
)
from .lsda import ActionEntry, CallSiteRecord, LsdaTable, encode

logger = logging.getLogger(__name__)

LSDA_PREFIX = '__lsda.'
RESUME_SYMBOL = '_Unwind_Resume'


def lsda_global_name(function_name: str) -> str:
    return f"{LSDA_PREFIX}{function_name}"


@dataclass
class SelectorAssignment:
    """Per-function selector values.

    `types` maps a catch type (None for catch-all) to its positive selector,
    in first-appearance order over the function's catch clauses, followed by
    types only named by typeid.for. `specs` maps a filter's type list to its
    negative selector.
    """
    types: Dict[Optional[str], int] = field(default_factory=dict)
    specs: Dict[Tuple[str, ...], int] = field(default_factory=dict)

    def add_type(self, name: Optional[str]) -> int:
        if name not in self.types:
            self.types[name] = len(self.types) + 1
        return self.types[name]

    def add_spec(self, names: List[str]) -> int:
        key = tuple(names)
        if key not in self.specs:
            self.specs[key] = -(len(self.specs) + 1)
        return self.specs[key]

    def selector_for(self, clause: Clause) -> int:
        """Action filter for a clause: positive for catch, negative for filter, 0 for cleanup."""
        if clause.kind == 'catch':
            return self.types[clause.types[0]]
        if clause.kind == 'filter':
            return self.specs[tuple(clause.types)]
        return 0

    def type_order(self) -> List[Optional[str]]:
        return sorted(self.types, key=self.types.__getitem__)

    def spec_order(self) -> List[Tuple[str, ...]]:
        return sorted(self.specs, key=lambda key: -self.specs[key])


def assign_selectors(function: FunctionIR) -> SelectorAssignment:
    selectors = SelectorAssignment()
    instructions = function.layout().instructions
    for instr in instructions:
        if instr.opcode != 'landingpad':
            continue
        for clause in instr.clauses:
            if clause.kind == 'catch':
                selectors.add_type(clause.types[0])
            elif clause.kind == 'filter':
                selectors.add_spec(clause.types)
    for instr in instructions:
        if _is_typeid(instr) and instr.operands and isinstance(instr.operands[0], Global):
            selectors.add_type(instr.operands[0].name)
    return selectors


def _is_typeid(instr: InstructionIR) -> bool:
    return instr.opcode == 'call' and instr.callee == TYPEID_INTRINSIC


def _action_chains(function: FunctionIR, selectors: SelectorAssignment
                   ) -> Tuple[List[ActionEntry], Dict[str, int]]:
    """One chain per landing pad; returns the action entries and label -> callsite action."""
    actions: List[ActionEntry] = []
    by_label: Dict[str, int] = {}
    for block in function.blocks:
        if not block.instructions or block.instructions[0].opcode != 'landingpad':
            continue
        clauses = block.instructions[0].clauses
        if all(clause.kind == 'cleanup' for clause in clauses):
            by_label[block.label] = 0
            continue
        by_label[block.label] = len(actions) + 1
        for position, clause in enumerate(clauses):
            last = position == len(clauses) - 1
            actions.append(ActionEntry(selectors.selector_for(clause), 0 if last else 1))
    return actions, by_label


def _callsites(function: FunctionIR, by_label: Dict[str, int]) -> List[CallSiteRecord]:
    layout = function.layout()
    records = []
    for pc, instr in enumerate(layout.instructions):
        if instr.opcode == 'invoke':
            unwind_label = instr.targets[1]
            records.append(CallSiteRecord(pc, 1, layout.label_pc[unwind_label], by_label[unwind_label]))
        elif instr.is_call_site and not _is_typeid(instr):
            records.append(CallSiteRecord(pc, 1, 0, 0))
    return records


def callsite_map(function: FunctionIR) -> List[CallSiteRecord]:
    """Call-site records of a function in pc order, one per call or invoke."""
    _, by_label = _action_chains(function, assign_selectors(function))
    return _callsites(function, by_label)


def build_table(function: FunctionIR, module: ModuleIR,
                selectors: Optional[SelectorAssignment] = None) -> LsdaTable:
    selectors = selectors or assign_selectors(function)
    registry = module.typeinfos
    actions, by_label = _action_chains(function, selectors)
    try:
        types = [registry.id_of(name) for name in selectors.type_order()]
        specs = [[registry.id_of(name) for name in spec] for spec in selectors.spec_order()]
    except ValueError as e:
        raise PassError(f"@{function.name}: unknown typeinfo ({e})")
    return LsdaTable(_callsites(function, by_label), actions, types, specs)


def _fresh_label(function: FunctionIR, base: str) -> str:
    taken = {block.label for block in function.blocks}
    index = 0
    while f"{base}.{index}" in taken:
        index += 1
    return f"{base}.{index}"


def _rewrite_typeids(function: FunctionIR, module: ModuleIR, selectors: SelectorAssignment) -> int:
    count = 0
    for block in function.blocks:
        for position, instr in enumerate(block.instructions):
            if not _is_typeid(instr):
                continue
            operand = instr.operands[0] if instr.operands else None
            if not isinstance(operand, Global) or operand.name not in module.typeinfos:
                raise PassError(f"@{function.name}: typeid.for names unknown type {operand}")
            block.instructions[position] = InstructionIR(
                opcode='const', operands=[selectors.types[operand.name]], result=instr.result, line=instr.line)
            count += 1
    return count


def _lower_resumes(function: FunctionIR) -> int:
    count = 0
    for block in list(function.blocks):
        terminator = block.terminator
        if terminator is None or terminator.opcode != 'resume':
            continue
        label = _fresh_label(function, 'resume')
        pair = terminator.operands[0]
        exception = f"{label}.exc"
        block.instructions[-1] = InstructionIR(opcode='br', targets=[label], line=terminator.line)
        function.blocks.append(BlockIR(label, [
            InstructionIR(opcode='extract', operands=[pair, 0], result=exception),
            InstructionIR(opcode='call', callee=RESUME_SYMBOL, operands=[Local(exception)]),
            InstructionIR(opcode='trap'),
        ]))
        count += 1
    return count


def lower_function(function: FunctionIR, module: ModuleIR) -> None:
    """Lower one function of `module` in place."""
    # Already lowered: a second application must not change anything
    if function.lsda_ref is not None:
        return
    selectors = assign_selectors(function)
    typeids = _rewrite_typeids(function, module, selectors)
    if not function.has_landingpad():
        if typeids:
            logger.debug("@%s: %d typeid.for rewritten", function.name, typeids)
        return

    resumes = _lower_resumes(function)
    table = build_table(function, module, selectors)
    name = lsda_global_name(function.name)
    module.set_global(name, list(encode(table)))
    function.lsda_ref = name
    logger.debug("@%s: %d callsites, %d actions, %d types, %d resumes lowered",
                 function.name, len(table.callsites), len(table.actions), len(table.types), resumes)


def run_pass(module: ModuleIR) -> ModuleIR:
    """Return a lowered copy of the module; the input is left unchanged."""
    lowered = copy.deepcopy(module)
    for function in lowered.functions:
        lower_function(function, lowered)
    return lowered


def selector_map(module: ModuleIR) -> Dict[str, SelectorAssignment]:
    """Selector assignment of every function, computed on the un-lowered module."""
    return {function.name: assign_selectors(function) for function in module.functions}
