"""
Exhaustive exploration of a module's nondeterministic choices.

The explorer is stateless: every execution starts from a fresh machine and
replays a prefix of recorded decisions, after which new choice points take
their first branch. The next prefix bumps the deepest decision that still
has an untried branch, so the executions are enumerated depth-first.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, List, Optional

from .ehpass import run_pass
from .errors import ParseError, TraceMismatchError
from .ir import ModuleIR
from .machine import ChoiceSource, Decision, Machine
from .memory import FaultReport

logger = logging.getLogger(__name__)


@dataclass
class ChoiceTrace:
    decisions: List[Decision] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.decisions)

    def to_text(self) -> str:
        return ''.join(f"CHOICE {d.id} {d.arity} {d.taken}\n" for d in self.decisions)

    @classmethod
    def from_text(cls, text: str) -> 'ChoiceTrace':
        decisions = []
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split()
            if len(parts) != 4 or parts[0] != 'CHOICE':
                raise ParseError(f"expected 'CHOICE <id> <arity> <taken>', found {line!r}", number, 1)
            try:
                choice_id, arity, taken = (int(part) for part in parts[1:])
            except ValueError:
                raise ParseError(f"non-integer field in {line!r}", number, 1)
            if choice_id != len(decisions):
                raise ParseError(f"choice ids must count up from 0, found {choice_id}", number, 1)
            decisions.append(Decision(choice_id, arity, taken))
        return cls(decisions)


@dataclass
class ExecutionLog:
    trace: ChoiceTrace
    outcome: str
    events: List[str] = field(default_factory=list)


@dataclass
class Counterexample:
    trace: ChoiceTrace
    events: List[str]
    fault: FaultReport


@dataclass
class ExplorationReport:
    executions: int = 0
    outcomes: Counter = field(default_factory=Counter)
    counterexample: Optional[Counterexample] = None
    bound_exhausted: bool = False
    logs: List[ExecutionLog] = field(default_factory=list)

    @property
    def faulted(self) -> bool:
        return self.counterexample is not None

    @property
    def exit_code(self) -> int:
        if self.faulted:
            return 1
        if self.bound_exhausted:
            return 2
        return 0


def outputs_of(events: List[str]) -> List[str]:
    """The values written by `__ehvm_out`, in order."""
    return [event[4:] for event in events if event.startswith('OUT ')]


def _next_prefix(decisions: List[Decision], reverse: bool) -> Optional[List[Decision]]:
    for index in range(len(decisions) - 1, -1, -1):
        decision = decisions[index]
        if reverse and decision.taken > 0:
            return decisions[:index] + [Decision(index, decision.arity, decision.taken - 1)]
        if not reverse and decision.taken < decision.arity - 1:
            return decisions[:index] + [Decision(index, decision.arity, decision.taken + 1)]
    return None


def explore(module: ModuleIR, fault_injection: bool = False, max_executions: int = 10000,
            reverse: bool = False, max_steps: int = 100000, check_leaks: bool = False,
            keep_logs: bool = False,
            on_execution: Optional[Callable[[ExecutionLog], None]] = None) -> ExplorationReport:
    """Run every execution of `module` (lowered first) up to `max_executions`."""
    lowered = run_pass(module)
    report = ExplorationReport()
    prefix: Optional[List[Decision]] = []
    while prefix is not None:
        if report.executions >= max_executions:
            report.bound_exhausted = True
            logger.info("exploration bound of %d executions reached", max_executions)
            break
        machine = Machine(lowered, ChoiceSource(prefix, reverse=reverse), max_steps=max_steps,
                          check_leaks=check_leaks, fault_injection=fault_injection)
        outcome = machine.run()
        decisions = list(machine.choices.decisions)
        report.executions += 1
        report.outcomes[outcome.label] += 1

        log = ExecutionLog(ChoiceTrace(decisions), outcome.label, machine.events)
        if keep_logs:
            report.logs.append(log)
        if on_execution is not None:
            on_execution(log)
        if outcome.kind == 'fault' and report.counterexample is None:
            report.counterexample = Counterexample(ChoiceTrace(decisions), list(machine.events), outcome.fault)
        logger.debug("execution %d: %s after %d choice(s)", report.executions, outcome.label, len(decisions))
        prefix = _next_prefix(decisions, reverse)
    return report


def run_once(module: ModuleIR, choices: Optional[ChoiceSource] = None, **options) -> Machine:
    """Lower `module` and run a single execution; returns the stopped machine."""
    machine = Machine(run_pass(module), choices, **options)
    machine.run()
    return machine


def replay(module: ModuleIR, trace: ChoiceTrace, fault_injection: bool = False,
           max_steps: int = 100000, check_leaks: bool = False) -> List[str]:
    """Re-run the execution `trace` describes and return its event log."""
    choices = ChoiceSource(trace.decisions, strict=True)
    machine = run_once(module, choices, max_steps=max_steps, check_leaks=check_leaks,
                       fault_injection=fault_injection)
    if not choices.exhausted:
        raise TraceMismatchError(
            f"the trace records {len(trace)} choices but the program made {len(choices.decisions)}",
            len(choices.decisions))
    return machine.events

