"""
Checks the bundled EHIR corpus against its expectations file.

`corpus/expectations.yaml` maps each program to the multiset of outcomes its
exploration must produce, optionally the outputs of the default execution,
and whether the reference interpreter applies to it.
"""

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import yaml

from .errors import ConfigError
from .explorer import explore, outputs_of, run_once
from .ir import ModuleIR
from .machine import ChoiceSource
from .oracle import interpret
from .parser import parse_file
from .validator import validate

logger = logging.getLogger(__name__)

EXPECTATIONS_FILE = 'expectations.yaml'


@dataclass
class Expectation:
    name: str
    outcomes: Dict[str, int] = field(default_factory=dict)
    outputs: Optional[List[str]] = None
    oracle: bool = True
    fault_injection: bool = False
    description: str = ''


@dataclass
class CorpusResult:
    name: str
    executions: int = 0
    outcomes: Counter = field(default_factory=Counter)
    problems: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def load_expectations(directory: str) -> List[Expectation]:
    path = os.path.join(directory, EXPECTATIONS_FILE)
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read {path}: {e}")
    expectations = []
    for name, entry in (data.get('programs') or {}).items():
        entry = entry or {}
        outputs = entry.get('outputs')
        expectations.append(Expectation(
            name=name,
            outcomes={str(label): int(count) for label, count in (entry.get('outcomes') or {}).items()},
            outputs=[str(v) for v in outputs] if outputs is not None else None,
            oracle=bool(entry.get('oracle', True)),
            fault_injection=bool(entry.get('fault_injection', False)),
            description=entry.get('description', ''),
        ))
    return expectations


def compare_with_oracle(module: ModuleIR) -> List[str]:
    """Differences between the machine and the reference interpreter, both uncaught policies."""
    problems = []
    for reverse in (False, True):
        machine = run_once(module, ChoiceSource(reverse=reverse))
        reference = interpret(module, unwind_uncaught=reverse)
        got = (outputs_of(machine.events), machine.outcome.label)
        want = (reference.outputs, reference.outcome)
        if got != want:
            policy = 'unwind' if reverse else 'no-unwind'
            problems.append(f"oracle mismatch ({policy}): machine {got}, oracle {want}")
    return problems


def check_program(directory: str, expectation: Expectation, max_executions: int = 10000) -> CorpusResult:
    result = CorpusResult(expectation.name)
    module = parse_file(os.path.join(directory, expectation.name))
    diagnostics = validate(module)
    if diagnostics:
        result.problems.extend(str(d) for d in diagnostics)
        return result

    report = explore(module, fault_injection=expectation.fault_injection, max_executions=max_executions)
    result.executions = report.executions
    result.outcomes = report.outcomes
    if dict(report.outcomes) != expectation.outcomes:
        result.problems.append(f"outcomes {dict(report.outcomes)}, expected {expectation.outcomes}")
    if expectation.outputs is not None:
        machine = run_once(module, ChoiceSource(), fault_injection=expectation.fault_injection)
        outputs = outputs_of(machine.events)
        if outputs != expectation.outputs:
            result.problems.append(f"outputs {outputs}, expected {expectation.outputs}")
    if expectation.oracle:
        result.problems.extend(compare_with_oracle(module))
    logger.debug("%s: %d execution(s), %s", expectation.name, result.executions,
                 'ok' if result.ok else '; '.join(result.problems))
    return result


def check_corpus(directory: str, max_executions: int = 10000) -> List[CorpusResult]:
    return [check_program(directory, expectation, max_executions)
            for expectation in load_expectations(directory)]


def corpus_files(directory: str) -> List[str]:
    return sorted(name for name in os.listdir(directory) if name.endswith('.ehir'))

