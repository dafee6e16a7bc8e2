"""Shared fixtures for the ehvm test-suite."""

import os
import random
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

from src.config import load_config  # noqa: E402
from src.corpus import Expectation, corpus_files, load_expectations  # noqa: E402
from src.ir import ModuleIR  # noqa: E402
from src.parser import parse_file, parse_module  # noqa: E402

CORPUS_DIR = os.path.join(ROOT, 'corpus')
GOLDEN_DIR = os.path.join(ROOT, 'tests', 'golden')

CORPUS_FILES = corpus_files(CORPUS_DIR)
EXPECTATIONS = {e.name: e for e in load_expectations(CORPUS_DIR)}

# Programs that never throw; used for the zero-overhead checks
NON_THROWING = [
    'phi_loop.ehir', 'no_throw_invoke.ehir', 'global_counter.ehir', 'longjmp_multi.ehir',
    'longjmp_invoke.ehir', 'fault_injection_three.ehir', 'threads_shared.ehir',
    'dios_unwind_parent.ehir', 'dios_jump_mask.ehir',
]

THROWER = """
fn @throw_a() {
entry:
  %e = call @__cxa_allocate_exception(1)
  call @__cxa_throw(%e, @A, 0)
  trap
}
"""


def corpus_path(name: str) -> str:
    return os.path.join(CORPUS_DIR, name)


def load_corpus(name: str) -> ModuleIR:
    return parse_file(corpus_path(name))


def read_golden(name: str) -> str:
    with open(os.path.join(GOLDEN_DIR, name), 'r') as f:
        return f.read()


def oracle_programs():
    return [name for name in CORPUS_FILES if EXPECTATIONS[name].oracle]


@pytest.fixture
def corpus_dir() -> str:
    return CORPUS_DIR


@pytest.fixture
def seed() -> int:
    return load_config(os.path.join(ROOT, 'ehvm.yaml')).seed


@pytest.fixture
def rng(seed) -> random.Random:
    return random.Random(seed)


@pytest.fixture
def module_from():
    """Parse EHIR text; `typeinfo @A` and @throw_a are available on request."""

    def build(text: str, with_thrower: bool = False) -> ModuleIR:
        if with_thrower:
            text = "typeinfo @A\n" + THROWER + text
        return parse_module(text)

    return build


@pytest.fixture
def expectation():
    def lookup(name: str) -> Expectation:
        return EXPECTATIONS[name]
    return lookup
