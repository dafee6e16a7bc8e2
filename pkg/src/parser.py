"""
Parser for EHIR source text.

Whitespace (including newlines) is insignificant; `;` starts a comment that
runs to the end of the line. References are resolved once the whole module
has been read, so functions, globals and typeinfos may be used before they
are declared.
"""

import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Set, Tuple

from .errors import DuplicateDefinitionError, FileAccessError, ParseError, UnresolvedReferenceError
from .ir import (
    BINARY_OPCODES, CATCH_ALL, RUNTIME_SYMBOLS, TYPEID_INTRINSIC,
    BlockIR, Clause, FunctionIR, Global, InstructionIR, Local, ModuleIR, Value,
)


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>;[^\n]*)
  | (?P<global>@[A-Za-z_.$][\w.$]*)
  | (?P<local>%[A-Za-z_.$0-9][\w.$]*)
  | (?P<int>-?[0-9]+)
  | (?P<ident>[A-Za-z_.$][\w.$]*)
  | (?P<punct>[(){}\[\],:=])
""", re.VERBOSE)


@dataclass
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(text: str) -> List[Token]:
    tokens = []
    pos = 0
    line = 1
    line_start = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if not match:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = match.lastgroup
        lexeme = match.group()
        if kind not in ('ws', 'comment'):
            tokens.append(Token(kind, lexeme, line, pos - line_start + 1))
        newlines = lexeme.count('\n')
        if newlines:
            line += newlines
            line_start = pos + lexeme.rindex('\n') + 1
        pos = match.end()
    tokens.append(Token('eof', '', line, pos - line_start + 1))
    return tokens


class _Parser:
    """Recursive-descent parser over the token list."""

    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0
        self.module = ModuleIR()
        # Names referenced with '@' and where, checked after parsing
        self.references: List[Tuple[str, str, Token]] = []
        self.defined: Dict[str, Token] = {}

    # Token helpers

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def advance(self) -> Token:
        token = self.current
        self.pos += 1
        return token

    def error(self, message: str, token: Optional[Token] = None) -> ParseError:
        token = token or self.current
        return ParseError(message, token.line, token.column)

    def expect(self, kind: str, text: Optional[str] = None) -> Token:
        token = self.current
        if token.kind != kind or (text is not None and token.text != text):
            wanted = text if text is not None else kind
            found = token.text or 'end of input'
            raise self.error(f"expected {wanted}, found {found!r}")
        return self.advance()

    def accept(self, kind: str, text: Optional[str] = None) -> Optional[Token]:
        token = self.current
        if token.kind == kind and (text is None or token.text == text):
            return self.advance()
        return None

    def at_keyword(self, word: str) -> bool:
        return self.current.kind == 'ident' and self.current.text == word

    # Top level

    def define(self, name: str, token: Token) -> None:
        if name in self.defined:
            first = self.defined[name]
            raise DuplicateDefinitionError(
                f"duplicate definition of @{name} (first defined at {first.line}:{first.column})",
                token.line, token.column)
        self.defined[name] = token

    def global_name(self, kind: str) -> Tuple[str, Token]:
        token = self.expect('global')
        name = token.text[1:]
        self.references.append((name, kind, token))
        return name, token

    def parse_module(self) -> ModuleIR:
        while self.current.kind != 'eof':
            if self.at_keyword('typeinfo'):
                self.parse_typeinfo()
            elif self.at_keyword('global'):
                self.parse_global()
            elif self.at_keyword('fn'):
                self.parse_function()
            else:
                raise self.error(f"expected 'typeinfo', 'global' or 'fn', found {self.current.text!r}")
        self.resolve()
        return self.module

    def parse_typeinfo(self) -> None:
        self.advance()
        token = self.expect('global')
        name = token.text[1:]
        self.define(name, token)
        bases = []
        if self.accept('punct', ':'):
            bases.append(self.global_name('typeinfo')[0])
            while self.accept('punct', ','):
                bases.append(self.global_name('typeinfo')[0])
        self.module.typeinfos.add(name, bases)

    def parse_global(self) -> None:
        self.advance()
        token = self.expect('global')
        name = token.text[1:]
        self.define(name, token)
        self.expect('punct', '=')
        self.expect('punct', '[')
        data: List[int] = []
        if not self.accept('punct', ']'):
            data.append(int(self.expect('int').text))
            while self.accept('punct', ','):
                data.append(int(self.expect('int').text))
            self.expect('punct', ']')
        self.module.globals.append((name, data))

    def parse_function(self) -> None:
        fn_token = self.advance()
        token = self.expect('global')
        name = token.text[1:]
        self.define(name, token)
        function = FunctionIR(name=name, line=fn_token.line)

        self.expect('punct', '(')
        if not self.accept('punct', ')'):
            function.params.append(self.expect('local').text[1:])
            while self.accept('punct', ','):
                function.params.append(self.expect('local').text[1:])
            self.expect('punct', ')')
        if len(set(function.params)) != len(function.params):
            raise DuplicateDefinitionError(f"duplicate parameter in @{name}", token.line, token.column)

        while not (self.current.kind == 'punct' and self.current.text == '{'):
            if self.at_keyword('nounwind'):
                self.advance()
                if 'nounwind' not in function.attrs:
                    function.attrs.append('nounwind')
            elif self.at_keyword('personality'):
                self.advance()
                function.personality = self.global_name('personality')[0]
            elif self.at_keyword('lsda'):
                self.advance()
                function.lsda_ref = self.global_name('global')[0]
            else:
                raise self.error(f"unexpected {self.current.text!r} in function header")
        self.expect('punct', '{')

        labels: Set[str] = set()
        block: Optional[BlockIR] = None
        while not self.accept('punct', '}'):
            if self.current.kind == 'eof':
                raise self.error(f"unterminated function @{name}")
            if self.current.kind == 'ident' and self.peek().kind == 'punct' and self.peek().text == ':':
                label_token = self.advance()
                self.advance()
                if label_token.text in labels:
                    raise DuplicateDefinitionError(
                        f"duplicate block label {label_token.text} in @{name}",
                        label_token.line, label_token.column)
                labels.add(label_token.text)
                block = BlockIR(label_token.text)
                function.blocks.append(block)
                continue
            if block is None:
                raise self.error(f"instruction before the first block label in @{name}")
            block.instructions.append(self.parse_instruction())

        if not function.blocks:
            raise self.error(f"function @{name} has no blocks")
        self.module.functions.append(function)

    # Instructions

    def value(self) -> Value:
        token = self.current
        if token.kind == 'local':
            self.advance()
            return Local(token.text[1:])
        if token.kind == 'global':
            self.advance()
            self.references.append((token.text[1:], 'value', token))
            return Global(token.text[1:])
        if token.kind == 'int':
            self.advance()
            return int(token.text)
        raise self.error(f"expected a value, found {token.text!r}")

    def at_value(self) -> bool:
        if self.current.kind in ('global', 'int'):
            return True
        # `%x = ...` starts the next instruction rather than being an operand
        return self.current.kind == 'local' and not (
            self.peek().kind == 'punct' and self.peek().text == '=')

    def label(self) -> str:
        return self.expect('local').text[1:]

    def call_args(self) -> Tuple[str, List[Value]]:
        callee, _ = self.global_name('callee')
        self.expect('punct', '(')
        args: List[Value] = []
        if not self.accept('punct', ')'):
            args.append(self.value())
            while self.accept('punct', ','):
                args.append(self.value())
            self.expect('punct', ')')
        return callee, args

    def parse_instruction(self) -> InstructionIR:
        start = self.current
        result = None
        if start.kind == 'local' and self.peek().kind == 'punct' and self.peek().text == '=':
            result = self.advance().text[1:]
            self.advance()
        op_token = self.expect('ident')
        op = op_token.text
        instr = InstructionIR(opcode=op, result=result, line=start.line)

        if op == 'alloca':
            instr.operands = [int(self.accept('int').text) if self.current.kind == 'int' else 1]
        elif op in ('load', 'const', 'resume'):
            instr.operands = [self.value()]
        elif op in BINARY_OPCODES or op in ('store', 'gep', 'extract'):
            instr.operands = [self.value()]
            self.expect('punct', ',')
            instr.operands.append(self.value())
        elif op == 'br':
            instr.targets = [self.label()]
        elif op == 'condbr':
            instr.operands = [self.value()]
            self.expect('punct', ',')
            then_label = self.label()
            self.expect('punct', ',')
            instr.targets = [then_label, self.label()]
        elif op == 'ret':
            if self.at_value():
                instr.operands = [self.value()]
        elif op == 'call':
            instr.callee, instr.operands = self.call_args()
        elif op == 'invoke':
            instr.callee, instr.operands = self.call_args()
            if not self.at_keyword('to'):
                raise self.error("expected 'to' in invoke")
            self.advance()
            normal = self.label()
            if not self.at_keyword('unwind'):
                raise self.error("expected 'unwind' in invoke")
            self.advance()
            instr.targets = [normal, self.label()]
        elif op == 'landingpad':
            instr.clauses = self.parse_clauses()
        elif op == 'phi':
            instr.incoming = [self.phi_entry()]
            while self.accept('punct', ','):
                instr.incoming.append(self.phi_entry())
        elif op == 'trap':
            pass
        else:
            raise ParseError(f"unknown opcode {op!r}", op_token.line, op_token.column)
        return instr

    def phi_entry(self) -> Tuple[Value, str]:
        self.expect('punct', '[')
        value = self.value()
        self.expect('punct', ',')
        label = self.label()
        self.expect('punct', ']')
        return value, label

    def parse_clauses(self) -> List[Clause]:
        clauses = []
        while True:
            if self.at_keyword('catch'):
                self.advance()
                if self.at_keyword('any'):
                    self.advance()
                    clauses.append(Clause('catch', [CATCH_ALL]))
                else:
                    clauses.append(Clause('catch', [self.global_name('typeinfo')[0]]))
            elif self.at_keyword('filter'):
                self.advance()
                self.expect('punct', '[')
                types: List[Optional[str]] = []
                if not self.accept('punct', ']'):
                    types.append(self.global_name('typeinfo')[0])
                    while self.accept('punct', ','):
                        types.append(self.global_name('typeinfo')[0])
                    self.expect('punct', ']')
                clauses.append(Clause('filter', types))
            elif self.at_keyword('cleanup'):
                self.advance()
                clauses.append(Clause('cleanup'))
            else:
                break
        if not clauses:
            raise self.error("landingpad needs at least one clause")
        return clauses

    # Resolution

    def resolve(self) -> None:
        typeinfos = self.module.typeinfos
        functions = {f.name for f in self.module.functions}
        globals_ = set(self.module.global_names())
        for name, kind, token in self.references:
            if kind == 'typeinfo':
                ok = name in typeinfos
            elif kind == 'callee':
                ok = name in functions or name in RUNTIME_SYMBOLS or name == TYPEID_INTRINSIC
            elif kind == 'global':
                ok = name in globals_
            elif kind == 'personality':
                ok = name in functions or name in RUNTIME_SYMBOLS
            else:
                ok = (name in typeinfos or name in functions or name in globals_
                      or name in RUNTIME_SYMBOLS)
            if not ok:
                raise UnresolvedReferenceError(f"unresolved reference @{name}", token.line, token.column)


def parse_module(text: str) -> ModuleIR:
    """Parse EHIR source text into a ModuleIR."""
    return _Parser(text).parse_module()


def parse_file(path: str) -> ModuleIR:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except UnicodeDecodeError as e:
        raise FileAccessError(f"{path}: not UTF-8 text (byte {e.start}: {e.reason})")
    except OSError as e:
        raise FileAccessError(f"cannot read {path}: {e.strerror or e}")
    return parse_module(text)
