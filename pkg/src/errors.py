"""
Exception hierarchy for the ehvm toolchain.

Host-side problems (bad input files, malformed LSDA bytes, replay mismatches)
are Python exceptions. Problems of the *guest* program are never raised past
the machine boundary: they become FaultReport values (see memory.py).
"""

from typing import Optional


class EhvmError(Exception):
    """Base class for every error raised by the toolchain."""


class ConfigError(EhvmError):
    """The configuration file could not be loaded."""


class FileAccessError(EhvmError):
    """An input file could not be read or an output file could not be written."""


class ParseError(EhvmError):
    """Syntax error in EHIR source text."""

    _fmt = "{line}:{column}: {message}"

    def __init__(self, message: str, line: int = 0, column: int = 0) -> None:
        self.message = message
        self.line = line
        self.column = column
        super().__init__(self._fmt.format(line=line, column=column, message=message))


class DuplicateDefinitionError(ParseError):
    """A name was defined twice in the same scope."""


class UnresolvedReferenceError(ParseError):
    """A reference names something that is never defined."""


class LsdaError(EhvmError):
    """Base class for LSDA encoding problems."""


class LsdaEncodeError(LsdaError):
    """The table handed to the encoder violates the table invariants."""


class LsdaDecodeError(LsdaError):
    """The byte string is not a well-formed encoded LSDA."""


class PassError(EhvmError):
    """The exception-handling pass cannot lower the module."""


class ExecutionError(EhvmError):
    """Misuse of the machine's host API (not a guest fault)."""


class TraceMismatchError(EhvmError):
    """A recorded choice trace does not fit the program being replayed."""

    def __init__(self, message: str, choice_id: Optional[int] = None) -> None:
        self.choice_id = choice_id
        if choice_id is not None:
            message = f"choice {choice_id}: {message}"
        super().__init__(message)
