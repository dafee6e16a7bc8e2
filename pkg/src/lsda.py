"""
Encoder and decoder for the language-specific data area (LSDA).

Byte layout (version 1, every integer LEB128):

    version       1 byte, always 0x01
    counts        ULEB callsites, ULEB actions, ULEB types, ULEB specs
    callsites     ULEB start, ULEB length, ULEB landing_pad, ULEB action
    actions       SLEB type_filter, SLEB next
    types         ULEB typeinfo id (0 = catch-all)
    specs         ULEB typeinfo ids, each list terminated by a 0

A callsite's `action` is 1 + the index of the first entry of its chain, or 0
when the landing pad only runs cleanups. An action's `next` is the distance
in entries to the next link of the chain; 0 ends the chain. Positive filters
index the type table from 1, negative filters index the spec lists from -1,
and filter 0 marks a cleanup.
"""

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Type

from .errors import LsdaDecodeError, LsdaEncodeError, LsdaError
from .ir import TypeInfoRegistry


LSDA_VERSION = 0x01


# LEB128 primitives

def uleb_encode(value: int) -> bytes:
    if value < 0:
        raise LsdaEncodeError(f"cannot ULEB-encode negative value {value}")
    out = bytearray()
    while True:
        byte = value & 0x7f
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def uleb_decode(data: bytes, offset: int = 0) -> Tuple[int, int]:
    """Decode one ULEB128 value; returns (value, bytes consumed)."""
    result = 0
    shift = 0
    pos = offset
    while True:
        if pos >= len(data):
            raise LsdaDecodeError(f"truncated ULEB128 at offset {offset}")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7f) << shift
        shift += 7
        if byte & 0x80 == 0:
            break
    return result, pos - offset


def sleb_encode(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7f
        value >>= 7
        done = (value == 0 and byte & 0x40 == 0) or (value == -1 and byte & 0x40)
        if done:
            out.append(byte)
            return bytes(out)
        out.append(byte | 0x80)


def sleb_decode(data: bytes, offset: int = 0) -> Tuple[int, int]:
    """Decode one SLEB128 value; returns (value, bytes consumed)."""
    result = 0
    shift = 0
    pos = offset
    while True:
        if pos >= len(data):
            raise LsdaDecodeError(f"truncated SLEB128 at offset {offset}")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7f) << shift
        shift += 7
        if byte & 0x80 == 0:
            break
    if byte & 0x40:
        # Sign extend
        result -= 1 << shift
    return result, pos - offset


# Tables

@dataclass(frozen=True)
class CallSiteRecord:
    start: int
    length: int
    landing_pad: int
    action: int

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class ActionEntry:
    type_filter: int
    next: int


@dataclass
class LsdaTable:
    callsites: List[CallSiteRecord] = field(default_factory=list)
    actions: List[ActionEntry] = field(default_factory=list)
    types: List[int] = field(default_factory=list)
    specs: List[List[int]] = field(default_factory=list)

    def chain(self, action: int) -> List[ActionEntry]:
        """Follow the action chain starting at callsite action value `action`."""
        entries: List[ActionEntry] = []
        if action == 0:
            return entries
        index = action - 1
        while True:
            entry = self.actions[index]
            entries.append(entry)
            if entry.next == 0:
                return entries
            index += entry.next

    def type_for_filter(self, type_filter: int) -> int:
        return self.types[type_filter - 1]

    def spec_for_filter(self, type_filter: int) -> List[int]:
        return self.specs[-type_filter - 1]


def check_table(table: LsdaTable, error: Type[LsdaError] = LsdaEncodeError) -> None:
    """Raise `error` unless the table satisfies every structural invariant."""
    previous_end = 0
    for index, record in enumerate(table.callsites):
        if min(record.start, record.length, record.landing_pad, record.action) < 0:
            raise error(f"callsite {index} has a negative field")
        if record.length < 1:
            raise error(f"callsite {index} has an empty range")
        if record.start < previous_end:
            raise error(f"callsite {index} is out of order or overlaps its predecessor")
        if record.action > len(table.actions):
            raise error(f"callsite {index} names missing action {record.action}")
        previous_end = record.end

    count = len(table.actions)
    for index, entry in enumerate(table.actions):
        if entry.type_filter > len(table.types):
            raise error(f"action {index + 1} filter {entry.type_filter} exceeds the type table")
        if entry.type_filter < 0 and -entry.type_filter > len(table.specs):
            raise error(f"action {index + 1} filter {entry.type_filter} names a missing spec list")
        if entry.next and not 0 <= index + entry.next < count:
            raise error(f"action {index + 1} links outside the action table")

    # Every chain must end
    finished = set()
    for start in range(count):
        seen = set()
        index = start
        while index not in finished:
            if index in seen:
                raise error(f"action chain from entry {start + 1} does not terminate")
            seen.add(index)
            step = table.actions[index].next
            if step == 0:
                break
            index += step
        finished.update(seen)

    for type_id in table.types:
        if type_id < 0:
            raise error(f"negative typeinfo id {type_id} in type table")
    for index, spec in enumerate(table.specs):
        if any(type_id < 1 for type_id in spec):
            raise error(f"spec list {-(index + 1)} holds a non-positive typeinfo id")


def encode(table: LsdaTable) -> bytes:
    check_table(table, LsdaEncodeError)
    out = bytearray([LSDA_VERSION])
    for count in (len(table.callsites), len(table.actions), len(table.types), len(table.specs)):
        out += uleb_encode(count)
    for record in table.callsites:
        for value in (record.start, record.length, record.landing_pad, record.action):
            out += uleb_encode(value)
    for entry in table.actions:
        out += sleb_encode(entry.type_filter)
        out += sleb_encode(entry.next)
    for type_id in table.types:
        out += uleb_encode(type_id)
    for spec in table.specs:
        for type_id in spec:
            out += uleb_encode(type_id)
        out += uleb_encode(0)
    return bytes(out)


class _Reader:

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def uleb(self) -> int:
        value, consumed = uleb_decode(self.data, self.pos)
        if uleb_encode(value) != self.data[self.pos:self.pos + consumed]:
            raise LsdaDecodeError(f"non-canonical ULEB128 at offset {self.pos}")
        self.pos += consumed
        return value

    def sleb(self) -> int:
        value, consumed = sleb_decode(self.data, self.pos)
        if sleb_encode(value) != self.data[self.pos:self.pos + consumed]:
            raise LsdaDecodeError(f"non-canonical SLEB128 at offset {self.pos}")
        self.pos += consumed
        return value


def decode(data: bytes) -> LsdaTable:
    data = bytes(data)
    if not data:
        raise LsdaDecodeError("empty LSDA")
    if data[0] != LSDA_VERSION:
        raise LsdaDecodeError(f"unsupported LSDA version {data[0]:#04x}")
    reader = _Reader(data)
    reader.pos = 1
    n_callsites, n_actions, n_types, n_specs = (reader.uleb() for _ in range(4))
    if n_callsites + n_actions + n_types + n_specs > len(data):
        raise LsdaDecodeError("table counts exceed the available bytes")

    table = LsdaTable()
    for _ in range(n_callsites):
        table.callsites.append(CallSiteRecord(reader.uleb(), reader.uleb(), reader.uleb(), reader.uleb()))
    for _ in range(n_actions):
        table.actions.append(ActionEntry(reader.sleb(), reader.sleb()))
    for _ in range(n_types):
        table.types.append(reader.uleb())
    for _ in range(n_specs):
        spec = []
        while True:
            type_id = reader.uleb()
            if type_id == 0:
                break
            spec.append(type_id)
        table.specs.append(spec)

    if reader.pos != len(data):
        raise LsdaDecodeError(f"{len(data) - reader.pos} trailing byte(s) after LSDA")
    check_table(table, LsdaDecodeError)
    return table


def find_callsite(table: LsdaTable, pc: int) -> Optional[CallSiteRecord]:
    """Return the record whose half-open range [start, start+length) holds pc."""
    starts = [record.start for record in table.callsites]
    index = bisect_right(starts, pc) - 1
    if index < 0:
        return None
    record = table.callsites[index]
    return record if pc < record.end else None


# Text dump

def _type_text(type_id: int, registry: Optional[TypeInfoRegistry]) -> str:
    if type_id == 0:
        return 'any'
    if registry is not None:
        try:
            return f"@{registry.name_of(type_id)}"
        except KeyError:
            pass
    return f"#{type_id}"


def dump(table: LsdaTable, name: str, registry: Optional[TypeInfoRegistry] = None) -> str:
    """Render a decoded table as stable, line-oriented text."""
    lines = [f"lsda @{name} v{LSDA_VERSION}"]
    for index, record in enumerate(table.callsites):
        lines.append(f"callsite {index} start={record.start} length={record.length} "
                     f"landing_pad={record.landing_pad} action={record.action}")
    for index, entry in enumerate(table.actions):
        lines.append(f"action {index + 1} filter={entry.type_filter} next={entry.next}")
    for index, type_id in enumerate(table.types):
        lines.append(f"type {index + 1} {_type_text(type_id, registry)}")
    for index, spec in enumerate(table.specs):
        members = ', '.join(_type_text(type_id, registry) for type_id in spec)
        lines.append(f"spec {-(index + 1)} [{members}]")
    return '\n'.join(lines) + '\n'
