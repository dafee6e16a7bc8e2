"""
Values, the tracked heap and fault reports.

Every allocation (alloca, malloc, exception object, global) is a HeapObject
with its own cell list, so all accesses are bounds- and liveness-checked.
Frames draw their handles from the same id counter as heap objects.
"""

from collections import Counter
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional


# Fault kinds reported to the user; each maps to exit code 1 in the CLI
FAULT_KINDS = (
    'bounds', 'use-after-free', 'uninitialized', 'nounwind-violation',
    'terminate', 'trap', 'leak', 'unsupported-register',
)

ORIGINS = ('alloca', 'user', 'exception', 'global')


@dataclass(frozen=True)
class Pointer:
    """Address of cell `offset` inside heap object `obj`."""
    obj: int
    offset: int = 0

    def __add__(self, delta: int) -> 'Pointer':
        return Pointer(self.obj, self.offset + delta)

    def __str__(self) -> str:
        return f"&{self.obj}+{self.offset}"


@dataclass(frozen=True)
class LandingPair:
    """The (exception pointer, selector) value produced by a landingpad."""
    exception: Any
    selector: int

    def __str__(self) -> str:
        return f"{{{self.exception}, {self.selector}}}"


def format_value(value: Any) -> str:
    if value is None:
        return 'undef'
    return str(value)


@dataclass
class FaultReport:
    kind: str
    function: Optional[str] = None
    pc: Optional[int] = None
    message: str = ''

    @property
    def location(self):
        return (self.function, self.pc)

    def __str__(self) -> str:
        where = f" at @{self.function}:{self.pc}" if self.function is not None else ''
        return f"fault({self.kind}){where}: {self.message}"


class GuestFault(Exception):
    """Raised inside the machine to abort the current instruction.

    The machine catches it at the step boundary, fills in the location and
    turns it into a fault outcome.
    """

    def __init__(self, kind: str, message: str = ''):
        if kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {kind!r}")
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


@dataclass
class HeapObject:
    id: int
    cells: List[Any]
    origin: str
    live: bool = True
    name: Optional[str] = None
    # Runtime bookkeeping attached by the language runtime (exception objects)
    meta: Any = None

    @property
    def size(self) -> int:
        return len(self.cells)


class Heap:
    """Tracked object space shared by heap objects and frame handles."""

    def __init__(self):
        self.objects: Dict[int, HeapObject] = {}
        self.next_id = 1

    def fresh_id(self) -> int:
        oid = self.next_id
        self.next_id += 1
        return oid

    def allocate(self, size: int, origin: str, cells: Optional[List[Any]] = None,
                 name: Optional[str] = None) -> Pointer:
        if origin not in ORIGINS:
            raise ValueError(f"unknown object origin {origin!r}")
        if size < 0:
            raise GuestFault('bounds', f"negative allocation size {size}")
        oid = self.fresh_id()
        self.objects[oid] = HeapObject(oid, list(cells) if cells is not None else [None] * size, origin, name=name)
        return Pointer(oid, 0)

    def add_global(self, index: int, name: str, data: List[int]) -> Pointer:
        # Globals use their own (negative) id space so they never shift frame ids
        oid = -(index + 1)
        self.objects[oid] = HeapObject(oid, list(data), 'global', name=name)
        return Pointer(oid, 0)

    def object_of(self, pointer: Any, action: str = 'access') -> HeapObject:
        """Resolve a pointer to its live object, or fault."""
        if not isinstance(pointer, Pointer):
            raise GuestFault('bounds', f"{action} through non-pointer value {format_value(pointer)}")
        obj = self.objects.get(pointer.obj)
        if obj is None:
            raise GuestFault('bounds', f"{action} of unknown object {pointer}")
        if not obj.live:
            raise GuestFault('use-after-free', f"{action} of freed object {pointer}")
        return obj

    def _cell(self, pointer: Any, action: str) -> HeapObject:
        obj = self.object_of(pointer, action)
        if not 0 <= pointer.offset < obj.size:
            raise GuestFault('bounds', f"{action} at {pointer} outside object of size {obj.size}")
        return obj

    def load(self, pointer: Any) -> Any:
        obj = self._cell(pointer, 'load')
        value = obj.cells[pointer.offset]
        if value is None:
            raise GuestFault('uninitialized', f"load of uninitialized cell {pointer}")
        return value

    def store(self, pointer: Any, value: Any) -> None:
        obj = self._cell(pointer, 'store')
        obj.cells[pointer.offset] = value

    def free(self, pointer: Any, origin: Optional[str] = None) -> HeapObject:
        obj = self.object_of(pointer, 'free')
        if pointer.offset != 0:
            raise GuestFault('bounds', f"free of interior pointer {pointer}")
        if origin is not None and obj.origin != origin:
            raise GuestFault('bounds', f"free of {obj.origin} object {pointer}")
        obj.live = False
        return obj

    def kill(self, oid: int) -> None:
        """Mark an object dead without any checks (frame teardown)."""
        obj = self.objects.get(oid)
        if obj is not None:
            obj.live = False

    def read_bytes(self, pointer: Any) -> bytes:
        obj = self.object_of(pointer, 'read')
        data = obj.cells[pointer.offset:]
        if any(not isinstance(b, int) or not 0 <= b <= 0xff for b in data):
            raise GuestFault('bounds', f"object {pointer} does not hold bytes")
        return bytes(data)

    def live_objects(self, origin: Optional[str] = None) -> Iterator[HeapObject]:
        for obj in self.objects.values():
            if obj.live and (origin is None or obj.origin == origin):
                yield obj


def census(heap: Heap, frames: int = 0) -> Counter:
    """Count live objects by origin, plus live frames under 'frame'.

    Globals are never counted.
    """
    counts: Counter = Counter()
    for obj in heap.live_objects():
        if obj.origin != 'global':
            counts[obj.origin] += 1
    if frames:
        counts['frame'] = frames
    return counts
