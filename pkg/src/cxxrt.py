"""
Minimal C++ language runtime.

Provides exception allocation, the throw/catch/rethrow entry points, the
per-thread caught-exception stack and the personality routine that reads a
function's LSDA to decide which landing pad (if any) receives an exception.
Type matching is plain reachability over the typeinfo base graph, so a
diamond-shaped hierarchy resolves to the shared base.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, Optional

from .errors import LsdaDecodeError
from .lsda import CallSiteRecord, LsdaTable, decode, find_callsite
from .memory import GuestFault, Pointer, format_value
from .unwind import (
    NATIVE_EXCEPTION_CLASS, PERSONALITY_VERSION, ReasonCode, UnwindAction, UnwindContext,
    UnwindException,
)

if TYPE_CHECKING:
    from .machine import Frame, Machine

logger = logging.getLogger(__name__)

HANDLER_FOUND = 'handler_found'
CLEANUP_FOUND = 'cleanup_found'
SPEC_VIOLATION = 'spec_violation'
CONTINUE = 'continue'


@dataclass
class CxxException:
    """Runtime bookkeeping attached to an exception object."""
    header: UnwindException
    typeinfo: int = 0
    destructor: Optional[str] = None
    handler_count: int = 0
    rethrown: bool = False
    thread: int = 0
    # Object id of the next exception on the thread's caught stack
    next_caught: Optional[int] = None


@dataclass(frozen=True)
class HandlerDecision:
    outcome: str
    selector: int = 0
    has_cleanup: bool = False

    @property
    def is_handler(self) -> bool:
        return self.outcome in (HANDLER_FOUND, SPEC_VIOLATION)


class CxxRuntime:
    """The language runtime bound to one machine."""

    def __init__(self, machine: 'Machine'):
        self.machine = machine
        self._tables: Dict[bytes, LsdaTable] = {}

    @property
    def unwinder(self):
        return self.machine.unwinder

    def exception_of(self, pointer: Any) -> CxxException:
        meta = self.machine.heap.object_of(pointer, 'exception access').meta
        if not isinstance(meta, CxxException):
            raise GuestFault('trap', f"{format_value(pointer)} is not a C++ exception")
        return meta

    def cleanup_active(self, tid: int) -> bool:
        """True while a cleanup landing pad of `tid` waits to resume an exception."""
        for obj in self.machine.heap.live_objects('exception'):
            meta = obj.meta
            if isinstance(meta, CxxException) and meta.thread == tid \
                    and meta.header.private_cursor is not None:
                return True
        return False

    # Entry points called by guest code

    def allocate_exception(self, size: Any) -> Pointer:
        m = self.machine
        if not isinstance(size, int):
            raise GuestFault('trap', f"exception of non-integer size {format_value(size)}")
        if m.registers.fault_injection and m.hypercall_choose(2) == 1:
            raise GuestFault('terminate', "out of memory while allocating an exception")
        pointer = m.heap.allocate(size, 'exception')
        header = UnwindException(NATIVE_EXCEPTION_CLASS, cleanup=self._exception_cleanup,
                                 language_payload=pointer)
        m.heap.objects[pointer.obj].meta = CxxException(header, thread=m.current)
        return pointer

    def throw(self, frame: 'Frame', pointer: Any, type_id: Any, destructor: Any) -> None:
        m = self.machine
        if self.cleanup_active(frame.thread):
            raise GuestFault('terminate', "exception thrown while a cleanup is running")
        exc = self.exception_of(pointer)
        if not isinstance(type_id, int) or not 1 <= type_id <= len(m.module.typeinfos):
            raise GuestFault('trap', f"__cxa_throw with invalid typeinfo {format_value(type_id)}")
        if destructor == 0:
            exc.destructor = None
        else:
            exc.destructor = m.function_of_token(destructor)
            if exc.destructor is None:
                raise GuestFault('trap', f"__cxa_throw with invalid destructor {format_value(destructor)}")
        exc.typeinfo = type_id
        exc.thread = frame.thread
        exc.rethrown = False
        reason = self.unwinder.raise_exception(exc.header, frame)
        if reason is not None:
            raise GuestFault('terminate', f"uncaught exception of type @{m.module.typeinfos.name_of(type_id)} "
                                          f"({reason.name})")

    def begin_catch(self, pointer: Any) -> Any:
        exc = self.exception_of(pointer)
        thread = self.machine.threads[exc.thread]
        exc.handler_count += 1
        exc.rethrown = False
        if thread.caught_top != pointer.obj:
            exc.next_caught = thread.caught_top
            thread.caught_top = pointer.obj
        return pointer

    def end_catch(self, frame: 'Frame') -> bool:
        """Leave the innermost handler; True if a destructor call took over control."""
        m = self.machine
        thread = m.threads[frame.thread]
        if thread.caught_top is None:
            raise GuestFault('terminate', "__cxa_end_catch with no caught exception")
        pointer = Pointer(thread.caught_top)
        exc = self.exception_of(pointer)
        exc.handler_count -= 1
        if exc.handler_count > 0:
            return False
        thread.caught_top = exc.next_caught
        exc.next_caught = None
        if exc.rethrown:
            return False
        return self.unwinder.delete_exception(exc.header, frame)

    def rethrow(self, frame: 'Frame') -> None:
        m = self.machine
        thread = m.threads[frame.thread]
        if thread.caught_top is None:
            raise GuestFault('terminate', "__cxa_rethrow with no caught exception")
        if self.cleanup_active(frame.thread):
            raise GuestFault('terminate', "exception rethrown while a cleanup is running")
        exc = self.exception_of(Pointer(thread.caught_top))
        exc.rethrown = True
        reason = self.unwinder.raise_exception(exc.header, frame)
        if reason is not None:
            raise GuestFault('terminate', f"uncaught rethrown exception ({reason.name})")

    def _exception_cleanup(self, header: UnwindException, frame: 'Frame') -> bool:
        m = self.machine
        pointer = header.language_payload
        exc = self.exception_of(pointer)
        if exc.destructor is None:
            m.heap.free(pointer, origin='exception')
            return False

        def finish(parent: 'Frame', _value: Any) -> None:
            m.heap.free(pointer, origin='exception')
            m.complete_call(parent, 0)

        params = m.function(exc.destructor).params
        m.push_frame(exc.destructor, [pointer] if params else [], frame, return_action=finish)
        return True

    # Personality

    def _table(self, ctx: UnwindContext) -> Optional[LsdaTable]:
        lsda = self.unwinder.get_lsda(ctx)
        if lsda == 0:
            return None
        data = self.machine.heap.read_bytes(lsda)
        if data not in self._tables:
            self._tables[data] = decode(data)
        return self._tables[data]

    def match_type(self, thrown: int, clause: int, foreign: bool = False) -> bool:
        if clause == 0:
            return True
        if foreign:
            return False
        registry = self.machine.module.typeinfos
        return registry.is_subtype(registry.name_of(thrown), registry.name_of(clause))

    def decide(self, table: LsdaTable, record: CallSiteRecord, thrown: int,
               foreign: bool = False) -> HandlerDecision:
        """Walk the record's action chain for an exception of type `thrown`."""
        if record.action == 0:
            return HandlerDecision(CLEANUP_FOUND, 0, True)
        has_cleanup = False
        for entry in table.chain(record.action):
            type_filter = entry.type_filter
            if type_filter > 0:
                if self.match_type(thrown, table.type_for_filter(type_filter), foreign):
                    return HandlerDecision(HANDLER_FOUND, type_filter, has_cleanup)
            elif type_filter < 0:
                permitted = table.spec_for_filter(type_filter)
                if foreign or not any(self.match_type(thrown, type_id) for type_id in permitted):
                    return HandlerDecision(SPEC_VIOLATION, type_filter, has_cleanup)
            else:
                has_cleanup = True
        if has_cleanup:
            return HandlerDecision(CLEANUP_FOUND, 0, True)
        return HandlerDecision(CONTINUE)

    def _install(self, ctx: UnwindContext, exc: UnwindException, selector: int,
                 landing_pad: int) -> ReasonCode:
        self.unwinder.set_gr(ctx, 0, exc.language_payload)
        self.unwinder.set_gr(ctx, 1, selector)
        self.unwinder.set_ip(ctx, self.unwinder.get_region_start(ctx) + landing_pad)
        return ReasonCode.INSTALL_CONTEXT

    def personality(self, version: int, actions: UnwindAction, exception_class: bytes,
                    exc: UnwindException, ctx: UnwindContext) -> ReasonCode:
        search = bool(actions & UnwindAction.SEARCH_PHASE)
        fatal = ReasonCode.FATAL_PHASE1_ERROR if search else ReasonCode.FATAL_PHASE2_ERROR
        if version != PERSONALITY_VERSION:
            return fatal
        try:
            table = self._table(ctx)
        except LsdaDecodeError as e:
            logger.debug("undecodable LSDA: %s", e)
            return fatal
        if table is None:
            return ReasonCode.CONTINUE_UNWIND
        pc = self.unwinder.get_ip(ctx) - self.unwinder.get_region_start(ctx)
        record = find_callsite(table, pc)
        if record is None:
            return fatal
        if record.landing_pad == 0:
            return ReasonCode.CONTINUE_UNWIND

        foreign = exception_class != NATIVE_EXCEPTION_CLASS
        thrown = 0 if foreign else self.exception_of(exc.language_payload).typeinfo
        decision = self.decide(table, record, thrown, foreign)
        logger.debug("frame %d pc %d: %s", ctx.frame, pc, decision)

        if search:
            if not decision.is_handler:
                return ReasonCode.CONTINUE_UNWIND
            # Only a catch-all can take a foreign exception
            return ReasonCode.FOREIGN_CAUGHT if foreign and decision.outcome == HANDLER_FOUND \
                else ReasonCode.HANDLER_FOUND
        if actions & UnwindAction.HANDLER_FRAME:
            if not decision.is_handler:
                return fatal
            return self._install(ctx, exc, decision.selector, record.landing_pad)
        if decision.has_cleanup:
            return self._install(ctx, exc, 0, record.landing_pad)
        return ReasonCode.CONTINUE_UNWIND

