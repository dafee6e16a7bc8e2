"""
Two-phase unwinder with the libunwind-style interface.

Phase 1 walks the stack asking each personality routine whether it handles
the exception; phase 2 walks it again, letting frames run cleanups until the
handler frame installs its landing pad. Two deviations from a native
unwinder apply:

  - an exception that would leave a `nounwind` function is a fault,
  - when no handler exists the machine chooses whether the stack is unwound
    (cleanups run) before the exception is reported as uncaught.

The whole operation is an atomic section: the mask is saved on entry,
restored around every personality call and restored again when control
reaches a landing pad.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum, IntFlag
from typing import TYPE_CHECKING, Any, Callable, Dict, Optional, Tuple

from .memory import GuestFault, LandingPair, Pointer

if TYPE_CHECKING:
    from .machine import Frame, Machine

logger = logging.getLogger(__name__)

NATIVE_EXCEPTION_CLASS = b"EHVMCXX\0"
PERSONALITY_VERSION = 1


class ReasonCode(IntEnum):
    NO_REASON = 0
    FOREIGN_CAUGHT = 1
    FATAL_PHASE2_ERROR = 2
    FATAL_PHASE1_ERROR = 3
    END_OF_STACK = 5
    HANDLER_FOUND = 6
    INSTALL_CONTEXT = 7
    CONTINUE_UNWIND = 8


class UnwindAction(IntFlag):
    SEARCH_PHASE = 1
    CLEANUP_PHASE = 2
    HANDLER_FRAME = 4


def action_text(actions: UnwindAction) -> str:
    if actions & UnwindAction.SEARCH_PHASE:
        return 'SEARCH'
    if actions & UnwindAction.HANDLER_FRAME:
        return 'CLEANUP+HANDLER'
    return 'CLEANUP'


@dataclass
class UnwindCursor:
    """Where phase 2 continues after a cleanup landing pad calls Resume."""
    frame: int
    handler_frame: Optional[int]
    saved_mask: bool


@dataclass
class UnwindException:
    exception_class: bytes
    # Deletion hook: (exception, calling frame) -> True if it transferred control
    cleanup: Optional[Callable[['UnwindException', 'Frame'], bool]] = None
    private_cursor: Optional[UnwindCursor] = None
    language_payload: Optional[Pointer] = None


@dataclass
class UnwindContext:
    frame: int
    ip: int
    registers: Dict[int, Any] = field(default_factory=dict)


Personality = Callable[[int, UnwindAction, bytes, UnwindException, UnwindContext], ReasonCode]


def header_of(machine: 'Machine', pointer: Any) -> UnwindException:
    """The unwind header of the exception object `pointer` refers to."""
    meta = machine.heap.object_of(pointer, 'exception access').meta
    if isinstance(meta, UnwindException):
        return meta
    header = getattr(meta, 'header', None)
    if not isinstance(header, UnwindException):
        raise GuestFault('trap', f"{pointer} is not an exception object")
    return header


class Unwinder:
    """The unwinder bound to one machine."""

    def __init__(self, machine: 'Machine'):
        self.machine = machine
        self.personalities: Dict[str, Personality] = {}
        # Number of entries into RaiseException, Resume and DeleteException
        self.entries = 0

    def register_personality(self, name: str, routine: Personality) -> None:
        self.personalities[name] = routine

    def _parent(self, frame: 'Frame') -> Optional['Frame']:
        if frame.parent is None:
            return None
        return self.machine.frames.get(frame.parent)

    def _personality(self, frame: 'Frame', actions: UnwindAction, exc: UnwindException,
                     saved: bool) -> Tuple[ReasonCode, UnwindContext]:
        m = self.machine
        name = m.function(frame.function).personality
        routine = self.personalities.get(name)
        ctx = UnwindContext(frame.id, m.region_start(frame.function) + frame.pc)
        if routine is None:
            fatal = ReasonCode.FATAL_PHASE1_ERROR if actions & UnwindAction.SEARCH_PHASE \
                else ReasonCode.FATAL_PHASE2_ERROR
            return fatal, ctx
        m.set_mask(saved)
        m.emit(f"PERSONALITY {frame.function} {action_text(actions)}")
        reason = routine(PERSONALITY_VERSION, actions, exc.exception_class, exc, ctx)
        m.set_mask(True)
        logger.debug("personality of @%s (%s) -> %s", frame.function, action_text(actions), reason.name)
        return reason, ctx

    # RaiseException / Resume

    def raise_exception(self, exc: UnwindException, frame: 'Frame') -> Optional[ReasonCode]:
        """Throw `exc` from `frame`.

        Returns None once control has been transferred to a landing pad;
        otherwise returns the reason the exception could not be delivered.
        """
        m = self.machine
        self.entries += 1
        m.emit(f"RAISE {frame.function} {frame.pc}")
        saved = m.set_mask(True)
        exc.private_cursor = None

        handler: Optional[int] = None
        current: Optional['Frame'] = frame
        while current is not None:
            function = m.function(current.function)
            if function.personality is not None:
                reason, _ = self._personality(current, UnwindAction.SEARCH_PHASE, exc, saved)
                if reason in (ReasonCode.HANDLER_FOUND, ReasonCode.FOREIGN_CAUGHT):
                    handler = current.id
                    break
                if reason != ReasonCode.CONTINUE_UNWIND:
                    m.set_mask(saved)
                    return ReasonCode.FATAL_PHASE1_ERROR
            if function.nounwind:
                raise GuestFault('nounwind-violation',
                                 f"exception propagates out of nounwind function @{function.name}")
            current = self._parent(current)

        if handler is None:
            # Implementation-defined: unwind the stack before terminating, or not
            if m.hypercall_choose(2) == 0:
                m.set_mask(saved)
                return ReasonCode.END_OF_STACK
            logger.debug("no handler; running cleanups before reporting the exception")
        return self._phase2(exc, frame, handler, saved)

    def resume(self, exc: UnwindException, frame: 'Frame') -> Optional[ReasonCode]:
        """Continue phase 2 after a cleanup landing pad has finished."""
        m = self.machine
        self.entries += 1
        m.emit(f"RESUME {frame.function} {frame.pc}")
        cursor = exc.private_cursor
        if cursor is None:
            raise GuestFault('terminate', "_Unwind_Resume without an active cleanup")
        cleanup_frame = m.frames.get(cursor.frame)
        if cleanup_frame is None:
            raise GuestFault('terminate', "_Unwind_Resume after the cleanup frame was destroyed")
        saved = m.set_mask(True)
        exc.private_cursor = None
        return self._phase2(exc, self._parent(cleanup_frame), cursor.handler_frame, saved)

    def _phase2(self, exc: UnwindException, start: Optional['Frame'], handler: Optional[int],
                saved: bool) -> Optional[ReasonCode]:
        m = self.machine
        current = start
        while current is not None:
            function = m.function(current.function)
            if function.personality is not None:
                actions = UnwindAction.CLEANUP_PHASE
                if current.id == handler:
                    actions |= UnwindAction.HANDLER_FRAME
                reason, ctx = self._personality(current, actions, exc, saved)
                if reason == ReasonCode.INSTALL_CONTEXT:
                    self._install(exc, current, ctx, handler, saved)
                    return None
                if reason != ReasonCode.CONTINUE_UNWIND:
                    m.set_mask(saved)
                    return ReasonCode.FATAL_PHASE2_ERROR
            if current.id == handler:
                m.set_mask(saved)
                return ReasonCode.FATAL_PHASE2_ERROR
            current = self._parent(current)
        m.set_mask(saved)
        return ReasonCode.END_OF_STACK

    def _install(self, exc: UnwindException, frame: 'Frame', ctx: UnwindContext,
                 handler: Optional[int], saved: bool) -> None:
        m = self.machine
        m.dios_unwind(frame.thread, m.threads[frame.thread].top, frame.id)
        layout = m.layout(frame.function)
        landing_pad = ctx.ip - m.region_start(frame.function)
        instr = layout.instructions[landing_pad] if 0 <= landing_pad < len(layout) else None
        if instr is None or instr.opcode != 'landingpad':
            raise GuestFault('trap', f"no landingpad at pc {landing_pad} of @{frame.function}")
        selector = ctx.registers.get(1, 0)
        frame.locals[instr.result] = LandingPair(ctx.registers.get(0, 0), selector)
        frame.prev_block = layout.block_of[frame.pc]
        # A cleanup keeps the cursor so Resume knows where to continue
        exc.private_cursor = None if frame.id == handler else UnwindCursor(frame.id, handler, saved)
        m.emit(f"INSTALL {frame.function} {landing_pad} {selector}")
        m.dios_jump(frame.id, landing_pad, mask_restore=saved)

    # Context accessors

    @staticmethod
    def _check_register(index: int) -> None:
        if index not in (0, 1):
            raise GuestFault('unsupported-register', f"register {index} is not supported")

    def set_gr(self, ctx: UnwindContext, index: int, value: Any) -> None:
        self._check_register(index)
        ctx.registers[index] = value

    def get_gr(self, ctx: UnwindContext, index: int) -> Any:
        self._check_register(index)
        return ctx.registers.get(index, 0)

    def set_ip(self, ctx: UnwindContext, pc: int) -> None:
        ctx.ip = pc

    def get_ip(self, ctx: UnwindContext) -> int:
        return ctx.ip

    def get_lsda(self, ctx: UnwindContext) -> Any:
        """Pointer to the frame function's encoded LSDA, or 0."""
        m = self.machine
        function = m.function(m.frames[ctx.frame].function)
        if function.lsda_ref is None:
            return 0
        return m.global_pointer(function.lsda_ref)

    def get_region_start(self, ctx: UnwindContext) -> int:
        m = self.machine
        return m.region_start(m.frames[ctx.frame].function)

    def delete_exception(self, exc: UnwindException, frame: 'Frame') -> bool:
        """Run the exception's deletion hook; True if it transferred control."""
        m = self.machine
        self.entries += 1
        m.heap.object_of(exc.language_payload, 'delete')
        if exc.private_cursor is not None:
            raise GuestFault('terminate', "deleting an exception that is still being unwound")
        if exc.cleanup is not None:
            return exc.cleanup(exc, frame)
        m.heap.free(exc.language_payload)
        return False
