"""Exception hierarchy shared by every pipeline stage."""


class AMRError(Exception):
    """Base class for all errors raised by blockamr."""


class CapacityError(AMRError):
    """A block id or wire field does not fit its bit budget."""


class DomainError(AMRError):
    """A tree operation left the valid level range."""


class BalanceError(AMRError):
    """Two adjacent blocks differ by more than one level.

    ``pair`` holds the offending ``(block_id, other_id)``.
    """

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class ContractError(AMRError):
    """A callback or caller broke an interface contract."""


class FabricError(AMRError):
    """Misuse of the simulated rank network (bad rank, collective mismatch)."""


class LocalityViolation(FabricError):
    """A point-to-point message was addressed outside the allowed rank set."""


class ProtocolError(AMRError):
    """A distributed protocol received unexpected or incomplete data."""


class ProtocolLeakError(ProtocolError):
    """Messages were left unconsumed when a program terminated."""


class AuditError(AMRError):
    """Global consistency audit failed (links, topology, ownership)."""


class StageError(AMRError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
