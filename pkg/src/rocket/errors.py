"""Exception taxonomy for the rocket runtime."""


class RocketError(Exception):
    """Base class for all rocket errors."""


class NameCollision(RocketError):
    """A shared-memory segment with this name already exists."""


class OutOfMemory(RocketError):
    """The OS refused to map a segment of the requested size."""


class CapacityNotPowerOfTwo(RocketError):
    """Ring capacity must be a power of two."""


class RegionExhausted(RocketError):
    """No room left in the server's memory pool for another queue pair."""


class ServerUnavailable(RocketError):
    """No server control segment found under the given name."""


class TooManyClients(RocketError):
    """All client slots on the server are taken."""


class PayloadTooLarge(RocketError):
    """Request data does not fit in a payload slot."""


class QueueFull(RocketError):
    """The engine's submission queue is at its depth limit."""


class OverlappingRanges(RocketError):
    """Source and destination ranges of a copy descriptor overlap."""


class Misaligned(RocketError):
    """Copy descriptor offsets are not 64-byte aligned."""


class InsufficientSamples(RocketError):
    """Calibration needs at least four distinct sizes and three reps."""


class NegativeFit(RocketError):
    """Latency fit produced a non-positive intercept or slope."""


class ScenarioInvalid(RocketError):
    """Benchmark scenario fails its own invariants."""


class ServerLaunchFailed(RocketError):
    """Benchmark could not bring up the server or its clients."""


class ServerError(RocketError):
    """The server answered a request with an ERROR response."""

    def __init__(self, op: str, subcode: int, message: str = ""):
        self.op = op
        self.subcode = subcode
        super().__init__(message or f"server rejected op {op!r} (subcode {subcode})")
