"""rocket: shared-memory IPC with asynchronous memory-offload engines.

The runtime moves request and response payloads through persistent shared
memory and routes the copies themselves through a pluggable engine: a plain
CPU path for small transfers and an asynchronous offload path (simulated
here) whose completion is detected by size-aware hybrid polling. Three
execution modes trade latency against throughput: blocking sync, futures
async, and batched pipelined submission with deferred result queries.
"""

from .client import (
    NOT_READY,
    UNKNOWN,
    ClientConfig,
    ClientSession,
    QueryOutcome,
    ResponseFuture,
    connect,
)
from .completion import (
    CalibrationSample,
    PollKind,
    PollPolicy,
    WaitStats,
    calibrate,
    estimate_latency,
    fit_latency_model,
    wait,
    wait_all,
)
from .engine import (
    DEFAULT_PROFILE,
    CompletionRecord,
    CompletionStatus,
    CopyDescriptor,
    CpuBackend,
    Device,
    EngineProfile,
    SimEngine,
    SimEngineConfig,
    SubmitTicket,
    copy_cpu,
    inject_touch,
    load_profile,
    make_backend,
    route_device,
    save_profile,
)
from .errors import (
    CapacityNotPowerOfTwo,
    InsufficientSamples,
    Misaligned,
    NameCollision,
    NegativeFit,
    OutOfMemory,
    OverlappingRanges,
    PayloadTooLarge,
    QueueFull,
    RegionExhausted,
    RocketError,
    ScenarioInvalid,
    ServerError,
    ServerLaunchFailed,
    ServerUnavailable,
    TooManyClients,
)
from .runtime import (
    HandlerRegistration,
    InjectionPolicy,
    JobRecord,
    JobState,
    Server,
    ServerConfig,
    StageCosts,
)
from .transport import (
    DeviceHint,
    ErrorCode,
    InjectionHint,
    MessageHeader,
    MessageKind,
    Mode,
    QueuePair,
    RingQueue,
    SharedRegion,
    attach_queue_pair,
    attach_region,
    create_region,
    open_queue_pair,
)

__version__ = "0.1.0"
