from osscrs.builder.service import (
    BASE_REF,
    BuilderError,
    BuilderService,
    BuildResult,
    FifoLock,
    PovResult,
    Snapshot,
    TestResult,
    UnknownBuild,
    capture_snapshot,
)

__all__ = [
    "BASE_REF", "BuildResult", "BuilderError", "BuilderService", "FifoLock", "PovResult",
    "Snapshot", "TestResult", "UnknownBuild", "capture_snapshot",
]
