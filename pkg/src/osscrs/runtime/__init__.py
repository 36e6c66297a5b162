from osscrs.runtime.base import (
    BuildError,
    ContainerHandle,
    ContainerRuntimeError,
    ContainerSpec,
    ImageBuildRequest,
    ImageNotFound,
    Mount,
    NetworkError,
    Runtime,
    Unresolvable,
)


def make_runtime(kind: str, state_dir, host=None) -> Runtime:
    if kind == "mock":
        from osscrs.runtime.mock import MockRuntime
        import os

        return MockRuntime(os.environ.get("OSS_CRS_MOCK_ROOT") or state_dir, host=host)
    if kind == "engine":
        from osscrs.runtime.engine import EngineRuntime

        return EngineRuntime(state_dir)
    raise ValueError(f"unknown runtime {kind!r} (expected mock or engine)")


__all__ = [
    "BuildError", "ContainerHandle", "ContainerRuntimeError", "ContainerSpec",
    "ImageBuildRequest", "ImageNotFound", "Mount", "NetworkError", "Runtime",
    "Unresolvable", "make_runtime",
]
