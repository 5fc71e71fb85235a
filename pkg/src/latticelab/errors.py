from __future__ import annotations


class ConfigurationError(ValueError):
    """Invalid parameters or inconsistent inputs."""


class ResourceError(RuntimeError):
    """A request would exceed the configured site or memory budget."""


class UnsupportedDimensionError(ValueError):
    """The operation is only defined in a restricted set of dimensions."""


class ReplicateError(RuntimeError):
    def __init__(self, role: str, index: int, cause: BaseException):
        super().__init__(f"{role} replicate {index} failed: {cause!r}")
        self.role = role
        self.index = index
        self.cause = cause
