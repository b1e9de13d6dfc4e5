"""Exception hierarchy shared by the services."""


class FlareError(Exception):
    """Base class for every error raised by flare services"""


class ConfigurationError(FlareError, ValueError):
    """Geometry, dimension or configuration mismatch"""


class NonFiniteLossError(FlareError, ArithmeticError):
    def __init__(self, path: str, value: float):
        self.path = path
        self.value = value
        super().__init__(f"Non-finite loss {value!r} in {path}")

    def __reduce__(self):
        # worker processes send these back to the parent
        return type(self), (self.path, self.value)


class InsufficientDataError(FlareError):
    def __init__(self, available: int, requested: int):
        self.available = available
        self.requested = requested
        super().__init__(
            f"Replay buffer holds {available} usable transitions, {requested} requested; "
            f"increase initial steps (warm-up) before sampling"
        )

    def __reduce__(self):
        return type(self), (self.available, self.requested)


class CheckpointError(FlareError):
    """Unreadable or unsupported checkpoint/snapshot container"""


class TrainingAborted(FlareError):
    def __init__(self, reason: str, snapshot_path: str | None = None):
        self.reason = reason
        self.snapshot_path = snapshot_path
        message = f"Training aborted: {reason}"
        if snapshot_path:
            message += f" (diagnostic snapshot: {snapshot_path})"
        super().__init__(message)

    def __reduce__(self):
        return type(self), (self.reason, self.snapshot_path)
