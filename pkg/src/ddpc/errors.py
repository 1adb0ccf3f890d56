"""Exception types shared across controllers, harness and CLI."""


class ConfigError(ValueError):
    """A configuration value violates its constraint."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ControllerError(RuntimeError):
    """A controller could not produce an input; carries a QP dump when available."""

    def __init__(self, message: str, debug_dump: str = ""):
        self.debug_dump = debug_dump
        super().__init__(message)


class PersistencyError(ValueError):
    """Offline data is not persistently exciting of the required order."""

    def __init__(self, achieved: int, required: int):
        self.achieved = achieved
        self.required = required
        super().__init__(
            f"offline input is persistently exciting of order {achieved} < required {required}")
