"""Exception types raised across the package."""


class KeyrenderError(Exception):
    """Base class for all package errors."""


class NonOrthonormalInput(KeyrenderError, ValueError):
    def __init__(self, deviation: float):
        super().__init__(f"matrix is not a proper rotation (max deviation {deviation:.3e})")
        self.deviation = deviation


class EmptyTrajectory(KeyrenderError, ValueError):
    pass


class InvalidFactor(KeyrenderError, ValueError):
    pass


class UnknownRecipe(KeyrenderError, ValueError):
    pass


class UnknownKind(KeyrenderError, ValueError):
    pass


class UncoveredFrameIndex(KeyrenderError, ValueError):
    pass


class InvalidCount(KeyrenderError, ValueError):
    pass


class ShapeMismatch(KeyrenderError, ValueError):
    pass


class NonFiniteLoss(KeyrenderError, RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class NoValidDepth(KeyrenderError, ValueError):
    pass


class DegenerateConfiguration(KeyrenderError, ValueError):
    def __init__(self, message: str, chunk: int | None = None):
        if chunk is not None:
            message = f"chunk {chunk}: {message}"
        super().__init__(message)
        self.chunk = chunk


class CountMismatch(KeyrenderError, ValueError):
    pass


class DimensionMismatch(KeyrenderError, ValueError):
    pass


class MissingManifest(KeyrenderError, FileNotFoundError):
    pass


class ConfigError(KeyrenderError, ValueError):
    pass


class StageFailure(KeyrenderError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
