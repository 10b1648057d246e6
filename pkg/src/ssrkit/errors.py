"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class SSRError(Exception):
    exit_code = 1


class ShapeError(SSRError, ValueError):
    exit_code = 2


class IncompatibleModelsError(ShapeError):
    """Parameter maps disagree on names or shapes."""


class NonFiniteError(SSRError, ValueError):
    exit_code = 4


class SVDConvergenceError(SSRError, ArithmeticError):
    exit_code = 4


class ZeroTaskVectorError(SSRError, ValueError):
    exit_code = 4


class DivergenceError(NonFiniteError):
    """Training produced a NaN/Inf loss."""


class CheckpointError(SSRError):
    exit_code = 3


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class OffsetOverrunError(CheckpointError):
    pass


class MalformedHeaderError(CheckpointError):
    pass


class NonFinitePayloadError(CheckpointError, NonFiniteError):
    exit_code = 3


class StageError(SSRError):
    exit_code = 5

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class UsageError(SSRError):
    exit_code = 6
