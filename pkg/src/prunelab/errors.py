"""Exception types raised across the package.

Every error carries a stable ``code`` (the class name) so the CLI can emit a
one-line machine-parsable failure message.
"""


class PrunelabError(Exception):
    @property
    def code(self) -> str:
        return type(self).__name__


class ShapeMismatch(PrunelabError, ValueError):
    pass


class NotPositiveDefinite(PrunelabError, ArithmeticError):
    pass


class NumericallySingular(PrunelabError, ArithmeticError):
    pass


class TokenOutOfRange(PrunelabError, ValueError):
    pass


class SequenceTooLong(PrunelabError, ValueError):
    pass


class StaleTape(PrunelabError, RuntimeError):
    pass


class IndexOutOfRange(PrunelabError, IndexError):
    pass


class FloorViolation(PrunelabError, ValueError):
    pass


class StaleGroup(PrunelabError, RuntimeError):
    pass


class NoEligibleCandidate(PrunelabError, RuntimeError):
    pass


class NonFiniteLoss(PrunelabError, FloatingPointError):
    pass


class CorpusTooSmall(PrunelabError, ValueError):
    pass


class EmptySplit(PrunelabError, ValueError):
    pass


class ConfigError(PrunelabError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class CheckpointError(PrunelabError, ValueError):
    pass


class IoFailure(PrunelabError, OSError):
    pass
