"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map error classes to
distinct process exit statuses.
"""


class AdaptExpError(Exception):
    exit_code = 1


class ConfigError(AdaptExpError, ValueError):
    exit_code = 2


# tensor files
class MalformedHeader(AdaptExpError, ValueError):
    exit_code = 3


class UnsupportedDtype(AdaptExpError, ValueError):
    exit_code = 3


class NonFiniteValue(AdaptExpError, ValueError):
    exit_code = 3

    def __init__(self, index, value=None):
        self.index = index
        self.value = value
        super().__init__(f"non-finite value {value!r} at flat index {index}")


class VersionMismatch(AdaptExpError, ValueError):
    exit_code = 3


class TruncatedPayload(AdaptExpError, ValueError):
    exit_code = 3


class TraceIOError(AdaptExpError, OSError):
    exit_code = 4


# numerics
class DegenerateTensor(AdaptExpError, ValueError):
    exit_code = 5


class BaseOutOfRange(AdaptExpError, ValueError):
    exit_code = 5


class ZeroReference(AdaptExpError, ValueError):
    exit_code = 5


class NonPositiveMean(AdaptExpError, ValueError):
    exit_code = 5


class BitwidthMismatch(AdaptExpError, ValueError):
    exit_code = 5


class ShapeMismatch(AdaptExpError, ValueError):
    exit_code = 5


# inference / search orchestration
class MissingParams(AdaptExpError, KeyError):
    exit_code = 6

    def __str__(self):
        return Exception.__str__(self)


class EmptySplit(AdaptExpError, ValueError):
    exit_code = 6


class EvaluatorFailure(AdaptExpError, RuntimeError):
    exit_code = 7


class BaseMismatch(AdaptExpError, ValueError):
    exit_code = 5
