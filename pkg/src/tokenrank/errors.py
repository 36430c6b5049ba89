"""Exception hierarchy shared across the package.

Everything raised on purpose derives from :class:`TokenRankError`, split into
data/format errors (CLI exit code 2) and remote-service errors (exit code 3).
"""


class TokenRankError(Exception):
    """Base class for all errors raised by this package."""


# --- data / format errors ------------------------------------------------

class DimensionMismatch(TokenRankError):
    pass


class DuplicateId(TokenRankError):
    pass


class EmptyCorpus(TokenRankError):
    pass


class TooFewVectors(TokenRankError):
    pass


class IndivisibleDimension(TokenRankError):
    pass


class CodeOutOfRange(TokenRankError):
    pass


class TargetTooLarge(TokenRankError):
    pass


class NonRectangularGrid(TokenRankError):
    pass


class BadMagic(TokenRankError):
    pass


class UnsupportedVersion(TokenRankError):
    pass


class Corrupt(TokenRankError):
    pass


class UnknownId(TokenRankError):
    pass


class IoFailure(TokenRankError):
    pass


class EmptyIndex(TokenRankError):
    pass


class NonFinite(TokenRankError):
    pass


class OutOfRange(TokenRankError):
    pass


class NoPositives(TokenRankError):
    pass


class MissingQrels(TokenRankError):
    pass


class EmptyScores(TokenRankError):
    pass


class MissingAuxImage(TokenRankError):
    pass


class FactorOutOfRange(TokenRankError):
    pass


# --- remote-service errors -----------------------------------------------

class RemoteError(TokenRankError):
    """Base class for errors talking to the scoring/extraction service."""


class Timeout(RemoteError):
    pass


class ServiceError(RemoteError):
    def __init__(self, status: int, message: str):
        super().__init__(f"service returned {status}: {message}")
        self.status = status
        self.message = message


class ProtocolMismatch(RemoteError):
    pass
