"""Exception hierarchy.

Everything raised on purpose derives from :class:`NarcoError`. The CLI maps
:class:`ValidationError` to exit code 1 and every other ``NarcoError`` to 2.
"""


class NarcoError(Exception):
    pass


class ValidationError(NarcoError, ValueError):
    """Bad input or configuration supplied by the caller."""


class ProviderError(NarcoError):
    """A provider call failed and the retry budget is spent."""


class Timeout(ProviderError):
    pass


class MissingFixture(NarcoError):
    """Replay-strict mode was asked for a request that was never recorded."""

    def __init__(self, digest: str):
        super().__init__(f"no recorded response for request digest {digest}")
        self.digest = digest


class MalformedResponse(NarcoError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class DimensionMismatch(NarcoError, ValueError):
    pass


class VersionMismatch(NarcoError):
    pass


class CorruptPayload(NarcoError):
    pass


class EmptyGraph(NarcoError, ValueError):
    pass


class NonFiniteLoss(NarcoError, FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss!r}) at step {step}")
        self.step = step
        self.loss = loss
