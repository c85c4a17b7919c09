"""
Exception hierarchy for the reasoning engine.

Errors raised because of bad caller input also derive from ValueError so
plain `except ValueError` handlers keep working.
"""


class L2TError(Exception):
    """Base class for every error raised by this project."""


class ConfigError(L2TError, ValueError):
    """Configuration file, flag or environment variable is invalid."""


# Graph errors

class InvalidTask(L2TError, ValueError):
    """Task description is empty or the instance payload is malformed."""


class UnknownNode(L2TError, KeyError):
    """Node id does not exist in the graph."""


class StaleNode(L2TError, ValueError):
    """A node that already left the present set was labeled again."""


class RootBacktrack(L2TError):
    """Backtrack was requested on the root, which has no parent."""


class IllegalExpansion(L2TError, ValueError):
    """Children were attached to a node not labeled Continue."""


# Backend errors

class BackendError(L2TError):
    """Any failure talking to the language model or embedding provider."""


class TransportError(BackendError):
    """Network failure or 5xx reply; retryable."""


class RateLimited(BackendError):
    """Provider answered 429 after all retries were used."""


class RequestRejected(BackendError):
    """Provider answered with a 4xx other than 429; never retried."""


class MalformedProviderReply(BackendError):
    """Provider reply is missing the fields the client needs."""


class RequestOutOfBounds(L2TError, ValueError):
    """Request parameters fall outside the accepted ranges."""


# Prompt errors

class MissingPlaceholder(L2TError, KeyError):
    """Template rendering was attempted without every binding."""


class Unparseable(L2TError, ValueError):
    """Model reply does not contain the expected label or score."""


class EmptyGeneration(L2TError, ValueError):
    """Model reply contains no thought blocks."""


# Numerical errors

class ShapeError(L2TError, ValueError):
    """Array shapes do not match the model dimensions."""


class NumericalError(L2TError, ArithmeticError):
    """Non-finite value met during a forward or backward pass."""


class EmptyBuffer(L2TError, ValueError):
    """Policy update was requested without any transitions."""
