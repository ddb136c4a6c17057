"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class TraplineError(Exception):
    """Base class for all errors raised by this package."""


# domain
class MalformedStamp(TraplineError, ValueError):
    pass


class DegenerateBox(TraplineError, ValueError):
    pass


class UnknownClass(TraplineError, LookupError):
    def __init__(self, label: str):
        super().__init__(f"unknown class label: {label!r}")
        self.label = label


# ingest
class RootNotFound(TraplineError, FileNotFoundError):
    pass


class EmptyManifest(TraplineError, ValueError):
    pass


class SchemaViolation(TraplineError, ValueError):
    pass


# endpoints
class EndpointError(TraplineError):
    """Failure talking to a remote model endpoint."""

    retriable = True


class EndpointUnreachable(EndpointError):
    pass


class EndpointMalformedResponse(EndpointError):
    pass


class EndpointTimeout(EndpointError, TimeoutError):
    pass


class EmptyResponse(EndpointError):
    pass


class EmptyInput(TraplineError, ValueError):
    pass


# annotate
class RenderFailure(TraplineError):
    pass


# rag / qa
class InvalidChunkParams(TraplineError, ValueError):
    pass


class EmbedderUnavailable(EndpointError):
    pass


class EmptyText(TraplineError, ValueError):
    pass


class EmptyCorpus(TraplineError, ValueError):
    pass


class DimensionMismatch(TraplineError, ValueError):
    pass


class AnswererUnavailable(EndpointError):
    pass


# metrics / report
class NoGroundTruth(TraplineError, ValueError):
    pass


class NoFacts(TraplineError, ValueError):
    pass


# app
class FatalConfig(TraplineError):
    pass
