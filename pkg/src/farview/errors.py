"""Exception hierarchy and wire status codes.

Every error that can cross the wire has a numeric status code; the server
maps raised exceptions onto these codes and the client maps them back.
"""

from __future__ import annotations


class FarviewError(Exception):
    """Base class for all errors raised by this package."""

    status = 1


class ProtocolError(FarviewError):
    """Malformed or semantically invalid wire data (bad magic, kind, dup seq)."""

    status = 2


class FramingError(ProtocolError):
    """Truncated or size-inconsistent frame."""

    status = 3


class IncompleteMessageError(ProtocolError):
    """Reassembly attempted while packets are still missing."""

    status = 4


class WouldBlock(FarviewError):
    """Credit exhausted; the caller must wait for a credit grant."""

    status = 5


class AllocationError(FarviewError):
    """Out of physical frames, or invalid allocation arguments."""

    status = 6


class TranslationFault(FarviewError):
    """Virtual address not mapped by any page-table entry."""

    status = 7


class AccessError(FarviewError):
    """Queue pair is not in the owner set of the touched pages/table."""

    status = 8


class BoundsError(FarviewError):
    """Byte range escapes the table or channel extent."""

    status = 9


class RegionsExhaustedError(FarviewError):
    """All dynamic regions are bound; connection refused."""

    status = 10


class RegionBusyError(FarviewError):
    """Region already has an in-flight request (or load attempted while busy)."""

    status = 11


class UnknownPipelineError(FarviewError):
    """pipeline_id not present in the registry."""

    status = 12


class RequestError(FarviewError):
    """Request parameters fail validation against the loaded pipeline schema."""

    status = 13


class PatternError(RequestError):
    """Regular expression does not compile under the supported subset."""

    status = 14


class RequestAborted(FarviewError):
    """In-flight request torn down (region released or server shutdown)."""

    status = 15


class ParseError(FarviewError):
    """Input stream is not a whole number of tuples."""

    status = 16


class RcpuDisabledError(FarviewError):
    """Two-sided CPU execution requested but disabled in the server config."""

    status = 17


STATUS_OK = 0

_STATUS_TO_EXC = {
    cls.status: cls
    for cls in (
        FarviewError,
        ProtocolError,
        FramingError,
        IncompleteMessageError,
        WouldBlock,
        AllocationError,
        TranslationFault,
        AccessError,
        BoundsError,
        RegionsExhaustedError,
        RegionBusyError,
        UnknownPipelineError,
        RequestError,
        PatternError,
        RequestAborted,
        ParseError,
        RcpuDisabledError,
    )
}


def error_for_status(status: int, message: str = "") -> FarviewError:
    """Reconstruct the exception class for a wire status code."""
    cls = _STATUS_TO_EXC.get(status, FarviewError)
    return cls(message or f"remote error (status {status})")
