"""Tuple layout, stream parsing, and per-tuple query annotations.

The parser turns a raw byte stream into fixed-width tuples and stamps each
one with the request's projection/selection/grouping column flags, which is
what downstream operators key their behavior on.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ParseError


@dataclass(frozen=True)
class TableSchema:
    """Fixed-width row layout: per-column byte widths."""

    column_bytes: tuple[int, ...]

    def __post_init__(self):
        if not self.column_bytes or any(w <= 0 for w in self.column_bytes):
            raise ValueError(f"bad column widths {self.column_bytes}")
        if len(self.column_bytes) > 64:
            raise ValueError("at most 64 columns (flags are 64-bit masks)")

    @property
    def tuple_bytes(self) -> int:
        return sum(self.column_bytes)

    @property
    def columns(self) -> int:
        return len(self.column_bytes)

    @property
    def offsets(self) -> tuple[int, ...]:
        out = []
        off = 0
        for w in self.column_bytes:
            out.append(off)
            off += w
        return tuple(out)

    def column_span(self, col: int) -> tuple[int, int]:
        off = self.offsets[col]
        return off, off + self.column_bytes[col]

    def flag_columns(self, flags: int) -> list[int]:
        """Column indices named by a 64-bit flag mask, ascending."""
        cols = [i for i in range(self.columns) if flags >> i & 1]
        if flags >> self.columns:
            raise ParseError(
                f"flag mask 0x{flags:x} names columns beyond the {self.columns}-column schema"
            )
        return cols

    def projected_spans(self, flags: int) -> list[tuple[int, int]]:
        """Byte spans of the flagged columns, adjacent spans merged."""
        spans: list[tuple[int, int]] = []
        for col in self.flag_columns(flags):
            s, e = self.column_span(col)
            if spans and spans[-1][1] == s:
                spans[-1] = (spans[-1][0], e)
            else:
                spans.append((s, e))
        return spans

    def projected_bytes(self, flags: int) -> int:
        return sum(e - s for s, e in self.projected_spans(flags))


class AnnotatedTuple:
    """One parsed row plus the query's column flag annotations."""

    __slots__ = ("raw", "schema", "proj_flags", "sel_flags", "group_flags")

    def __init__(self, raw: bytes, schema: TableSchema, proj_flags: int = 0,
                 sel_flags: int = 0, group_flags: int = 0):
        self.raw = raw
        self.schema = schema
        self.proj_flags = proj_flags
        self.sel_flags = sel_flags
        self.group_flags = group_flags

    def column(self, i: int) -> bytes:
        s, e = self.schema.column_span(i)
        return self.raw[s:e]

    def columns(self) -> tuple[bytes, ...]:
        return tuple(self.column(i) for i in range(self.schema.columns))

    def project(self, spans) -> bytes:
        raw = self.raw
        if len(spans) == 1:
            s, e = spans[0]
            return raw[s:e]
        return b"".join(raw[s:e] for s, e in spans)

    def __eq__(self, other):
        return (
            isinstance(other, AnnotatedTuple)
            and self.raw == other.raw
            and self.proj_flags == other.proj_flags
            and self.sel_flags == other.sel_flags
            and self.group_flags == other.group_flags
        )

    def __hash__(self):
        return hash(self.raw)

    def __repr__(self):
        return f"AnnotatedTuple({self.raw!r})"


def parse_and_project(chunks, schema: TableSchema, proj_flags: int = 0,
                      sel_flags: int = 0, group_flags: int = 0,
                      batch_rows: int = 1024):
    """Parse a byte-chunk stream into batches of annotated tuples.

    Chunk boundaries may fall anywhere; a trailing partial tuple raises
    ParseError once the stream ends. Yields lists of at most batch_rows
    tuples (the stage-queue depth).
    """
    width = schema.tuple_bytes
    carry = b""
    batch: list[AnnotatedTuple] = []
    for chunk in chunks:
        if carry:
            chunk = carry + chunk
            carry = b""
        usable = len(chunk) - len(chunk) % width
        if usable < len(chunk):
            carry = chunk[usable:]
            chunk = chunk[:usable]
        for off in range(0, len(chunk), width):
            batch.append(
                AnnotatedTuple(chunk[off : off + width], schema, proj_flags, sel_flags, group_flags)
            )
            if len(batch) >= batch_rows:
                yield batch
                batch = []
    if carry:
        raise ParseError(f"trailing partial tuple of {len(carry)} bytes (width {width})")
    if batch:
        yield batch


def serialize_tuples(batches) -> bytes:
    """Inverse of parse_and_project: concatenate raw tuple bytes."""
    return b"".join(t.raw for batch in batches for t in batch)
