"""Predicate selection: comparator terms against query constants, scalar and
vectorized (multi-lane) filtering, and the lane-count rule.

A selection request closes over its constants at load time, the software
analog of wiring the comparison into the datapath: build_evaluator compiles
the term list into one callable reused for every tuple.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from ..errors import RequestError
from .schema import AnnotatedTuple, TableSchema


class Comparator(IntEnum):
    LT = 1
    LE = 2
    EQ = 3
    GE = 4
    GT = 5
    NE = 6


class ColumnType(IntEnum):
    UINT = 0
    INT = 1
    FLOAT = 2


class Combiner(IntEnum):
    AND = 0
    OR = 1


_OPS = {
    Comparator.LT: lambda a, b: a < b,
    Comparator.LE: lambda a, b: a <= b,
    Comparator.EQ: lambda a, b: a == b,
    Comparator.GE: lambda a, b: a >= b,
    Comparator.GT: lambda a, b: a > b,
    Comparator.NE: lambda a, b: a != b,
}


@dataclass(frozen=True)
class PredicateTerm:
    column: int
    comparator: Comparator
    constant: int | float
    ctype: ColumnType = ColumnType.UINT


@dataclass(frozen=True)
class SelectionPredicate:
    terms: tuple[PredicateTerm, ...]
    combiner: Combiner = Combiner.AND

    def __post_init__(self):
        if not self.terms:
            raise RequestError("selection predicate needs at least one term")


def _decoder(schema: TableSchema, term: PredicateTerm):
    off, end = schema.column_span(term.column)
    width = end - off
    if term.ctype is ColumnType.FLOAT:
        if width != 8:
            raise RequestError(f"float column {term.column} must be 8 bytes, is {width}")
        unpack = struct.Struct("<d").unpack_from
        return lambda raw: unpack(raw, off)[0]
    signed = term.ctype is ColumnType.INT
    return lambda raw: int.from_bytes(raw[off:end], "little", signed=signed)


def build_evaluator(schema: TableSchema, p: SelectionPredicate):
    """Compile the predicate into raw-bytes -> bool.

    Float comparisons follow IEEE-754: NaN compares false under every
    comparator except NE.
    """
    parts = []
    for term in p.terms:
        decode = _decoder(schema, term)
        op = _OPS[term.comparator]
        const = term.constant
        parts.append(lambda raw, decode=decode, op=op, const=const: op(decode(raw), const))
    if len(parts) == 1:
        return parts[0]
    if p.combiner is Combiner.AND:
        return lambda raw: all(f(raw) for f in parts)
    return lambda raw: any(f(raw) for f in parts)


def eval_predicate(t: AnnotatedTuple, p: SelectionPredicate) -> bool:
    return build_evaluator(t.schema, p)(t.raw)


def select_stream(batches, p: SelectionPredicate, schema: TableSchema):
    """Filter annotated-tuple batches, preserving order."""
    evaluate = build_evaluator(schema, p)
    for batch in batches:
        out = [t for t in batch if evaluate(t.raw)]
        if out:
            yield out


def vectorized_select(batches, p: SelectionPredicate, schema: TableSchema, lanes: int):
    """Lane-parallel filter: tuples dispatch round-robin to `lanes` logical
    selection operators and the survivors re-merge in input-index order, so
    the output is identical to select_stream for any lane count."""
    if lanes < 1:
        raise RequestError(f"lane count must be >= 1, got {lanes}")
    if lanes == 1:
        yield from select_stream(batches, p, schema)
        return
    evaluate = build_evaluator(schema, p)
    for batch in batches:
        # dispatch: lane l sees tuples l, l+lanes, l+2*lanes, ...
        lane_verdicts = [
            [evaluate(t.raw) for t in batch[l::lanes]] for l in range(lanes)
        ]
        # order-restoring merge: walk input indices, polling each lane's
        # verdict queue in round-robin order
        out = []
        for i, t in enumerate(batch):
            if lane_verdicts[i % lanes][i // lanes]:
                out.append(t)
        if out:
            yield out


def compute_lanes(channels: int, tuple_bytes: int) -> int:
    """Vector width: how many tuples the striped channel words deliver per
    cycle, floored at one."""
    if tuple_bytes <= 0:
        raise RequestError(f"tuple width must be positive, got {tuple_bytes}")
    return max(1, (channels * 64) // tuple_bytes)
