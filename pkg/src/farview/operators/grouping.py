"""Grouping operators: DISTINCT and GROUP BY with aggregation.

Both hash the grouping key into a CuckooTableSet. Table updates become
visible to lookups only after `depth` further tuples (the pipelined-update
hazard); the LRU shift register, holding exactly the `depth` most recent
keys, answers for those in-flight entries, so no duplicate ever escapes.

Keys whose insert exceeds the eviction bound go to the overflow buffer and
are reconciled client-side: DISTINCT overflow entries are bare keys (possibly
duplicated); GROUP BY overflow entries are frozen partial-aggregate rows that
merge additively with the main results.

Aggregate wire format per result row, after the key bytes:
    COUNT -> u64 | MIN/MAX -> 8B per column type | SUM -> i64/u64 (saturating)
    AVG   -> raw (SUM word, COUNT word) pair, divided only at the very end
followed by one u64 flags word (bit i set = measure i saturated).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from ..errors import RequestError
from .hashing import CuckooTableSet, LruShiftRegister, OverflowBuffer
from .predicate import ColumnType
from .schema import TableSchema

I64_MAX = (1 << 63) - 1
I64_MIN = -(1 << 63)
U64_MAX = (1 << 64) - 1


class AggFn(IntEnum):
    COUNT = 1
    MIN = 2
    MAX = 3
    SUM = 4
    AVG = 5


@dataclass(frozen=True)
class Measure:
    column: int
    fn: AggFn
    ctype: ColumnType = ColumnType.INT

    @property
    def wire_words(self) -> int:
        return 2 if self.fn is AggFn.AVG else 1


@dataclass(frozen=True)
class AggregateSpec:
    key_flags: int
    measures: tuple[Measure, ...]

    def __post_init__(self):
        if not self.key_flags:
            raise RequestError("group-by needs at least one key column")

    def row_bytes(self, key_bytes: int) -> int:
        return key_bytes + 8 * sum(m.wire_words for m in self.measures) + 8


def _value_decoder(schema: TableSchema, m: Measure):
    off, end = schema.column_span(m.column)
    if m.ctype is ColumnType.FLOAT:
        unpack = struct.Struct("<d").unpack_from
        return lambda raw: unpack(raw, off)[0]
    signed = m.ctype is ColumnType.INT
    return lambda raw: int.from_bytes(raw[off:end], "little", signed=signed)


def _sat_add(a: int, b: int, ctype: ColumnType) -> tuple[int, bool]:
    s = a + b
    if ctype is ColumnType.UINT:
        if s > U64_MAX:
            return U64_MAX, True
        if s < 0:
            return 0, True
        return s, False
    if s > I64_MAX:
        return I64_MAX, True
    if s < I64_MIN:
        return I64_MIN, True
    return s, False


class GroupState:
    """Running aggregates for one group; shared by cache and table slots so
    updates are write-through by construction."""

    __slots__ = ("key", "accs", "sat")

    def __init__(self, key: bytes, measures: tuple[Measure, ...]):
        self.key = key
        self.accs: list = []
        self.sat = 0
        for m in measures:
            if m.fn is AggFn.COUNT:
                self.accs.append(0)
            elif m.fn is AggFn.SUM:
                self.accs.append(0.0 if m.ctype is ColumnType.FLOAT else 0)
            elif m.fn is AggFn.AVG:
                self.accs.append([0.0 if m.ctype is ColumnType.FLOAT else 0, 0])
            else:  # MIN / MAX
                self.accs.append(None)

    def update(self, measures, values) -> None:
        for i, (m, v) in enumerate(zip(measures, values)):
            fn = m.fn
            if fn is AggFn.COUNT:
                self.accs[i] += 1
            elif fn is AggFn.SUM:
                if m.ctype is ColumnType.FLOAT:
                    self.accs[i] += v
                else:
                    s, sat = _sat_add(self.accs[i], v, m.ctype)
                    self.accs[i] = s
                    if sat:
                        self.sat |= 1 << i
            elif fn is AggFn.AVG:
                acc = self.accs[i]
                if m.ctype is ColumnType.FLOAT:
                    acc[0] += v
                else:
                    s, sat = _sat_add(acc[0], v, m.ctype)
                    acc[0] = s
                    if sat:
                        self.sat |= 1 << i
                acc[1] += 1
            elif fn is AggFn.MIN:
                if self.accs[i] is None or v < self.accs[i]:
                    self.accs[i] = v
            else:  # MAX
                if self.accs[i] is None or v > self.accs[i]:
                    self.accs[i] = v

    def freeze(self) -> "GroupState":
        clone = GroupState.__new__(GroupState)
        clone.key = self.key
        clone.sat = self.sat
        clone.accs = [list(a) if isinstance(a, list) else a for a in self.accs]
        return clone


def _pack_word(value, ctype: ColumnType) -> bytes:
    if ctype is ColumnType.FLOAT:
        return struct.pack("<d", float(value))
    if ctype is ColumnType.INT:
        return struct.pack("<q", value)
    return struct.pack("<Q", value)


def _unpack_word(data: bytes, off: int, ctype: ColumnType):
    if ctype is ColumnType.FLOAT:
        return struct.unpack_from("<d", data, off)[0]
    if ctype is ColumnType.INT:
        return struct.unpack_from("<q", data, off)[0]
    return struct.unpack_from("<Q", data, off)[0]


def encode_group_row(state: GroupState, measures: tuple[Measure, ...]) -> bytes:
    out = bytearray(state.key)
    for m, acc in zip(measures, state.accs):
        if m.fn is AggFn.COUNT:
            out += struct.pack("<Q", acc)
        elif m.fn is AggFn.SUM:
            out += _pack_word(acc, m.ctype)
        elif m.fn is AggFn.AVG:
            out += _pack_word(acc[0], m.ctype)
            out += struct.pack("<Q", acc[1])
        else:
            out += _pack_word(acc, m.ctype)
    out += struct.pack("<Q", state.sat)
    return bytes(out)


def decode_group_row(data: bytes, key_bytes: int, measures: tuple[Measure, ...]) -> GroupState:
    state = GroupState(data[:key_bytes], measures)
    off = key_bytes
    for i, m in enumerate(measures):
        if m.fn is AggFn.COUNT:
            state.accs[i] = struct.unpack_from("<Q", data, off)[0]
        elif m.fn is AggFn.AVG:
            state.accs[i] = [
                _unpack_word(data, off, m.ctype),
                struct.unpack_from("<Q", data, off + 8)[0],
            ]
            off += 8
        else:
            state.accs[i] = _unpack_word(data, off, m.ctype)
        off += 8
    state.sat = struct.unpack_from("<Q", data, off)[0]
    return state


def merge_group_states(a: GroupState, b: GroupState, measures: tuple[Measure, ...]) -> GroupState:
    """Combine two partial aggregates of the same group (client-side merge)."""
    out = a.freeze()
    for i, m in enumerate(measures):
        fn = m.fn
        if fn is AggFn.COUNT:
            out.accs[i] += b.accs[i]
        elif fn is AggFn.SUM:
            if m.ctype is ColumnType.FLOAT:
                out.accs[i] += b.accs[i]
            else:
                s, sat = _sat_add(out.accs[i], b.accs[i], m.ctype)
                out.accs[i] = s
                if sat:
                    out.sat |= 1 << i
        elif fn is AggFn.AVG:
            if m.ctype is ColumnType.FLOAT:
                out.accs[i][0] += b.accs[i][0]
            else:
                s, sat = _sat_add(out.accs[i][0], b.accs[i][0], m.ctype)
                out.accs[i][0] = s
                if sat:
                    out.sat |= 1 << i
            out.accs[i][1] += b.accs[i][1]
        elif fn is AggFn.MIN:
            if b.accs[i] is not None and (out.accs[i] is None or b.accs[i] < out.accs[i]):
                out.accs[i] = b.accs[i]
        else:
            if b.accs[i] is not None and (out.accs[i] is None or b.accs[i] > out.accs[i]):
                out.accs[i] = b.accs[i]
    out.sat |= b.sat
    return out


def finalize_group(state: GroupState, measures: tuple[Measure, ...]) -> tuple:
    """Resolve AVG accumulators into binary64 quotients; others pass through."""
    out = []
    for m, acc in zip(measures, state.accs):
        if m.fn is AggFn.AVG:
            out.append(float(acc[0]) / acc[1] if acc[1] else float("nan"))
        else:
            out.append(acc)
    return tuple(out)


def _key_extractor(schema: TableSchema, key_flags: int):
    spans = schema.projected_spans(key_flags)
    if len(spans) == 1:
        s, e = spans[0]
        return lambda raw: raw[s:e]
    return lambda raw: b"".join(raw[s:e] for s, e in spans)


def distinct_stream(batches, key_flags: int, cuckoo: CuckooTableSet,
                    cache: LruShiftRegister, schema: TableSchema):
    """Drop tuples whose key was seen before.

    Returns (generator of batches, OverflowBuffer). Keys that fail table
    placement land in the overflow buffer (never on the main stream) and get
    deduplicated client-side, so main-stream keys are always unique.
    """
    overflow = OverflowBuffer()
    extract = _key_extractor(schema, key_flags)
    latency = cache.depth

    def gen():
        seq = 0
        for batch in batches:
            out = []
            for t in batch:
                key = extract(t.raw)
                if cache.lookup(key) is not None:
                    seq += 1
                    continue
                if cuckoo.lookup(key, now=seq, latency=latency) is not None:
                    cache.insert(key, True)
                    seq += 1
                    continue
                if cuckoo.insert(key, True, seq):
                    out.append(t)
                else:
                    overflow.append(key)
                cache.insert(key, True)
                seq += 1
            if out:
                yield out

    return gen(), overflow


def group_by_stream(batches, spec: AggregateSpec, cuckoo: CuckooTableSet,
                    cache: LruShiftRegister, schema: TableSchema):
    """Consume the whole input, then emit one row per resident group in
    first-occurrence order (the insertion queue). Returns
    (list of GroupState, OverflowBuffer)."""
    extract = _key_extractor(schema, spec.key_flags)
    decoders = [_value_decoder(schema, m) for m in spec.measures]
    measures = spec.measures
    overflow = OverflowBuffer()
    queue: list[GroupState] = []
    latency = cache.depth
    seq = 0
    for batch in batches:
        for t in batch:
            raw = t.raw
            key = extract(raw)
            values = [d(raw) for d in decoders]
            state = cache.lookup(key)
            if state is None:
                slot = cuckoo.lookup(key, now=seq, latency=latency)
                if slot is not None:
                    state = slot.value
                    cache.insert(key, state)
            if state is not None:
                state.update(measures, values)
                seq += 1
                continue
            state = GroupState(key, measures)
            state.update(measures, values)
            if cuckoo.insert(key, state, seq):
                queue.append(state)
                cache.insert(key, state)
            else:
                # single-row partial; later rows of this group overflow too
                overflow.append(state.freeze())
            seq += 1
    return queue, overflow
