"""FARVIEW request parameter layouts, shared by client SDK and server.

params[0] is always the pipeline id; bit 63 of word 0 requests the two-sided
CPU execution path instead of the offloaded pipeline (same wire format
either way, enabling byte-level comparisons). Remaining words per family:

  select family      w1=proj_flags w2=sel_flags
                     w3 = combiner(bit63) | comparator codes (4b each, from
                          bit 0) | column-type codes (2b each, from bit 32)
                     w4.. = one constant per term (terms follow sel_flags
                     bits ascending; at most 8 terms). Float constants are
                     raw binary64 bit patterns; signed ints two's complement.
                     decrypt variants append key(2w) nonce(2w) counter(1w);
                     encrypt variants append five more such words.
  distinct           w1=proj_flags w2=key_flags   (must be equal)
  group_by           w1=key_flags, w2.. = measure words:
                     fn(low byte) | column << 8 | column-type << 16
  regex              w1=proj_flags w2=pattern byte length; the pattern bytes
                     ride in the verb payload
  project            w1=proj_flags w2=mode (0 auto, 1 force full scan,
                     2 force smart addressing)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import RequestError
from .operators.grouping import AggFn, AggregateSpec, Measure
from .operators.predicate import (
    ColumnType,
    Combiner,
    Comparator,
    PredicateTerm,
    SelectionPredicate,
)
from .operators.schema import TableSchema

RCPU_FLAG = 1 << 63
MAX_TERMS = 8

_U64 = (1 << 64) - 1


def _const_to_word(value, ctype: ColumnType) -> int:
    if ctype is ColumnType.FLOAT:
        return struct.unpack("<Q", struct.pack("<d", float(value)))[0]
    return int(value) & _U64


def _word_to_const(word: int, ctype: ColumnType):
    if ctype is ColumnType.FLOAT:
        return struct.unpack("<d", struct.pack("<Q", word))[0]
    if ctype is ColumnType.INT and word >> 63:
        return word - (1 << 64)
    return word


def encode_select_params(pipeline_id: int, proj_flags: int, predicate: SelectionPredicate,
                         decrypt=None, encrypt=None, rcpu: bool = False) -> tuple[int, ...]:
    terms = predicate.terms
    if len(terms) > MAX_TERMS:
        raise RequestError(f"at most {MAX_TERMS} predicate terms, got {len(terms)}")
    cols = [t.column for t in terms]
    if cols != sorted(cols) or len(set(cols)) != len(cols):
        raise RequestError("one term per selected column, ascending order")
    sel_flags = 0
    for c in cols:
        sel_flags |= 1 << c
    w3 = (int(predicate.combiner) & 1) << 63
    for i, t in enumerate(terms):
        w3 |= int(t.comparator) << (4 * i)
        w3 |= int(t.ctype) << (32 + 2 * i)
    words = [pipeline_id | (RCPU_FLAG if rcpu else 0), proj_flags, sel_flags, w3]
    words += [_const_to_word(t.constant, t.ctype) for t in terms]
    for cp in (decrypt, encrypt):
        if cp is not None:
            words += list(cp.to_words())
    return tuple(words)


def decode_select_params(words, schema: TableSchema, n_crypto: int = 0):
    """Returns (proj_flags, SelectionPredicate, [CryptoParams...])."""
    from .operators.crypto import CryptoParams

    if len(words) < 4:
        raise RequestError("select request needs at least 4 param words")
    proj_flags, sel_flags, w3 = words[1], words[2], words[3]
    cols = schema.flag_columns(sel_flags)
    if not cols:
        raise RequestError("selection flags name no columns")
    if len(cols) > MAX_TERMS:
        raise RequestError(f"at most {MAX_TERMS} predicate terms, got {len(cols)}")
    if not proj_flags:
        raise RequestError("projection flags name no columns")
    schema.flag_columns(proj_flags)
    expected = 4 + len(cols) + 5 * n_crypto
    if len(words) != expected:
        raise RequestError(f"select request wants {expected} param words, got {len(words)}")
    combiner = Combiner((w3 >> 63) & 1)
    terms = []
    for i, col in enumerate(cols):
        code = (w3 >> (4 * i)) & 0xF
        try:
            cmp_ = Comparator(code)
        except ValueError:
            raise RequestError(f"bad comparator code {code} for term {i}") from None
        ctype = ColumnType((w3 >> (32 + 2 * i)) & 0x3)
        terms.append(PredicateTerm(col, cmp_, _word_to_const(words[4 + i], ctype), ctype))
    crypto = []
    off = 4 + len(cols)
    for _ in range(n_crypto):
        crypto.append(CryptoParams.from_words(words[off : off + 5]))
        off += 5
    return proj_flags, SelectionPredicate(tuple(terms), combiner), crypto


def encode_distinct_params(pipeline_id: int, proj_flags: int, key_flags: int,
                           rcpu: bool = False) -> tuple[int, ...]:
    return (pipeline_id | (RCPU_FLAG if rcpu else 0), proj_flags, key_flags)


def decode_distinct_params(words, schema: TableSchema) -> tuple[int, int]:
    if len(words) != 3:
        raise RequestError(f"distinct request wants 3 param words, got {len(words)}")
    proj_flags, key_flags = words[1], words[2]
    if not key_flags:
        raise RequestError("distinct needs at least one key column")
    if proj_flags != key_flags:
        raise RequestError("distinct projects exactly its key columns")
    schema.flag_columns(key_flags)
    return proj_flags, key_flags


def encode_group_by_params(pipeline_id: int, spec: AggregateSpec, rcpu: bool = False) -> tuple[int, ...]:
    words = [pipeline_id | (RCPU_FLAG if rcpu else 0), spec.key_flags]
    for m in spec.measures:
        words.append(int(m.fn) | (m.column << 8) | (int(m.ctype) << 16))
    return tuple(words)


def decode_group_by_params(words, schema: TableSchema) -> AggregateSpec:
    if len(words) < 3:
        raise RequestError("group-by request needs a key mask and at least one measure")
    key_flags = words[1]
    if not key_flags:
        raise RequestError("group-by needs at least one key column")
    schema.flag_columns(key_flags)
    measures = []
    for w in words[2:]:
        try:
            fn = AggFn(w & 0xFF)
        except ValueError:
            raise RequestError(f"bad aggregate fn code {w & 0xFF}") from None
        col = (w >> 8) & 0xFF
        if col >= schema.columns:
            raise RequestError(f"measure column {col} beyond schema")
        ctype = ColumnType((w >> 16) & 0x3)
        measures.append(Measure(col, fn, ctype))
    return AggregateSpec(key_flags, tuple(measures))


def encode_regex_params(pipeline_id: int, proj_flags: int, pattern: bytes,
                        rcpu: bool = False) -> tuple[tuple[int, ...], bytes]:
    return (pipeline_id | (RCPU_FLAG if rcpu else 0), proj_flags, len(pattern)), pattern


def decode_regex_params(words, payload: bytes, schema: TableSchema) -> tuple[int, bytes]:
    if len(words) != 3:
        raise RequestError(f"regex request wants 3 param words, got {len(words)}")
    proj_flags, plen = words[1], words[2]
    if not proj_flags:
        raise RequestError("projection flags name no columns")
    schema.flag_columns(proj_flags)
    if plen != len(payload):
        raise RequestError(f"pattern length {plen} disagrees with payload {len(payload)}")
    return proj_flags, payload


def encode_project_params(pipeline_id: int, proj_flags: int, mode: int = 0,
                          rcpu: bool = False) -> tuple[int, ...]:
    return (pipeline_id | (RCPU_FLAG if rcpu else 0), proj_flags, mode)


def decode_project_params(words, schema: TableSchema) -> tuple[int, str | None]:
    if len(words) != 3:
        raise RequestError(f"project request wants 3 param words, got {len(words)}")
    proj_flags, mode = words[1], words[2]
    if not proj_flags:
        raise RequestError("projection flags name no columns")
    schema.flag_columns(proj_flags)
    force = {0: None, 1: "full_scan", 2: "smart"}.get(mode)
    if mode not in (0, 1, 2):
        raise RequestError(f"bad access mode {mode}")
    return proj_flags, force


# ---------------------------------------------------------------------------
# table schema words (ALLOC_TABLE)


def pack_schema_words(column_bytes) -> tuple[int, ...]:
    """Column widths as u16 quarters of u64 param words, count first."""
    words = [len(column_bytes)]
    for i in range(0, len(column_bytes), 4):
        w = 0
        for j, width in enumerate(column_bytes[i : i + 4]):
            if not 0 < width <= 0xFFFF:
                raise RequestError(f"column width {width} does not fit u16")
            w |= width << (16 * j)
        words.append(w)
    return tuple(words)


def unpack_schema_words(words) -> tuple[int, ...]:
    count = words[0]
    widths = []
    for w in words[1:]:
        for j in range(4):
            if len(widths) == count:
                break
            widths.append((w >> (16 * j)) & 0xFFFF)
    if len(widths) != count:
        raise RequestError(f"schema words carry {len(widths)} widths, expected {count}")
    return tuple(widths)


# ---------------------------------------------------------------------------
# response trailer (grouping pipelines only)

TRAILER_MARKER = b"OVERFLOW"


def build_trailer(entries: list[bytes]) -> bytes:
    """main-payload ‖ entries ‖ count(4B) ‖ marker(8B): the count and marker
    trail the entries so a reader can parse backwards from the stream end,
    which is the only direction that works when the main payload length is
    not known up front."""
    return b"".join(entries) + struct.pack("<I", len(entries)) + TRAILER_MARKER


def split_trailer(body: bytes, entry_bytes: int) -> tuple[bytes, list[bytes]]:
    """Split a response body into (main payload, overflow entries)."""
    if len(body) < 12 or body[-8:] != TRAILER_MARKER:
        raise RequestError("response trailer marker missing")
    (count,) = struct.unpack_from("<I", body, len(body) - 12)
    tail = 12 + count * entry_bytes
    if tail > len(body):
        raise RequestError("overflow trailer longer than the response body")
    entries_blob = body[len(body) - tail : len(body) - 12]
    entries = [
        entries_blob[i * entry_bytes : (i + 1) * entry_bytes] for i in range(count)
    ]
    return body[: len(body) - tail], entries
