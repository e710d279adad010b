"""Client SDK: the node's data API for remote computing nodes.

openConnection / allocTableMem / tableRead / tableWrite give plain remote
buffer-pool access; farView sends the operator-invoking verb and unpacks the
streamed response, including the software half of the grouping operators:
deduplicating and merging the overflow trailer entries into the main rows.

A QPair is single-logical-caller; independent QPairs may be driven from
concurrent callers. The client keeps the table catalog locally (an FTable
holds the schema and the server-assigned base address).
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

from . import params as P
from .errors import FarviewError, RequestError, error_for_status
from .operators.crypto import CryptoParams, aes_ctr_transform
from .operators.grouping import (
    AggregateSpec,
    GroupState,
    decode_group_row,
    finalize_group,
    merge_group_states,
)
from .operators.predicate import (
    ColumnType,
    Combiner,
    Comparator,
    PredicateTerm,
    SelectionPredicate,
)
from .operators.schema import TableSchema
from .regions import PIPELINE_IDS
from .wire import PacketConn, Verb, VerbKind, decode_verb, DEFAULT_MTU


@dataclass
class FTable:
    """Client-side catalog entry for one remote table."""

    name: str
    size: int
    tuple_bytes: int
    column_bytes: tuple[int, ...]
    base_vaddr: int | None = None

    @property
    def schema(self) -> TableSchema:
        return TableSchema(tuple(self.column_bytes))

    @property
    def rows(self) -> int:
        return self.size // self.tuple_bytes


@dataclass
class QueryStats:
    bytes_on_wire: int = 0
    packets: int = 0
    server_rows_emitted: int = 0


@dataclass
class QueryResult:
    rows: list
    overflow_merged: bool
    stats: QueryStats = field(default_factory=QueryStats)


class QPair:
    """One open connection to a node; holds the assigned region and window."""

    def __init__(self, conn: PacketConn, qpair_id: int, region_id: int,
                 node_address: tuple[str, int], mtu: int, channels: int):
        self.conn = conn
        self.qpair_id = qpair_id
        self.region_id = region_id
        self.node_address = node_address
        self.mtu = mtu
        self.channels = channels
        self.open = True
        self.loaded_pipeline: int | None = None

    @property
    def credits(self):
        return self.conn.credits

    def _require_open(self):
        if not self.open:
            raise FarviewError("connection is closed")

    def request(self, verb: Verb) -> tuple[bytes, QueryStats]:
        """Send one verb, return (response body, transfer stats). Raises the
        mapped exception for error statuses and aborted responses."""
        self._require_open()
        verb.qpair = self.qpair_id
        verb.msg_id = self.conn.next_msg_id()
        self.conn.send_verb(verb, mtu=self.mtu)
        while True:
            msg_id, payload = self.conn.recv_message()
            if msg_id != verb.msg_id:
                continue  # stale message from an aborted exchange
            if payload is None:
                pkt = self.conn.reassembler.abort_packet(self.qpair_id, msg_id)
                status, detail = _abort_info(pkt)
                raise error_for_status(status, detail)
            (status,) = struct.unpack_from("<I", payload, 0)
            body = payload[4:]
            if status != 0:
                raise error_for_status(status, body.decode(errors="replace"))
            stats = QueryStats(
                bytes_on_wire=len(payload),
                packets=self.conn.reassembler.last_message_packets,
            )
            return body, stats


def _abort_info(pkt) -> tuple[int, str]:
    if pkt is None or len(pkt.payload) < 4:
        return FarviewError.status, "request aborted"
    (status,) = struct.unpack_from("<I", pkt.payload, 0)
    return status, pkt.payload[4:].decode(errors="replace")


# ---------------------------------------------------------------------------
# connection & table management


def openConnection(node: str | tuple[str, int], timeout: float = 30.0) -> QPair:
    """Open a connection; the node assigns a queue pair and a dynamic region."""
    if isinstance(node, str):
        host, _, port = node.rpartition(":")
        node = (host, int(port))
    sock = socket.create_connection(node, timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    conn = PacketConn(sock)
    msg_id = conn.send_verb(Verb(kind=VerbKind.OPEN_CONN))
    got_id, payload = conn.recv_message()
    if payload is None:
        raise FarviewError("connection handshake aborted")
    (status,) = struct.unpack_from("<I", payload, 0)
    if status != 0:
        conn.close()
        raise error_for_status(status, payload[4:].decode(errors="replace"))
    qpair_id, region_id, mtu, window, channels = struct.unpack_from("<IIIII", payload, 4)
    conn.qpair = qpair_id
    conn.reset_window(window)
    return QPair(conn, qpair_id, region_id, node, mtu, channels)


def closeConnection(qp: QPair) -> None:
    if not qp.open:
        return
    try:
        qp.request(Verb(kind=VerbKind.CLOSE_CONN))
    except (FarviewError, ConnectionError, OSError):
        pass
    qp.open = False
    qp.conn.close()


def allocTableMem(qp: QPair, ft: FTable) -> None:
    if ft.size <= 0:
        raise RequestError(f"table size must be positive, got {ft.size}")
    params = (ft.tuple_bytes, *P.pack_schema_words(ft.column_bytes))
    body, _ = qp.request(
        Verb(kind=VerbKind.ALLOC_TABLE, length=ft.size, params=params)
    )
    (ft.base_vaddr,) = struct.unpack("<Q", body)


def freeTableMem(qp: QPair, ft: FTable) -> None:
    if ft.base_vaddr is None:
        raise RequestError(f"table {ft.name!r} was never allocated")
    qp.request(Verb(kind=VerbKind.FREE_TABLE, vaddr=ft.base_vaddr))
    ft.base_vaddr = None


def tableWrite(qp: QPair, ft: FTable, data: bytes, offset: int = 0) -> None:
    if ft.base_vaddr is None:
        raise RequestError(f"table {ft.name!r} is not allocated")
    if offset + len(data) > ft.size:
        raise RequestError(f"write of {len(data)}B at +{offset} exceeds table size {ft.size}")
    qp.request(
        Verb(kind=VerbKind.RDMA_WRITE, vaddr=ft.base_vaddr + offset,
             length=len(data), payload=data)
    )


def tableRead(qp: QPair, ft: FTable, offset: int = 0, length: int | None = None) -> bytes:
    if ft.base_vaddr is None:
        raise RequestError(f"table {ft.name!r} is not allocated")
    if length is None:
        length = ft.size - offset
    body, _ = qp.request(
        Verb(kind=VerbKind.RDMA_READ, vaddr=ft.base_vaddr + offset, length=length)
    )
    return body


# ---------------------------------------------------------------------------
# offloaded queries


def farView(qp: QPair, ft: FTable, params, payload: bytes = b"",
            length: int | None = None) -> QueryResult:
    """Invoke the loaded pipeline over the table and unpack the response.

    params is the raw 64-bit word array (see the params module for layouts);
    the SDK tracks the loaded pipeline per connection and the node reloads
    only when params[0] names a different one.
    """
    if ft.base_vaddr is None:
        raise RequestError(f"table {ft.name!r} is not allocated")
    pipeline_id = params[0] & ~P.RCPU_FLAG
    body, stats = qp.request(
        Verb(kind=VerbKind.FARVIEW, vaddr=ft.base_vaddr,
             length=ft.size if length is None else length,
             params=tuple(params), payload=payload)
    )
    if not params[0] & P.RCPU_FLAG:
        qp.loaded_pipeline = pipeline_id
    return unpack_response(pipeline_id, body, ft.schema, params, stats)


def unpack_response(pipeline_id: int, body: bytes, schema: TableSchema,
                    params, stats: QueryStats) -> QueryResult:
    from .regions import BUILTIN_PIPELINES

    spec = BUILTIN_PIPELINES[pipeline_id]
    family = spec.family
    if family in ("select", "project", "regex"):
        if family == "select":
            n_crypto = int(spec.decrypt) + int(spec.encrypt)
            proj_flags, _, crypto = P.decode_select_params(params, schema, n_crypto)
            if spec.encrypt:
                body = aes_ctr_transform(body, crypto[-1])
        else:
            proj_flags = params[1]
        widths = [schema.column_bytes[c] for c in schema.flag_columns(proj_flags)]
        rows = unpack_rows(body, widths)
        stats.server_rows_emitted = len(rows)
        return QueryResult(rows, overflow_merged=False, stats=stats)

    if family == "distinct":
        proj_flags, key_flags = P.decode_distinct_params(params, schema)
        widths = [schema.column_bytes[c] for c in schema.flag_columns(key_flags)]
        key_bytes = sum(widths)
        main, entries = P.split_trailer(body, key_bytes)
        main_keys = [main[i : i + key_bytes] for i in range(0, len(main), key_bytes)]
        stats.server_rows_emitted = len(main_keys)
        merged = dedup_overflow(main_keys, entries, "distinct")
        rows = [_split_columns(k, widths) for k in merged]
        return QueryResult(rows, overflow_merged=True, stats=stats)

    if family == "group_by":
        agg = P.decode_group_by_params(params, schema)
        widths = [schema.column_bytes[c] for c in schema.flag_columns(agg.key_flags)]
        key_bytes = sum(widths)
        row_bytes = agg.row_bytes(key_bytes)
        main, entries = P.split_trailer(body, row_bytes)
        main_states = [
            decode_group_row(main[i : i + row_bytes], key_bytes, agg.measures)
            for i in range(0, len(main), row_bytes)
        ]
        stats.server_rows_emitted = len(main_states)
        overflow_states = [decode_group_row(e, key_bytes, agg.measures) for e in entries]
        merged = dedup_overflow(main_states, overflow_states, "group_by", agg)
        rows = [
            _split_columns(st.key, widths) + finalize_group(st, agg.measures)
            for st in merged
        ]
        return QueryResult(rows, overflow_merged=True, stats=stats)

    raise RequestError(f"cannot unpack pipeline family {family}")


def dedup_overflow(main_rows, overflow_entries, mode: str,
                   agg: AggregateSpec | None = None):
    """Software half of the grouping operators: restore exact set/aggregate
    semantics from the main stream plus spilled entries."""
    if mode == "distinct":
        seen = dict.fromkeys(main_rows)
        for key in overflow_entries:
            if key not in seen:
                seen[key] = None
        return list(seen)
    if mode == "group_by":
        if agg is None:
            raise RequestError("group_by merge needs the aggregate spec")
        order: list[bytes] = []
        by_key: dict[bytes, GroupState] = {}
        for st in main_rows:
            by_key[st.key] = st
            order.append(st.key)
        for st in overflow_entries:
            if st.key in by_key:
                by_key[st.key] = merge_group_states(by_key[st.key], st, agg.measures)
            else:
                by_key[st.key] = st
                order.append(st.key)
        return [by_key[k] for k in order]
    raise RequestError(f"unknown merge mode {mode!r}")


def unpack_rows(body: bytes, widths) -> list[tuple[bytes, ...]]:
    row_bytes = sum(widths)
    if row_bytes == 0 or len(body) % row_bytes:
        if body:
            raise RequestError(
                f"response body of {len(body)}B is not a whole number of {row_bytes}B rows"
            )
        return []
    return [
        _split_columns(body[i : i + row_bytes], widths)
        for i in range(0, len(body), row_bytes)
    ]


def _split_columns(row: bytes, widths) -> tuple[bytes, ...]:
    out = []
    off = 0
    for w in widths:
        out.append(row[off : off + w])
        off += w
    return tuple(out)


# ---------------------------------------------------------------------------
# typed helpers


def select(qp: QPair, ft: FTable, projection_flags: int, selection_flags: int,
           predicate: float, vectorized: bool = False, rcpu: bool = False) -> QueryResult:
    """The real-number selection helper: keep rows whose flagged column
    exceeds the predicate constant, returning the projected columns."""
    cols = ft.schema.flag_columns(selection_flags)
    if len(cols) != 1:
        raise RequestError("the select helper takes exactly one selection column")
    pred = SelectionPredicate(
        (PredicateTerm(cols[0], Comparator.GT, float(predicate), ColumnType.FLOAT),),
        Combiner.AND,
    )
    return select_where(qp, ft, projection_flags, pred, vectorized=vectorized, rcpu=rcpu)


def select_where(qp: QPair, ft: FTable, projection_flags: int,
                 predicate: SelectionPredicate, vectorized: bool = False,
                 rcpu: bool = False, decrypt: CryptoParams | None = None,
                 encrypt: CryptoParams | None = None) -> QueryResult:
    """General predicate selection over the wire."""
    if decrypt is None and encrypt is not None:
        raise RequestError("response encryption requires the decrypt pipeline")
    if decrypt is None:
        name = "select"
    elif encrypt is None:
        name = "decrypt_select"
    else:
        name = "decrypt_select_encrypt"
    if vectorized:
        name += "_vec"
    params = P.encode_select_params(
        PIPELINE_IDS[name], projection_flags, predicate,
        decrypt=decrypt, encrypt=encrypt, rcpu=rcpu,
    )
    return farView(qp, ft, params)


def distinct(qp: QPair, ft: FTable, key_flags: int, vectorized: bool = False,
             rcpu: bool = False) -> QueryResult:
    name = "distinct_vec" if vectorized else "distinct"
    params = P.encode_distinct_params(PIPELINE_IDS[name], key_flags, key_flags, rcpu=rcpu)
    return farView(qp, ft, params)


def group_by(qp: QPair, ft: FTable, spec: AggregateSpec, vectorized: bool = False,
             rcpu: bool = False) -> QueryResult:
    name = "group_by_vec" if vectorized else "group_by"
    params = P.encode_group_by_params(PIPELINE_IDS[name], spec, rcpu=rcpu)
    return farView(qp, ft, params)


def regex_filter(qp: QPair, ft: FTable, proj_flags: int, pattern: bytes,
                 vectorized: bool = False, rcpu: bool = False) -> QueryResult:
    name = "regex_vec" if vectorized else "regex"
    params, payload = P.encode_regex_params(PIPELINE_IDS[name], proj_flags, pattern, rcpu=rcpu)
    return farView(qp, ft, params, payload=payload)


def project(qp: QPair, ft: FTable, proj_flags: int, mode: int = 0,
            vectorized: bool = False, rcpu: bool = False) -> QueryResult:
    name = "project_vec" if vectorized else "project"
    params = P.encode_project_params(PIPELINE_IDS[name], proj_flags, mode, rcpu=rcpu)
    return farView(qp, ft, params)
