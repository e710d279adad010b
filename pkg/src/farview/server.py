"""The node process: listener, connection→region lifecycle, verb dispatch.

One acceptor thread; one handler thread per connection, which doubles as the
region's pipeline worker. Plain RDMA_READ/RDMA_WRITE verbs go straight to
the memory stack; FARVIEW verbs route through the connection's dynamic
region (auto-loading the requested pipeline on change). Responses stream as
credit-gated packets: a status word, the body, and — for grouping pipelines —
the overflow trailer. Errors caught before streaming return an error status;
faults after the first packet tear the message down with an abort packet.

The two-sided baseline path (RCPU) executes the same query semantics with
plain hash maps and linear scans over the same stored bytes, emitting the
identical response format, so the execution paths can be compared
byte-for-byte after unpacking.
"""

from __future__ import annotations

import argparse
import re as _re
import socket
import struct
import threading
from dataclasses import dataclass, replace

from . import params as P
from .errors import (
    FarviewError,
    ProtocolError,
    RcpuDisabledError,
    RequestAborted,
    RequestError,
    STATUS_OK,
)
from .memory import MemoryConfig, MemoryStack
from .operators.crypto import CryptoParams
from .operators.grouping import GroupState, encode_group_row
from .operators.packing import emit_send_commands
from .operators.predicate import ColumnType, build_evaluator
from .operators.schema import TableSchema
from .regions import (
    PipelineRegistry,
    RegionTable,
    RequestContext,
    execute_pipeline,
)
from .wire import (
    DEFAULT_CREDIT_WINDOW,
    DEFAULT_MTU,
    Packet,
    PacketConn,
    Verb,
    VerbKind,
    decode_verb,
    packetize,
)


@dataclass
class ServerConfig:
    listen: str = "127.0.0.1:0"
    regions: int = 6
    channels: int = 2
    channel_capacity_bytes: int = 256 * 1024 * 1024
    stripe_bytes: int = 64
    burst_bytes: int = 65536
    mtu: int = DEFAULT_MTU
    credit_window: int = DEFAULT_CREDIT_WINDOW
    cuckoo_tables: int = 4
    cuckoo_slots: int = 65536
    cuckoo_max_evictions: int = 32
    cuckoo_seed: int = 1
    lru_depth: int = 8
    reconfig_delay_ms: float = 0.0
    rcpu_enabled: bool = True
    queue_depth: int = 1024  # stage batch rows

    def __post_init__(self):
        if self.regions < 1 or self.channels < 1 or self.credit_window < 1:
            raise ValueError("counts must be >= 1")
        if self.mtu < 64:
            raise ValueError("mtu must be >= 64")

    def memory_config(self) -> MemoryConfig:
        return MemoryConfig(
            channels=self.channels,
            channel_capacity=self.channel_capacity_bytes,
            stripe=self.stripe_bytes,
            burst_bytes=self.burst_bytes,
        )


_BOOLS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def load_config(path: str | None = None, overrides: dict | None = None) -> ServerConfig:
    """Flat key=value config file; every key overridable by a CLI flag."""
    values: dict = {}
    if path:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ServerConfig()
    unknown = set(values) - set(cfg.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for f, raw in values.items():
        current = getattr(cfg, f)
        if isinstance(current, bool):
            kwargs[f] = _BOOLS[str(raw).lower()] if isinstance(raw, str) else bool(raw)
        elif isinstance(current, int):
            kwargs[f] = int(raw)
        elif isinstance(current, float):
            kwargs[f] = float(raw)
        else:
            kwargs[f] = raw
    return replace(cfg, **kwargs)


class FarviewServer:
    """Accepts connections, binds regions, dispatches verbs."""

    def __init__(self, config: ServerConfig | None = None):
        self.config = config or ServerConfig()
        self.memory = MemoryStack(self.config.memory_config(), regions=self.config.regions)
        self.registry = PipelineRegistry(self.config.reconfig_delay_ms)
        self.region_table = RegionTable(self.config.regions, self.registry)
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        self._next_qpair = 0
        self._qpair_lock = threading.Lock()
        self.stats_lock = threading.Lock()
        self.bytes_sent_per_qpair: dict[int, int] = {}

    # -- lifecycle ---------------------------------------------------------

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "FarviewServer":
        host, _, port = self.config.listen.rpartition(":")
        self._listener = socket.create_server((host or "127.0.0.1", int(port)))
        self._listener.settimeout(0.2)
        t = threading.Thread(target=self._accept_loop, name="fv-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stopping.set()
        if self._listener:
            self._listener.close()
        for t in self._threads:
            t.join(timeout=10)
        self.memory.close()

    def serve_forever(self) -> None:
        try:
            while not self._stopping.wait(0.5):
                pass
        except KeyboardInterrupt:
            self.stop()

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve_conn, args=(sock,), daemon=True)
            t.start()
            self._threads.append(t)

    def _new_qpair(self) -> int:
        with self._qpair_lock:
            self._next_qpair += 1
            return self._next_qpair

    # -- connection handling -------------------------------------------------

    def _serve_conn(self, sock: socket.socket) -> None:
        cfg = self.config
        conn = PacketConn(sock, qpair=0, window=cfg.credit_window)
        qpair = None
        try:
            msg_id, payload = conn.recv_message()
            verb = decode_verb(payload)
            if verb.kind is not VerbKind.OPEN_CONN:
                self._respond_error(conn, msg_id, ProtocolError("expected OPEN_CONN"))
                return
            qpair = self._new_qpair()
            try:
                region_id = self.region_table.bind_region(qpair)
            except FarviewError as exc:
                qpair = None
                self._respond_error(conn, msg_id, exc)
                return
            conn.qpair = qpair
            body = struct.pack(
                "<IIIII", qpair, region_id, cfg.mtu, cfg.credit_window, cfg.channels
            )
            self._respond(conn, msg_id, body)
            self._verb_loop(conn, qpair, region_id)
        except (ConnectionError, OSError):
            pass
        finally:
            if qpair is not None:
                self.region_table.release_region(qpair)
                self.memory.release_qpair(qpair)
            conn.close()

    def _verb_loop(self, conn: PacketConn, qpair: int, region_id: int) -> None:
        while not self._stopping.is_set():
            msg_id, payload = conn.recv_message()
            if payload is None:
                continue  # peer aborted its own request mid-flight
            try:
                verb = decode_verb(payload)
            except FarviewError as exc:
                self._respond_error(conn, msg_id, exc)
                continue
            if verb.kind is VerbKind.CLOSE_CONN:
                self._respond(conn, msg_id, b"")
                return
            try:
                if verb.qpair != qpair:
                    raise ProtocolError(
                        f"verb carries queue pair {verb.qpair}, connection owns {qpair}"
                    )
                self._dispatch(conn, qpair, region_id, msg_id, verb)
            except RequestAborted as exc:
                self._abort(conn, msg_id, exc)
                return
            except FarviewError as exc:
                self._respond_error(conn, msg_id, exc)

    def _dispatch(self, conn, qpair, region_id, msg_id, verb: Verb) -> None:
        kind = verb.kind
        if kind is VerbKind.ALLOC_TABLE:
            if len(verb.params) < 3:
                raise RequestError(
                    "ALLOC_TABLE params: tuple_bytes, column count, packed widths"
                )
            tuple_bytes = verb.params[0]
            widths = P.unpack_schema_words(verb.params[1:])
            handle = self.memory.alloc_table(qpair, verb.length, tuple_bytes, widths)
            self._respond(conn, msg_id, struct.pack("<Q", handle.base_vaddr))
        elif kind is VerbKind.FREE_TABLE:
            handle = self.memory.find_handle(verb.vaddr)
            self.memory.free_table(qpair, handle)
            self._respond(conn, msg_id, b"")
        elif kind is VerbKind.RDMA_WRITE:
            handle = self.memory.find_handle(verb.vaddr)
            self.memory.write_stream(qpair, handle, verb.vaddr, verb.payload, region_id)
            self._respond(conn, msg_id, b"")
        elif kind is VerbKind.RDMA_READ:
            # bypass: straight from the memory stack, no region involvement
            handle = self.memory.find_handle(verb.vaddr)
            chunks = self.memory.read_stream(qpair, handle, verb.vaddr, verb.length, region_id)
            self._stream_response(conn, msg_id, chunks, region=None)
        elif kind is VerbKind.FARVIEW:
            packets = self.execute_request(qpair, region_id, verb, msg_id)
            region = self.region_table.regions[region_id]
            self._send_stream(conn, msg_id, packets, region)
        else:
            raise ProtocolError(f"unexpected verb {kind.name}")

    # -- FARVIEW -----------------------------------------------------------

    def execute_request(self, qpair: int, region_id: int, verb: Verb, msg_id: int = 0):
        """Validate a FARVIEW request and return its response packet stream.

        Validation (params, schema, access) is eager — request errors raise
        before any memory read. The returned generator owns the region's
        busy state: it must be consumed (or closed) to return the region to
        idle.
        """
        if not verb.params:
            raise RequestError("FARVIEW request carries no params")
        word0 = verb.params[0]
        rcpu = bool(word0 & P.RCPU_FLAG)
        pipeline_id = word0 & ~P.RCPU_FLAG
        handle = self.memory.find_handle(verb.vaddr)
        length = verb.length
        schema = TableSchema(handle.column_bytes)
        if length % schema.tuple_bytes:
            raise RequestError(
                f"read length {length} is not a whole number of {schema.tuple_bytes}B tuples"
            )

        if rcpu:
            if not self.config.rcpu_enabled:
                raise RcpuDisabledError("two-sided CPU execution disabled by config")
            spec = self.registry.get(pipeline_id)
            ctx = RequestContext(spec, schema, verb.params, verb.payload,
                                 self.config.channels, self.config)
            body = self.rcpu_execute(ctx, qpair, region_id, verb, length)
            return iter(packetize(qpair, msg_id, struct.pack("<I", STATUS_OK) + body,
                                  self.config.mtu))

        region = self.region_table.regions[region_id]
        if region.bound_qpair != qpair:
            raise RequestError(f"region {region_id} is not bound to queue pair {qpair}")
        if region.loaded is None or region.loaded.pipeline_id != pipeline_id:
            self.region_table.load_pipeline(region_id, pipeline_id)
        spec = region.loaded
        ctx = RequestContext(spec, schema, verb.params, verb.payload,
                             self.config.channels, self.config)
        if region.state == "busy":
            raise RequestError(f"region {region_id} already has an in-flight request")
        region.state = "busy"
        region.abort_event.clear()

        def run():
            try:
                chunks = self._read_chunks(ctx, qpair, handle, verb.vaddr, length, region_id)
                overflow_sink: list = []
                packed = execute_pipeline(ctx, chunks, overflow_sink)
                trailer = None
                if spec.family in ("distinct", "group_by"):
                    trailer = lambda: P.build_trailer(  # noqa: E731
                        self._overflow_entries(ctx, overflow_sink)
                    )
                yield from emit_send_commands(
                    packed, self.config.mtu, qpair, msg_id,
                    prefix=struct.pack("<I", STATUS_OK), trailer=trailer,
                )
            finally:
                region.state = "idle"

        return run()

    def _read_chunks(self, ctx: RequestContext, qpair, handle, vaddr, length, region_id):
        if ctx.plan is not None and ctx.plan.mode == "smart":
            return self._smart_chunks(ctx, qpair, handle, vaddr, length, region_id)
        return self.memory.read_stream(qpair, handle, vaddr, length, region_id)

    def _smart_chunks(self, ctx, qpair, handle, vaddr, length, region_id, rows_per_chunk=4096):
        tuple_bytes = ctx.schema.tuple_bytes
        rows = length // tuple_bytes
        runs = ctx.plan.word_runs
        for start in range(0, rows, rows_per_chunk):
            n = min(rows_per_chunk, rows - start)
            spans = [
                (vaddr + (start + r) * tuple_bytes + off, ln)
                for r in range(n)
                for off, ln in runs
            ]
            yield self.memory.gather_words(qpair, handle, spans, region_id)

    def _overflow_entries(self, ctx: RequestContext, overflow_sink) -> list[bytes]:
        if not overflow_sink:
            return []
        overflow = overflow_sink[0]
        if ctx.spec.family == "distinct":
            return list(overflow)
        measures = ctx.agg_spec.measures
        return [encode_group_row(state, measures) for state in overflow]

    # -- RCPU baseline -------------------------------------------------------

    def rcpu_execute(self, ctx: RequestContext, qpair: int, region_id: int,
                     verb: Verb, length: int) -> bytes:
        """Two-sided path: plain CPU evaluation over the same stored bytes.

        Returns the response body (status word excluded), identical in layout
        to the offloaded pipeline's output."""
        schema = ctx.schema
        handle = self.memory.find_handle(verb.vaddr)
        data = self.memory.read(qpair, handle, verb.vaddr, length, region_id)
        width = schema.tuple_bytes
        family = ctx.spec.family

        if ctx.spec.decrypt:
            data = _reference_ctr(ctx.decrypt_params, data)
        rows = [data[i : i + width] for i in range(0, len(data), width)]

        if family in ("select", "project"):
            spans = schema.projected_spans(ctx.proj_flags)

            def proj(r):
                return b"".join(r[s:e] for s, e in spans)

            if family == "select":
                evaluate = build_evaluator(schema, ctx.predicate)
                rows = [r for r in rows if evaluate(r)]
            body = b"".join(proj(r) for r in rows)
            if ctx.spec.encrypt:
                body = _reference_ctr(ctx.encrypt_params, body)
            return body

        if family == "regex":
            pat = ctx.engine_pattern
            gold = _re.compile(pat[:-1] + rb"\Z" if pat.endswith(b"$") else pat)
            spans = schema.projected_spans(ctx.proj_flags)
            s0 = spans[0][0]
            out = []
            for r in rows:
                (slen,) = struct.unpack_from("<H", r, s0)
                if gold.search(r[s0 + 2 : s0 + 2 + slen]):
                    out.append(b"".join(r[s:e] for s, e in spans))
            return b"".join(out)

        if family == "distinct":
            spans = schema.projected_spans(ctx.key_flags)
            seen = dict.fromkeys(
                b"".join(r[s:e] for s, e in spans) for r in rows
            )
            return b"".join(seen) + P.build_trailer([])

        if family == "group_by":
            agg = ctx.agg_spec
            spans = schema.projected_spans(agg.key_flags)
            decoders = []
            for m in agg.measures:
                s, e = schema.column_span(m.column)
                if m.ctype is ColumnType.FLOAT:
                    decoders.append(lambda r, s=s: struct.unpack_from("<d", r, s)[0])
                else:
                    signed = m.ctype is ColumnType.INT
                    decoders.append(
                        lambda r, s=s, e=e, signed=signed: int.from_bytes(
                            r[s:e], "little", signed=signed
                        )
                    )
            groups: dict[bytes, GroupState] = {}
            for r in rows:
                key = b"".join(r[s:e] for s, e in spans)
                state = groups.get(key)
                if state is None:
                    state = groups[key] = GroupState(key, agg.measures)
                state.update(agg.measures, [d(r) for d in decoders])
            body = b"".join(encode_group_row(g, agg.measures) for g in groups.values())
            return body + P.build_trailer([])

        raise RequestError(f"RCPU path cannot serve pipeline family {family}")

    # -- response plumbing ---------------------------------------------------

    def _respond(self, conn: PacketConn, msg_id: int, body: bytes) -> None:
        payload = struct.pack("<I", STATUS_OK) + body
        self._send_all(conn, packetize(conn.qpair, msg_id, payload, self.config.mtu))

    def _respond_error(self, conn: PacketConn, msg_id: int, exc: FarviewError) -> None:
        payload = struct.pack("<I", exc.status) + str(exc).encode()
        self._send_all(conn, packetize(conn.qpair, msg_id, payload, self.config.mtu))

    def _stream_response(self, conn: PacketConn, msg_id: int, chunks, region) -> None:
        packets = emit_send_commands(
            chunks, self.config.mtu, conn.qpair, msg_id,
            prefix=struct.pack("<I", STATUS_OK),
        )
        self._send_stream(conn, msg_id, packets, region)

    def _send_stream(self, conn: PacketConn, msg_id: int, packets, region) -> None:
        """Send a response stream; faults after the first packet abort the
        message in-band instead of opening a second response."""
        sent_any = False
        try:
            for p in packets:
                if self._stopping.is_set() or (
                    region is not None and region.abort_event.is_set()
                ):
                    raise RequestAborted("request torn down mid-stream")
                conn.send_packet(p)
                sent_any = True
                self._count_sent(conn.qpair, p.valid_bytes)
        except RequestAborted:
            raise
        except FarviewError as exc:
            if sent_any:
                self._abort(conn, msg_id, exc)
            else:
                raise

    def _send_all(self, conn: PacketConn, packets) -> None:
        for p in packets:
            conn.send_packet(p)
            self._count_sent(conn.qpair, p.valid_bytes)

    def _count_sent(self, qpair: int, n: int) -> None:
        with self.stats_lock:
            self.bytes_sent_per_qpair[qpair] = self.bytes_sent_per_qpair.get(qpair, 0) + n

    def _abort(self, conn: PacketConn, msg_id: int, exc: Exception) -> None:
        status = exc.status if isinstance(exc, FarviewError) else FarviewError.status
        payload = struct.pack("<I", status) + str(exc).encode()
        try:
            conn.send_packet(Packet(conn.qpair, msg_id, 0xFFFFFFFF, False, payload, abort=True))
        except (OSError, FarviewError, ConnectionError):
            pass


def _reference_ctr(cp: CryptoParams, data: bytes) -> bytes:
    """Independent CTR path for the CPU baseline (library mode, full-block
    counter); equivalent to the operator's layout below 2^32 blocks."""
    from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

    initial = cp.nonce + cp.initial_counter.to_bytes(4, "big")
    enc = Cipher(algorithms.AES(cp.key), modes.CTR(initial)).encryptor()
    return enc.update(data) + enc.finalize()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="farview-node",
                                     description="disaggregated-memory node")
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--listen", help="host:port (port 0 = ephemeral)")
    parser.add_argument("--regions", type=int)
    parser.add_argument("--channels", type=int)
    parser.add_argument("--mtu", type=int)
    parser.add_argument("--credit-window", type=int, dest="credit_window")
    parser.add_argument("--channel-capacity-bytes", type=int, dest="channel_capacity_bytes")
    parser.add_argument("--stripe-bytes", type=int, dest="stripe_bytes")
    parser.add_argument("--burst-bytes", type=int, dest="burst_bytes")
    parser.add_argument("--queue-depth", type=int, dest="queue_depth")
    parser.add_argument("--cuckoo-seed", type=int, dest="cuckoo_seed")
    parser.add_argument("--lru-depth", type=int, dest="lru_depth")
    parser.add_argument("--cuckoo-tables", type=int, dest="cuckoo_tables")
    parser.add_argument("--cuckoo-slots", type=int, dest="cuckoo_slots")
    parser.add_argument("--cuckoo-max-evictions", type=int, dest="cuckoo_max_evictions")
    parser.add_argument("--reconfig-delay-ms", type=float, dest="reconfig_delay_ms")
    parser.add_argument("--rcpu-enabled", dest="rcpu_enabled")
    args = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k != "config"}
    cfg = load_config(args.config, overrides)
    server = FarviewServer(cfg).start()
    host, port = server.address
    print(f"farview-node listening on {host}:{port} "
          f"({cfg.regions} regions, {cfg.channels} channels, mtu {cfg.mtu})")
    server.serve_forever()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
