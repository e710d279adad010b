"""Binary wire protocol: verbs, packets, reassembly, credit flow control.

Frame layout (all little-endian):

    ┌───────────┬─────────┬────────┬──────────┬───────────┬──────────┬───────────┐
    │ magic(2B) │ ver(1B) │kind(1B)│ qpair(4B)│ msg_id(4B)│ vaddr(8B)│ length(8B)│
    ├───────────┴──┬──────┴────────┼──────────┴─────┬─────┴──────────┴───────────┤
    │param_count(2)│  reserved(2)  │ params(8B each)│ payload_len(4B) + payload  │
    └──────────────┴───────────────┴────────────────┴────────────────────────────┘

Packet layout: qpair(4B) msg_id(4B) seq(4B) flags(1B) valid_bytes(2B) payload.
Packet flags: bit0 = last packet of the message, bit1 = message aborted
(payload of an abort packet carries status(4B) + utf-8 detail).

Verbs always travel inside packetized messages; responses are raw packet
streams (status word + body), not verb frames, so their size never needs to
be known before streaming starts.  CREDIT_GRANT messages carry n(4B) and are
exempt from flow control so grants cannot deadlock behind the window.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

from .errors import (
    FramingError,
    IncompleteMessageError,
    ProtocolError,
    WouldBlock,
)

MAGIC = 0xFA57
VERSION = 0x01
DEFAULT_MTU = 1024
DEFAULT_CREDIT_WINDOW = 64
MAX_PARAMS = 64

_HEADER = struct.Struct("<HBBIIQQHH")
_PAYLOAD_LEN = struct.Struct("<I")
_PACKET_HEADER = struct.Struct("<IIIBH")

HEADER_BYTES = _HEADER.size + _PAYLOAD_LEN.size  # 36 for a param/payload-free frame
PACKET_HEADER_BYTES = _PACKET_HEADER.size  # 15

FLAG_LAST = 0x01
FLAG_ABORT = 0x02

_U64_MAX = (1 << 64) - 1


class VerbKind(IntEnum):
    OPEN_CONN = 0x01
    CLOSE_CONN = 0x02
    ALLOC_TABLE = 0x03
    FREE_TABLE = 0x04
    RDMA_READ = 0x05
    RDMA_WRITE = 0x06
    FARVIEW = 0x07
    RESPONSE = 0x08
    CREDIT_GRANT = 0x09


# Kinds allowed to carry a params block / a payload block.
PARAM_KINDS = frozenset({VerbKind.FARVIEW, VerbKind.ALLOC_TABLE})
PAYLOAD_KINDS = frozenset(
    {VerbKind.RDMA_WRITE, VerbKind.RESPONSE, VerbKind.FARVIEW, VerbKind.CREDIT_GRANT}
)


@dataclass
class Verb:
    """One protocol request/response unit before framing.

    msg_id is the correlation id echoed by responses; it is assigned by the
    sending endpoint's per-connection counter.
    """

    kind: VerbKind
    qpair: int = 0
    vaddr: int = 0
    length: int = 0
    params: tuple[int, ...] = ()
    payload: bytes = b""
    msg_id: int = 0

    def validate(self) -> None:
        if self.params and self.kind not in PARAM_KINDS:
            raise ProtocolError(f"{self.kind.name} verb cannot carry params")
        if self.payload and self.kind not in PAYLOAD_KINDS:
            raise ProtocolError(f"{self.kind.name} verb cannot carry a payload")
        if len(self.params) > MAX_PARAMS:
            raise ProtocolError(f"too many params: {len(self.params)} > {MAX_PARAMS}")
        if self.vaddr + self.length > _U64_MAX:
            raise ProtocolError("vaddr + length overflows 64 bits")


def encode_verb(v: Verb) -> bytes:
    """Frame a verb for the wire. Deterministic: equal verbs give equal bytes."""
    v.validate()
    out = bytearray(
        _HEADER.pack(
            MAGIC,
            VERSION,
            int(v.kind),
            v.qpair,
            v.msg_id,
            v.vaddr,
            v.length,
            len(v.params),
            0,
        )
    )
    for word in v.params:
        out += struct.pack("<Q", word)
    out += _PAYLOAD_LEN.pack(len(v.payload))
    out += v.payload
    return bytes(out)


def decode_verb(data: bytes) -> Verb:
    """Inverse of encode_verb. Raises on bad magic/version/kind or truncation."""
    if len(data) < _HEADER.size:
        raise FramingError(f"frame truncated: {len(data)} < {_HEADER.size} header bytes")
    magic, version, kind, qpair, msg_id, vaddr, length, param_count, _ = _HEADER.unpack_from(
        data, 0
    )
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:04X}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version 0x{version:02X}")
    try:
        kind = VerbKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown verb kind 0x{kind:02X}") from None
    off = _HEADER.size
    end_params = off + 8 * param_count
    if end_params + _PAYLOAD_LEN.size > len(data):
        raise FramingError("frame truncated inside param block")
    params = struct.unpack_from(f"<{param_count}Q", data, off) if param_count else ()
    off = end_params
    (payload_len,) = _PAYLOAD_LEN.unpack_from(data, off)
    off += _PAYLOAD_LEN.size
    if off + payload_len != len(data):
        raise FramingError(
            f"payload length field {payload_len} disagrees with frame size {len(data)}"
        )
    v = Verb(
        kind=kind,
        qpair=qpair,
        vaddr=vaddr,
        length=length,
        params=tuple(params),
        payload=bytes(data[off : off + payload_len]),
        msg_id=msg_id,
    )
    v.validate()
    return v


@dataclass
class Packet:
    """The wire unit: a sequenced, credit-gated fragment of one message."""

    qpair: int
    msg_id: int
    seq: int
    last: bool
    payload: bytes
    abort: bool = False

    @property
    def valid_bytes(self) -> int:
        return len(self.payload)

    def encode(self) -> bytes:
        flags = (FLAG_LAST if self.last else 0) | (FLAG_ABORT if self.abort else 0)
        return (
            _PACKET_HEADER.pack(self.qpair, self.msg_id, self.seq, flags, len(self.payload))
            + self.payload
        )


def decode_packet(data: bytes) -> Packet:
    if len(data) < PACKET_HEADER_BYTES:
        raise FramingError("packet truncated in header")
    qpair, msg_id, seq, flags, valid = _PACKET_HEADER.unpack_from(data, 0)
    if PACKET_HEADER_BYTES + valid != len(data):
        raise FramingError(f"packet valid_bytes {valid} disagrees with size {len(data)}")
    return Packet(
        qpair=qpair,
        msg_id=msg_id,
        seq=seq,
        last=bool(flags & FLAG_LAST),
        payload=bytes(data[PACKET_HEADER_BYTES:]),
        abort=bool(flags & FLAG_ABORT),
    )


def packetize(qpair: int, msg_id: int, payload: bytes, mtu: int = DEFAULT_MTU) -> list[Packet]:
    """Split a message payload into MTU-sized packets.

    An empty payload still produces one (empty, last) packet so every message
    has exactly one last-flagged packet.
    """
    if mtu < 64:
        raise ProtocolError(f"mtu {mtu} below the 64-byte minimum")
    if not payload:
        return [Packet(qpair, msg_id, 0, True, b"")]
    packets = []
    n = (len(payload) + mtu - 1) // mtu
    for seq in range(n):
        chunk = payload[seq * mtu : (seq + 1) * mtu]
        packets.append(Packet(qpair, msg_id, seq, seq == n - 1, chunk))
    return packets


def reassemble(packets) -> bytes:
    """Rebuild one message payload from its packets in any arrival order.

    All packets must share a single (qpair, msg_id) and exactly one must
    carry the last flag. Raises IncompleteMessageError on sequence holes and
    ProtocolError on conflicting duplicates or stray trailing packets.
    """
    parts: dict[int, bytes] = {}
    last_seq = None
    key = None
    for p in packets:
        k = (p.qpair, p.msg_id)
        if key is None:
            key = k
        elif k != key:
            raise ProtocolError(f"packet from message {k} mixed into {key}")
        if p.seq in parts:
            if parts[p.seq] != p.payload:
                raise ProtocolError(f"duplicate seq {p.seq} with differing payload")
            continue
        parts[p.seq] = p.payload
        if p.last:
            if last_seq is not None:
                raise ProtocolError("two last-flagged packets in one message")
            last_seq = p.seq
    if last_seq is None:
        raise IncompleteMessageError("message has no last packet")
    missing = [i for i in range(last_seq + 1) if i not in parts]
    if missing:
        raise IncompleteMessageError(f"missing seq {missing}")
    if len(parts) != last_seq + 1:
        raise ProtocolError("packets with seq beyond the last flag")
    return b"".join(parts[i] for i in range(last_seq + 1))


class Reassembler:
    """Out-of-order packet collector keyed by (qpair, msg_id).

    add() returns (qpair, msg_id, payload) once a message completes, or
    (qpair, msg_id, None) when an abort packet tears it down; otherwise
    None. Buffers of distinct queue pairs never mix.
    """

    def __init__(self):
        self._partial: dict[tuple[int, int], dict[int, bytes]] = {}
        self._last_seq: dict[tuple[int, int], int] = {}
        self._aborts: dict[tuple[int, int], Packet] = {}
        self._counts: dict[tuple[int, int], int] = {}
        self.last_message_packets = 0

    def add(self, p: Packet):
        key = (p.qpair, p.msg_id)
        self._counts[key] = self._counts.get(key, 0) + 1
        if p.abort:
            self._partial.pop(key, None)
            self._last_seq.pop(key, None)
            self._aborts[key] = p
            self.last_message_packets = self._counts.pop(key)
            return (p.qpair, p.msg_id, None)
        parts = self._partial.setdefault(key, {})
        if p.seq in parts:
            if parts[p.seq] != p.payload:
                raise ProtocolError(
                    f"duplicate seq {p.seq} on message {key} with differing payload"
                )
            return None
        parts[p.seq] = p.payload
        if p.last:
            if key in self._last_seq:
                raise ProtocolError(f"two last-flagged packets on message {key}")
            self._last_seq[key] = p.seq
        if key in self._last_seq:
            last = self._last_seq[key]
            if len(parts) == last + 1:
                del self._partial[key]
                del self._last_seq[key]
                self.last_message_packets = self._counts.pop(key)
                return (p.qpair, p.msg_id, b"".join(parts[i] for i in range(last + 1)))
        return None

    def abort_packet(self, qpair: int, msg_id: int) -> Packet | None:
        return self._aborts.pop((qpair, msg_id), None)


@dataclass(frozen=True)
class CreditState:
    """Per-queue-pair send window; a packet may go out only when available > 0."""

    available: int = DEFAULT_CREDIT_WINDOW
    max: int = DEFAULT_CREDIT_WINDOW

    def __post_init__(self):
        if not 0 <= self.available <= self.max:
            raise ProtocolError(f"credit state {self.available}/{self.max} out of range")


def consume_credit(c: CreditState) -> CreditState:
    if c.available <= 0:
        raise WouldBlock("no send credits available; wait for CREDIT_GRANT")
    return CreditState(c.available - 1, c.max)


def grant_credits(c: CreditState, n: int) -> CreditState:
    if n < 0 or c.available + n > c.max:
        raise ProtocolError(f"grant of {n} overflows window {c.available}/{c.max}")
    return CreditState(c.available + n, c.max)


def encode_credit_grant(qpair: int, msg_id: int, n: int) -> Verb:
    return Verb(
        kind=VerbKind.CREDIT_GRANT,
        qpair=qpair,
        msg_id=msg_id,
        payload=struct.pack("<I", n),
    )


def decode_credit_grant(v: Verb) -> int:
    if v.kind is not VerbKind.CREDIT_GRANT or len(v.payload) != 4:
        raise ProtocolError("malformed CREDIT_GRANT")
    return struct.unpack("<I", v.payload)[0]


class PacketConn:
    """Packet transport over a connected socket with credit-gated sending.

    One instance per endpoint per connection; single logical caller. Data
    packets consume send credits; CREDIT_GRANT messages bypass the window
    (they are what refills it). The receive side counts consumed data packets
    and batches a grant back once half the window has been eaten or a message
    completes. A sender blocked on credits keeps pumping the receive side, so
    grants always get through; any data messages completing meanwhile queue
    in an inbox.

    `max_in_flight` records the high-water mark of sent-but-unacknowledged
    packets for the flow-bound property checks.
    """

    GRANT_MSG_BASE = 0x8000_0000

    def __init__(self, sock, qpair: int = 0, window: int = DEFAULT_CREDIT_WINDOW):
        self.sock = sock
        self.qpair = qpair
        self.credits = CreditState(window, window)
        self.reassembler = Reassembler()
        self.max_in_flight = 0
        self._send_msg_id = 0
        self._grant_msg_id = self.GRANT_MSG_BASE
        self._unconsumed = 0
        self._recv_buf = bytearray()
        self._inbox: deque = deque()
        self.sent_packets = 0
        self.received_packets = 0
        self.received_valid_bytes = 0

    def reset_window(self, window: int) -> None:
        """Adopt the peer-advertised window, preserving in-flight accounting."""
        in_flight = self.credits.max - self.credits.available
        self.credits = CreditState(max(0, window - in_flight), window)

    # -- sending ---------------------------------------------------------

    def next_msg_id(self) -> int:
        self._send_msg_id += 1
        return self._send_msg_id

    def send_message(self, payload: bytes, msg_id: int | None = None, mtu: int = DEFAULT_MTU) -> int:
        """Packetize and send one message, blocking on credits as needed."""
        if msg_id is None:
            msg_id = self.next_msg_id()
        for p in packetize(self.qpair, msg_id, payload, mtu):
            self.send_packet(p)
        return msg_id

    def send_packet(self, p: Packet) -> None:
        while True:
            try:
                self.credits = consume_credit(self.credits)
                break
            except WouldBlock:
                self._pump_one()
        in_flight = self.credits.max - self.credits.available
        if in_flight > self.max_in_flight:
            self.max_in_flight = in_flight
        self._raw_send(p.encode())
        self.sent_packets += 1

    def send_verb(self, v: Verb, mtu: int = DEFAULT_MTU) -> int:
        if v.msg_id == 0:
            v.msg_id = self.next_msg_id()
        if v.kind is VerbKind.CREDIT_GRANT:
            for p in packetize(self.qpair, v.msg_id, encode_verb(v), mtu):
                self._raw_send(p.encode())
            return v.msg_id
        self.send_message(encode_verb(v), msg_id=v.msg_id, mtu=mtu)
        return v.msg_id

    def send_grant(self, n: int) -> None:
        self._grant_msg_id += 1
        v = encode_credit_grant(self.qpair, self._grant_msg_id, n)
        for p in packetize(self.qpair, self._grant_msg_id, encode_verb(v)):
            self._raw_send(p.encode())

    # -- receiving -------------------------------------------------------

    def recv_message(self) -> tuple[int, bytes | None]:
        """Block until one complete non-grant message arrives.

        Returns (msg_id, payload); payload is None for aborted messages (the
        abort packet stays available via reassembler.abort_packet).
        """
        while not self._inbox:
            self._pump_one()
        return self._inbox.popleft()

    def recv_packet(self) -> Packet:
        """Read exactly one packet off the socket."""
        header = self._recv_exact(PACKET_HEADER_BYTES)
        _, _, _, _, valid = _PACKET_HEADER.unpack(header)
        body = self._recv_exact(valid) if valid else b""
        return decode_packet(header + body)

    def _pump_one(self) -> None:
        p = self.recv_packet()
        self.received_packets += 1
        self.received_valid_bytes += p.valid_bytes
        done = self.reassembler.add(p)
        if done is None:
            self._count_consumed()
            return
        _, msg_id, payload = done
        if payload is None:
            self._count_consumed()
            self._inbox.append((msg_id, None))
            return
        if msg_id > self.GRANT_MSG_BASE:
            try:
                v = decode_verb(payload)
            except (ProtocolError, FramingError):
                v = None
            if v is not None and v.kind is VerbKind.CREDIT_GRANT:
                # grant packets bypass flow control: no grant-back for them
                self.credits = grant_credits(self.credits, decode_credit_grant(v))
                return
        self._count_consumed(force_flush=True)
        self._inbox.append((msg_id, payload))

    def _count_consumed(self, force_flush: bool = False) -> None:
        self._unconsumed += 1
        if force_flush or self._unconsumed >= max(1, self.credits.max // 2):
            self.flush_grants()

    def flush_grants(self) -> None:
        if self._unconsumed:
            self.send_grant(self._unconsumed)
            self._unconsumed = 0

    # -- socket plumbing --------------------------------------------------

    def _raw_send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def _recv_exact(self, n: int) -> bytes:
        while len(self._recv_buf) < n:
            chunk = self.sock.recv(max(65536, n - len(self._recv_buf)))
            if not chunk:
                raise ConnectionError("peer closed the connection")
            self._recv_buf += chunk
        out = bytes(self._recv_buf[:n])
        del self._recv_buf[:n]
        return out

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
