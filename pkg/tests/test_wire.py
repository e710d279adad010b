"""Wire protocol: framing, packetization, reassembly, credit flow."""

import random
import socket
import struct
import threading

import pytest
from hypothesis import given, settings, strategies as st

from farview.errors import (
    FramingError,
    IncompleteMessageError,
    ProtocolError,
    WouldBlock,
)
from farview.wire import (
    CreditState,
    Packet,
    PacketConn,
    Reassembler,
    Verb,
    VerbKind,
    consume_credit,
    decode_verb,
    encode_verb,
    grant_credits,
    packetize,
    reassemble,
)


def random_verb(rng: random.Random) -> Verb:
    kind = rng.choice(list(VerbKind))
    params = ()
    payload = b""
    if kind is VerbKind.FARVIEW:
        params = tuple(rng.randrange(1 << 64) for _ in range(rng.randrange(0, 12)))
        payload = rng.randbytes(rng.randrange(0, 64))
    elif kind is VerbKind.ALLOC_TABLE:
        params = tuple(rng.randrange(1 << 64) for _ in range(rng.randrange(0, 8)))
    elif kind in (VerbKind.RDMA_WRITE, VerbKind.RESPONSE, VerbKind.CREDIT_GRANT):
        payload = rng.randbytes(rng.randrange(0, 200))
    vaddr = rng.randrange(1 << 63)
    return Verb(
        kind=kind,
        qpair=rng.randrange(1 << 32),
        vaddr=vaddr,
        length=rng.randrange((1 << 64) - vaddr),
        params=params,
        payload=payload,
        msg_id=rng.randrange(1 << 32),
    )


class TestVerbCodec:
    def test_open_conn_frame_layout(self):
        frame = encode_verb(Verb(kind=VerbKind.OPEN_CONN, qpair=0))
        # fixed header (32B) + payload_len (4B); kind tag 0x01; zero addresses
        assert len(frame) == 36
        assert frame[:2] == b"\x57\xfa"  # magic 0xFA57 little-endian
        assert frame[2] == 0x01  # version
        assert frame[3] == 0x01  # OPEN_CONN
        assert frame[4:32] == bytes(28)

    def test_farview_param_block(self):
        v = Verb(kind=VerbKind.FARVIEW, params=(3, 0x07, 0x40, 512))
        frame = encode_verb(v)
        param_count = struct.unpack_from("<H", frame, 28)[0]
        assert param_count == 4
        assert len(frame) == 36 + 32  # param block is 32 bytes

    def test_round_trip_fuzz_10k(self):
        rng = random.Random(0xC0DE)
        for _ in range(10_000):
            v = random_verb(rng)
            assert decode_verb(encode_verb(v)) == v

    def test_unknown_kind_tag(self):
        frame = bytearray(encode_verb(Verb(kind=VerbKind.OPEN_CONN)))
        frame[3] = 0xFF
        with pytest.raises(ProtocolError):
            decode_verb(bytes(frame))

    def test_bad_magic(self):
        frame = b"\x00\x00" + encode_verb(Verb(kind=VerbKind.OPEN_CONN))[2:]
        with pytest.raises(ProtocolError):
            decode_verb(frame)

    def test_read_verb_round_trip(self):
        v = Verb(kind=VerbKind.RDMA_READ, vaddr=2097152, length=4096)
        assert decode_verb(encode_verb(v)) == v

    def test_truncation_fuzz(self):
        rng = random.Random(7)
        for _ in range(500):
            v = random_verb(rng)
            frame = encode_verb(v)
            cut = rng.randrange(len(frame))
            with pytest.raises((FramingError, ProtocolError)):
                decode_verb(frame[:cut])

    def test_oversize_params(self):
        v = Verb(kind=VerbKind.FARVIEW, params=(0,) * 65)
        with pytest.raises(ProtocolError):
            encode_verb(v)

    def test_payload_only_on_payload_kinds(self):
        v = Verb(kind=VerbKind.RDMA_READ, payload=b"x")
        with pytest.raises(ProtocolError):
            encode_verb(v)


class TestPacketize:
    def test_2500_bytes_three_packets(self):
        pkts = packetize(1, 1, b"x" * 2500, 1024)
        assert [p.valid_bytes for p in pkts] == [1024, 1024, 452]
        assert [p.seq for p in pkts] == [0, 1, 2]
        assert [p.last for p in pkts] == [False, False, True]

    def test_exact_mtu_single_packet(self):
        pkts = packetize(1, 1, b"x" * 1024, 1024)
        assert len(pkts) == 1 and pkts[0].last

    def test_empty_payload_one_packet(self):
        pkts = packetize(1, 1, b"", 1024)
        assert len(pkts) == 1 and pkts[0].last and pkts[0].valid_bytes == 0

    def test_mtu_floor(self):
        with pytest.raises(ProtocolError):
            packetize(1, 1, b"x", 63)

    def test_partition_totals(self):
        rng = random.Random(3)
        for _ in range(50):
            payload = rng.randbytes(rng.randrange(0, 100_000))
            pkts = packetize(1, 1, payload, 1024)
            assert sum(p.valid_bytes for p in pkts) == len(payload)
            assert sum(p.last for p in pkts) == 1

    def test_packet_codec_round_trip(self):
        from farview.wire import decode_packet

        p = Packet(9, 8, 7, True, b"hello", abort=False)
        assert decode_packet(p.encode()) == p


class TestReassemble:
    def test_single_packet(self):
        assert reassemble([Packet(1, 1, 0, True, b"abc")]) == b"abc"

    def test_permutation_invariance(self):
        payload = random.Random(1).randbytes(10_000)
        pkts = packetize(5, 6, payload, 1024)
        for seed in range(20):
            shuffled = pkts[:]
            random.Random(seed).shuffle(shuffled)
            assert reassemble(shuffled) == payload

    def test_arbitrary_permutations_up_to_1mib(self):
        rng = random.Random(42)
        for _ in range(5):
            payload = rng.randbytes(rng.randrange(1, 1 << 20))
            pkts = packetize(2, 3, payload, 1024)
            rng.shuffle(pkts)
            assert reassemble(pkts) == payload

    def test_hole_raises(self):
        pkts = packetize(1, 1, b"x" * 3000, 1024)
        with pytest.raises(IncompleteMessageError):
            reassemble([pkts[0], pkts[2]])

    def test_conflicting_duplicate(self):
        pkts = packetize(1, 1, b"x" * 3000, 1024)
        dup = Packet(1, 1, 0, False, b"y" * 1024)
        with pytest.raises(ProtocolError):
            reassemble(pkts + [dup])

    def test_benign_duplicate_ok(self):
        pkts = packetize(1, 1, b"x" * 3000, 1024)
        assert reassemble(pkts + [pkts[1]]) == b"x" * 3000

    def test_queue_pair_isolation(self):
        rng = random.Random(9)
        a = rng.randbytes(5000)
        b = rng.randbytes(7000)
        pkts_a = packetize(1, 10, a, 1024)
        pkts_b = packetize(2, 10, b, 1024)  # same msg_id, different qpair
        mixed = pkts_a + pkts_b
        rng.shuffle(mixed)
        r = Reassembler()
        done = {}
        for p in mixed:
            res = r.add(p)
            if res is not None:
                done[res[0]] = res[2]
        assert done == {1: a, 2: b}

    @settings(max_examples=200, deadline=None)
    @given(st.binary(max_size=8192), st.randoms())
    def test_property_shuffle_identity(self, payload, rng):
        pkts = packetize(3, 4, payload, 256)
        rng.shuffle(pkts)
        assert reassemble(pkts) == payload


class TestCredits:
    def test_consume_to_zero_then_block(self):
        c = CreditState(1, 8)
        c = consume_credit(c)
        assert c.available == 0
        with pytest.raises(WouldBlock):
            consume_credit(c)

    def test_full_grant(self):
        c = CreditState(0, 8)
        assert grant_credits(c, 8).available == 8

    def test_over_grant(self):
        with pytest.raises(ProtocolError):
            grant_credits(CreditState(5, 8), 4)

    def test_window_bound_under_simulation(self):
        """Sender/receiver over a socket pair with window 8: in-flight
        unacknowledged packets never exceed the window."""
        a, b = socket.socketpair()
        window = 8
        sender = PacketConn(a, qpair=1, window=window)
        receiver = PacketConn(b, qpair=1, window=window)
        n_msgs = 40
        rng = random.Random(5)
        payloads = [rng.randbytes(rng.randrange(1, 6000)) for _ in range(n_msgs)]

        def recv_side():
            got = 0
            while got < n_msgs:
                receiver.recv_message()
                got += 1
            receiver.flush_grants()

        t = threading.Thread(target=recv_side)
        t.start()
        for payload in payloads:
            sender.send_message(payload, mtu=256)
        t.join()
        assert sender.max_in_flight <= window
        assert sender.sent_packets >= sum((len(p) + 255) // 256 for p in payloads)
        a.close()
        b.close()
