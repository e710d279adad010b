"""Result packing into 64-byte output words and packet emission.

Projected columns of consecutive tuples are concatenated densely across
tuple boundaries; whole 64-byte words flush as they fill, a carry buffer
holding the overflow between tuples. The final word is zero-padded and the
true byte count reported out-of-band, which is how the sender trims padding.

The sender turns the word stream into response packets as bytes accumulate
past the MTU, setting the last flag only when the stream ends — no a-priori
response size is ever needed.
"""

from __future__ import annotations

from ..wire import Packet

WORD = 64


class PackedStream:
    """Iterator of word-aligned byte blocks + the valid (unpadded) length.

    Only the final word can carry zero padding; valid_bytes and words are
    final once the iterator is exhausted.
    """

    def __init__(self, blocks):
        self._blocks = blocks
        self.valid_bytes = 0
        self.words = 0

    def __iter__(self):
        carry = bytearray()
        for piece in self._blocks:
            self.valid_bytes += len(piece)
            carry += piece
            if len(carry) >= WORD:
                whole = len(carry) - len(carry) % WORD
                yield bytes(carry[:whole])
                self.words += whole // WORD
                del carry[:whole]
        if carry:
            self.words += 1
            yield bytes(carry) + b"\x00" * (WORD - len(carry))


def pack_stream(batches, spans, lanes: int = 1) -> PackedStream:
    """Pack the projected byte spans of each tuple into 64-byte words.

    With lanes > 1, `batches` is a list of per-lane streams that merge with
    a simple round-robin arbiter before packing.
    """
    if lanes > 1:
        batches = _round_robin_merge(batches)

    def pieces():
        for batch in batches:
            for t in batch:
                yield t.project(spans)

    return PackedStream(pieces())


def pack_bytes(chunks) -> PackedStream:
    """Pack pre-serialized row chunks (group-by result rows)."""
    return PackedStream(iter(chunks))


def _round_robin_merge(lane_streams):
    iters = [iter(s) for s in lane_streams]
    live = list(range(len(iters)))
    while live:
        for i in list(live):
            try:
                yield next(iters[i])
            except StopIteration:
                live.remove(i)


def emit_send_commands(packed, mtu: int, qpair: int = 0, msg_id: int = 0,
                       prefix: bytes = b"", trailer=None):
    """Generate the response packets for a packed stream.

    `packed` is a PackedStream (padded words trimmed to valid bytes) or any
    iterable of exact byte chunks. A packet flushes once more than `mtu`
    bytes are buffered; the stream-end packet carries the last flag and the
    trailer bytes (resolved lazily, after overflow contents are known).
    """
    buf = bytearray(prefix)
    seq = 0

    def drain():
        nonlocal seq
        while len(buf) > mtu:
            p = Packet(qpair, msg_id, seq, False, bytes(buf[:mtu]))
            seq += 1
            del buf[:mtu]
            yield p

    if isinstance(packed, PackedStream):
        pending = bytearray()
        emitted = 0
        for block in packed:
            pending += block
            # hold back one word: only the stream's final word has padding
            safe = len(pending) - WORD
            if safe > 0:
                buf += pending[:safe]
                emitted += safe
                del pending[:safe]
            yield from drain()
        tail = packed.valid_bytes - emitted
        buf += pending[:tail]
    else:
        for chunk in packed:
            buf += chunk
            yield from drain()
    if trailer is not None:
        buf += trailer() if callable(trailer) else trailer
    yield from drain()
    yield Packet(qpair, msg_id, seq, True, bytes(buf))
