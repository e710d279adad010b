"""AES-128 counter-mode transform for at-rest table data and responses.

Counter block layout: nonce (96 bits) ‖ block counter (32 bits, big-endian),
the counter incrementing per 16-byte block and wrapping modulo 2^32 while
the nonce stays fixed. The keystream is the block cipher applied to the
counter blocks; encryption and decryption are the same XOR, so the transform
is an involution and preserves length for any byte count.

The AES block core comes from the `cryptography` package (ECB over the
counter blocks); the counter discipline and streaming offsets live here.
(nonce, counter) pairs must never repeat under one key within a table's
lifetime — that contract belongs to the client issuing the parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

_U32 = 1 << 32


@dataclass(frozen=True)
class CryptoParams:
    key: bytes  # 16 bytes
    nonce: bytes  # 12 bytes
    initial_counter: int = 0

    def __post_init__(self):
        if len(self.key) != 16:
            raise ValueError(f"AES-128 key must be 16 bytes, got {len(self.key)}")
        if len(self.nonce) != 12:
            raise ValueError(f"nonce must be 96 bits, got {len(self.nonce)} bytes")
        if not 0 <= self.initial_counter < _U32:
            raise ValueError("initial counter must fit 32 bits")

    def to_words(self) -> tuple[int, ...]:
        """Pack as five u64 param words: key(2), nonce(2, low 12 bytes), counter."""
        k0, k1 = struct.unpack("<QQ", self.key)
        n0, n1 = struct.unpack("<QQ", self.nonce + b"\x00\x00\x00\x00")
        return (k0, k1, n0, n1, self.initial_counter)

    @classmethod
    def from_words(cls, words) -> "CryptoParams":
        k0, k1, n0, n1, ctr = words
        key = struct.pack("<QQ", k0, k1)
        nonce = struct.pack("<QQ", n0, n1)[:12]
        return cls(key, nonce, ctr)


def _keystream(cp: CryptoParams, first_block: int, nblocks: int) -> np.ndarray:
    counters = (np.arange(first_block, first_block + nblocks, dtype=np.uint64)
                + np.uint64(cp.initial_counter)) % np.uint64(_U32)
    blocks = np.empty((nblocks, 16), dtype=np.uint8)
    blocks[:, :12] = np.frombuffer(cp.nonce, dtype=np.uint8)
    blocks[:, 12:] = counters.astype(">u4").view(np.uint8).reshape(nblocks, 4)
    enc = Cipher(algorithms.AES(cp.key), modes.ECB()).encryptor()
    ks = enc.update(blocks.tobytes()) + enc.finalize()
    return np.frombuffer(ks, dtype=np.uint8)


class CtrCipher:
    """Streaming CTR transform tracking the byte offset across chunks."""

    def __init__(self, cp: CryptoParams, byte_offset: int = 0):
        self.cp = cp
        self.offset = byte_offset

    def update(self, data: bytes) -> bytes:
        if not data:
            return b""
        first_block = self.offset // 16
        skip = self.offset % 16
        nblocks = (skip + len(data) + 15) // 16
        ks = _keystream(self.cp, first_block, nblocks)[skip : skip + len(data)]
        out = np.frombuffer(data, dtype=np.uint8) ^ ks
        self.offset += len(data)
        return out.tobytes()


def aes_ctr_transform(data: bytes, cp: CryptoParams) -> bytes:
    """One-shot CTR transform; its own inverse under identical parameters."""
    return CtrCipher(cp).update(data)
