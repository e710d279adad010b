"""Hash-table machinery for the grouping operators.

CuckooTableSet: K parallel tables, each with its own multiply-shift hash.
A key lives in at most one slot across all tables. Inserting into a full
slot displaces the resident into the next table, chasing up to max_evictions
displacements; a failed chain is rolled back so the tables are untouched and
the incoming entry overflows instead (guaranteeing a key already emitted can
never lose residency later).

LruShiftRegister: small true-LRU window of the most recent keys, covering
the table-update hazard: freshly inserted entries only become visible to
lookups after `latency` further operations, mirroring a pipelined update
path; the cache answers for those in-flight keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field

_M64 = (1 << 64) - 1


def derive_seeds(base_seed: int, count: int) -> tuple[int, ...]:
    """Distinct odd 64-bit multipliers from one configuration seed."""
    seeds = []
    x = (base_seed * 0x9E3779B97F4A7C15 + 0x1234567) & _M64
    while len(seeds) < count:
        # splitmix64 step
        x = (x + 0x9E3779B97F4A7C15) & _M64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
        z ^= z >> 31
        z |= 1
        if z not in seeds:
            seeds.append(z)
    return tuple(seeds)


@dataclass
class Slot:
    key: bytes
    value: object
    seq: int  # operation index at insert time; controls hazard visibility


class CuckooTableSet:
    """K hash tables holding (key, value) slots, collision-free by eviction."""

    def __init__(self, tables: int = 4, slots_per_table: int = 65536,
                 max_evictions: int = 32, seed: int = 1):
        if slots_per_table & (slots_per_table - 1):
            raise ValueError(f"slots_per_table must be a power of two, got {slots_per_table}")
        self.k = tables
        self.slots_per_table = slots_per_table
        self.max_evictions = max_evictions
        self.shift = 64 - slots_per_table.bit_length() + 1
        self.seeds = derive_seeds(seed, tables)
        self.tables: list[list[Slot | None]] = [
            [None] * slots_per_table for _ in range(tables)
        ]
        self.size = 0

    def _hash(self, table: int, key: bytes) -> int:
        k = int.from_bytes(key, "little")
        return ((k * self.seeds[table]) & _M64) >> self.shift

    def lookup(self, key: bytes, now: int | None = None, latency: int = 0) -> Slot | None:
        """Find the resident slot for key.

        With `now`/`latency` given, entries inserted within the last
        `latency` operations are invisible (the pipelined-update hazard)."""
        for t in range(self.k):
            slot = self.tables[t][self._hash(t, key)]
            if slot is not None and slot.key == key:
                if now is not None and now - slot.seq < latency:
                    return None
                return slot
        return None

    def insert(self, key: bytes, value: object = None, seq: int = 0) -> bool:
        """Place a new entry, displacing residents as needed.

        Returns False (tables unchanged) if no slot frees up within
        max_evictions displacements — the caller sends the entry to the
        overflow buffer. The key must not already be resident."""
        entry = Slot(key, value, seq)
        # fast path: an empty natural slot in any table
        for t in range(self.k):
            idx = self._hash(t, key)
            slot = self.tables[t][idx]
            if slot is None:
                self.tables[t][idx] = entry
                self.size += 1
                return True
            if slot.key == key:
                raise ValueError(f"key {key!r} already resident")
        # displacement chain, remembered for rollback
        path: list[tuple[int, int, Slot]] = []
        cur = entry
        table = 0
        for _ in range(self.max_evictions):
            idx = self._hash(table, cur.key)
            victim = self.tables[table][idx]
            self.tables[table][idx] = cur
            path.append((table, idx, victim))
            if victim is None:
                self.size += 1
                return True
            cur = victim
            table = (table + 1) % self.k
            # try the victim's empty slots before displacing again
            for t in range(self.k):
                vidx = self._hash(t, cur.key)
                if self.tables[t][vidx] is None:
                    self.tables[t][vidx] = cur
                    self.size += 1
                    return True
        # bound exceeded: restore every displaced slot, newest first
        for table, idx, victim in reversed(path):
            self.tables[table][idx] = victim
        return False

    def residency_count(self, key: bytes) -> int:
        return sum(
            1
            for t in range(self.k)
            if (s := self.tables[t][self._hash(t, key)]) is not None and s.key == key
        )

    def items(self):
        for table in self.tables:
            for slot in table:
                if slot is not None:
                    yield slot


class LruShiftRegister:
    """Fixed-depth recency window with true LRU order.

    cells[0] is the most recent key; an access shifts the hit entry back to
    the front; an insert shifts everything right and drops the tail."""

    def __init__(self, depth: int):
        if depth < 0:
            raise ValueError("depth must be non-negative")
        self.depth = depth
        self.cells: list[tuple[bytes, object]] = []

    def lookup(self, key: bytes):
        """Return the cached value (moving the key to the front), else None."""
        for i, (k, v) in enumerate(self.cells):
            if k == key:
                del self.cells[i]
                self.cells.insert(0, (k, v))
                return v
        return None

    def contains(self, key: bytes) -> bool:
        return any(k == key for k, _ in self.cells)

    def insert(self, key: bytes, value: object = None) -> None:
        if self.depth == 0:
            return
        for i, (k, _) in enumerate(self.cells):
            if k == key:
                del self.cells[i]
                break
        self.cells.insert(0, (key, value))
        if len(self.cells) > self.depth:
            self.cells.pop()

    def evict(self, key: bytes) -> None:
        self.cells = [(k, v) for k, v in self.cells if k != key]

    def keys(self) -> list[bytes]:
        return [k for k, _ in self.cells]


@dataclass
class OverflowBuffer:
    """Entries that exceeded the eviction bound; shipped in the response
    trailer and deduplicated / merged client-side. Append-only per request."""

    entries: list = field(default_factory=list)

    def append(self, entry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)
