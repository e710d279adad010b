"""Buffer-pool memory: paged virtual space striped over multiple channels.

Virtual space is carved into naturally aligned 2 MiB pages. A page is backed
by one physical frame per channel: stripe i of the page lives on channel
(i mod C), and the stripes belonging to one channel are packed densely inside
its frame, so

    channel       = (page_offset // stripe) mod C
    physical_off  = frame_base + (stripe_index // C) * stripe + intra_stripe

A complete page table (no miss path) maps virtual pages to frames and owner
queue pairs. Streaming reads/writes fan out into burst-sized per-channel
requests that queue per region; a service worker per channel and direction
(read/write fully decoupled) drains the queues in round-robin region order,
which is where fairness is enforced and measured. Requests outstanding in
the queues keep a region's demand visible while its worker consumes earlier
data, so grants interleave exactly round-robin under saturation.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import (
    AccessError,
    AllocationError,
    BoundsError,
    TranslationFault,
)

PAGE_SIZE = 2 * 1024 * 1024  # fixed: naturally aligned 2 MiB pages
PAGE_SHIFT = 21
PAGE_MASK = PAGE_SIZE - 1
CHANNEL_WORD = 64


@dataclass(frozen=True)
class MemoryConfig:
    channels: int = 2
    channel_capacity: int = 256 * 1024 * 1024
    stripe: int = 64
    burst_bytes: int = 65536  # max bytes served per arbiter grant

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("need at least one channel")
        if self.stripe < CHANNEL_WORD or self.stripe % CHANNEL_WORD:
            raise ValueError("stripe must be a multiple of the 64-byte channel word")
        if PAGE_SIZE % self.stripe:
            raise ValueError("stripe must divide the 2 MiB page size")
        if self.burst_bytes % self.stripe:
            raise ValueError("burst_bytes must be a multiple of stripe")

    @property
    def page_size(self) -> int:
        return PAGE_SIZE

    @property
    def channel_word(self) -> int:
        return CHANNEL_WORD

    @property
    def stripes_per_page(self) -> int:
        return PAGE_SIZE // self.stripe

    @property
    def frame_bytes(self) -> int:
        """Per-channel backing for one page (padded up for C ∤ stripe count)."""
        per_chan = -(-self.stripes_per_page // self.channels)
        return per_chan * self.stripe

    @property
    def frames_per_channel(self) -> int:
        return self.channel_capacity // self.frame_bytes


@dataclass
class PageTableEntry:
    vpage: int
    frames: tuple[int, ...]  # one frame index per channel
    owner_qpairs: set[int]


@dataclass
class TableHandle:
    """A live allocation holding one base table."""

    qpair: int
    base_vaddr: int
    size: int
    tuple_bytes: int
    column_bytes: tuple[int, ...]
    live: bool = True

    def __post_init__(self):
        if sum(self.column_bytes) != self.tuple_bytes:
            raise ValueError(
                f"column widths {self.column_bytes} do not sum to tuple width {self.tuple_bytes}"
            )

    @property
    def pages(self) -> int:
        return -(-self.size // PAGE_SIZE)


@dataclass(frozen=True)
class ChannelRequest:
    channel: int
    offset: int
    length: int
    direction: str  # "read" | "write"


class RoundRobinArbiter:
    """Round-robin grant scheduler over per-region request queues."""

    def __init__(self, regions: int):
        self.regions = regions
        self.cursor = regions - 1  # first grant goes to region 0
        self.grant_counts = [0] * regions
        self.grant_log: list[int] = []
        self.active_log: list[int] = []  # bitmask of demanding regions per grant

    def next_grant(self, pending) -> tuple[int, object] | None:
        """Pop the next request in round-robin region order, or None if all
        queues are empty."""
        mask = 0
        pick = None
        for i in range(1, self.regions + 1):
            r = (self.cursor + i) % self.regions
            if pending[r]:
                mask |= 1 << r
                if pick is None:
                    pick = r
        if pick is None:
            return None
        req = pending[pick].popleft()
        self.cursor = pick
        self.grant_counts[pick] += 1
        self.grant_log.append(pick)
        self.active_log.append(mask)
        return (pick, req)


def arbitrate(pending) -> tuple[int, object] | None:
    """One-shot round-robin pick across per-region queues (stateless form)."""
    return RoundRobinArbiter(len(pending)).next_grant(pending)


class _Completion:
    __slots__ = ("event", "remaining", "lock")

    def __init__(self, count: int):
        self.event = threading.Event()
        self.remaining = count
        self.lock = threading.Lock()
        if count == 0:
            self.event.set()

    def done_one(self):
        with self.lock:
            self.remaining -= 1
            if self.remaining == 0:
                self.event.set()


class ChannelService:
    """One service worker per (channel, direction).

    Regions enqueue copy requests; the worker drains the queues through a
    round-robin arbiter and executes each copy itself, serializing the
    channel the way a single memory controller port would.
    """

    def __init__(self, name: str, regions: int):
        self.name = name
        self.queues = [deque() for _ in range(regions)]
        self.arbiter = RoundRobinArbiter(regions)
        self.request_bytes = [0] * regions
        self._cond = threading.Condition()
        self._stop = False
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def submit(self, region: int, op, nbytes: int, completion: _Completion) -> None:
        with self._cond:
            self.queues[region].append((op, nbytes, completion))
            self._cond.notify()

    def _run(self) -> None:
        while True:
            with self._cond:
                while True:
                    if self._stop:
                        return
                    grant = self.arbiter.next_grant(self.queues)
                    if grant is not None:
                        break
                    self._cond.wait()
                region, (op, nbytes, completion) = grant
                self.request_bytes[region] += nbytes
            op()
            completion.done_one()

    @property
    def grant_counts(self):
        return self.arbiter.grant_counts

    @property
    def grant_log(self):
        return self.arbiter.grant_log

    @property
    def active_log(self):
        return self.arbiter.active_log

    def reset_stats(self) -> None:
        with self._cond:
            a = self.arbiter
            a.grant_counts = [0] * a.regions
            a.grant_log = []
            a.active_log = []
            self.request_bytes = [0] * a.regions

    def close(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        self._thread.join(timeout=5)


class MemoryStack:
    """Pool allocator + MMU + streaming access over in-process channel arrays.

    Allocation and mapping mutate under a lock; read/write streams from
    distinct regions run concurrently, serialized per channel only by the
    service workers. Per-range write exclusivity is the caller's contract.
    """

    def __init__(self, config: MemoryConfig | None = None, regions: int = 8):
        self.config = config or MemoryConfig()
        cfg = self.config
        self.regions = regions
        self._channels = [
            np.zeros(cfg.frames_per_channel * cfg.frame_bytes, dtype=np.uint8)
            for _ in range(cfg.channels)
        ]
        self._free_frames = [deque(range(cfg.frames_per_channel)) for _ in range(cfg.channels)]
        self._pages: dict[int, PageTableEntry] = {}
        self._handles: dict[int, TableHandle] = {}
        self._vpage_to_base: dict[int, int] = {}
        self._next_vpage = 1  # keep vaddr 0 unmapped
        self._lock = threading.Lock()
        self.read_services = [
            ChannelService(f"mem-rd-{c}", regions) for c in range(cfg.channels)
        ]
        self.write_services = [
            ChannelService(f"mem-wr-{c}", regions) for c in range(cfg.channels)
        ]
        self.request_counts: dict[tuple[str, int], int] = {}
        self._count_lock = threading.Lock()

    def close(self) -> None:
        for svc in self.read_services + self.write_services:
            svc.close()

    # ------------------------------------------------------------------
    # allocation

    def alloc_table(self, qpair: int, size: int, tuple_bytes: int, column_bytes) -> TableHandle:
        if size <= 0:
            raise AllocationError(f"allocation size must be positive, got {size}")
        column_bytes = tuple(column_bytes)
        npages = -(-size // PAGE_SIZE)
        cfg = self.config
        with self._lock:
            if any(len(f) < npages for f in self._free_frames):
                raise AllocationError(
                    f"out of memory: need {npages} frames per channel, "
                    f"have {[len(f) for f in self._free_frames]}"
                )
            base_vpage = self._next_vpage
            self._next_vpage += npages
            handle = TableHandle(
                qpair=qpair,
                base_vaddr=base_vpage << PAGE_SHIFT,
                size=size,
                tuple_bytes=tuple_bytes,
                column_bytes=column_bytes,
            )
            for i in range(npages):
                frames = tuple(self._free_frames[c].pop() for c in range(cfg.channels))
                vpage = base_vpage + i
                self._pages[vpage] = PageTableEntry(vpage, frames, {qpair})
                self._vpage_to_base[vpage] = handle.base_vaddr
            self._handles[handle.base_vaddr] = handle
            return handle

    def free_table(self, qpair: int, handle: TableHandle) -> None:
        with self._lock:
            live = self._handles.get(handle.base_vaddr)
            if live is None or not handle.live:
                raise AllocationError(f"double free of table at 0x{handle.base_vaddr:x}")
            base_vpage = handle.base_vaddr >> PAGE_SHIFT
            pte = self._pages[base_vpage]
            if qpair not in pte.owner_qpairs:
                raise AccessError(f"queue pair {qpair} does not own table 0x{handle.base_vaddr:x}")
            for i in range(handle.pages):
                pte = self._pages.pop(base_vpage + i)
                self._vpage_to_base.pop(base_vpage + i)
                for c, frame in enumerate(pte.frames):
                    self._free_frames[c].append(frame)
            del self._handles[handle.base_vaddr]
            handle.live = False
            live.live = False

    def share_table(self, qpair: int, handle: TableHandle, other_qpair: int) -> None:
        with self._lock:
            base_vpage = handle.base_vaddr >> PAGE_SHIFT
            if base_vpage not in self._pages:
                raise TranslationFault(f"table 0x{handle.base_vaddr:x} is not mapped")
            if qpair not in self._pages[base_vpage].owner_qpairs:
                raise AccessError(f"queue pair {qpair} does not own table 0x{handle.base_vaddr:x}")
            for i in range(handle.pages):
                self._pages[base_vpage + i].owner_qpairs.add(other_qpair)

    def release_qpair(self, qpair: int) -> None:
        """Drop a closing queue pair from all owner sets; free tables it owned
        exclusively. Shared tables persist for their other owners."""
        with self._lock:
            doomed = []
            for base, handle in self._handles.items():
                pte = self._pages[base >> PAGE_SHIFT]
                if qpair in pte.owner_qpairs:
                    if pte.owner_qpairs == {qpair}:
                        doomed.append(handle)
                    else:
                        for i in range(handle.pages):
                            self._pages[(base >> PAGE_SHIFT) + i].owner_qpairs.discard(qpair)
        for handle in doomed:
            self.free_table(qpair, handle)

    def find_handle(self, vaddr: int) -> TableHandle:
        base = self._vpage_to_base.get(vaddr >> PAGE_SHIFT)
        if base is None:
            raise TranslationFault(f"vaddr 0x{vaddr:x} is not mapped")
        return self._handles[base]

    # ------------------------------------------------------------------
    # translation

    def translate(self, vaddr: int) -> tuple[int, int]:
        """Map one virtual byte address to (channel, physical byte offset)."""
        pte = self._pages.get(vaddr >> PAGE_SHIFT)
        if pte is None:
            raise TranslationFault(f"vaddr 0x{vaddr:x} is not mapped")
        cfg = self.config
        off = vaddr & PAGE_MASK
        sidx = off // cfg.stripe
        channel = sidx % cfg.channels
        phys = (
            pte.frames[channel] * cfg.frame_bytes
            + (sidx // cfg.channels) * cfg.stripe
            + off % cfg.stripe
        )
        return channel, phys

    def translate_many(self, vaddrs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized translate over a uint64 array of mapped addresses."""
        cfg = self.config
        vaddrs = np.asarray(vaddrs, dtype=np.uint64)
        vpages = vaddrs >> PAGE_SHIFT
        frame_lut = {}
        for vp in np.unique(vpages):
            pte = self._pages.get(int(vp))
            if pte is None:
                raise TranslationFault(f"vaddr page 0x{int(vp) << PAGE_SHIFT:x} is not mapped")
            frame_lut[int(vp)] = pte.frames
        off = vaddrs & np.uint64(PAGE_MASK)
        sidx = off // np.uint64(cfg.stripe)
        channel = (sidx % np.uint64(cfg.channels)).astype(np.int64)
        frame = np.empty(len(vaddrs), dtype=np.uint64)
        for vp, frames in frame_lut.items():
            mask = vpages == np.uint64(vp)
            frame[mask] = np.asarray(frames, dtype=np.uint64)[channel[mask]]
        phys = (
            frame * np.uint64(cfg.frame_bytes)
            + (sidx // np.uint64(cfg.channels)) * np.uint64(cfg.stripe)
            + off % np.uint64(cfg.stripe)
        )
        return channel, phys

    # ------------------------------------------------------------------
    # streaming access

    def _check_range(self, qpair: int, handle: TableHandle, vaddr: int, length: int) -> None:
        if not handle.live:
            raise TranslationFault(f"table 0x{handle.base_vaddr:x} already freed")
        if vaddr < handle.base_vaddr or vaddr + length > handle.base_vaddr + handle.size:
            raise BoundsError(
                f"range [0x{vaddr:x}, +{length}) escapes table "
                f"[0x{handle.base_vaddr:x}, +{handle.size})"
            )
        pte = self._pages.get(vaddr >> PAGE_SHIFT)
        if pte is None:
            raise TranslationFault(f"vaddr 0x{vaddr:x} is not mapped")
        if qpair is not None and qpair not in pte.owner_qpairs:
            raise AccessError(f"queue pair {qpair} cannot access table 0x{handle.base_vaddr:x}")

    def read_stream(self, qpair: int, handle: TableHandle, vaddr: int, length: int, region: int = 0):
        """Yield the stored bytes of [vaddr, vaddr+length) in address order.

        Fans out per-channel stripe-run bursts that complete in arbiter order
        and re-merge into virtual order page by page."""
        self._check_range(qpair, handle, vaddr, length)
        pos = vaddr
        remaining = length
        while remaining > 0:
            page_end = (pos | PAGE_MASK) + 1
            span = min(remaining, page_end - pos)
            yield self._read_page_span(pos, span, region)
            pos += span
            remaining -= span

    def read(self, qpair: int, handle: TableHandle, vaddr: int, length: int, region: int = 0) -> bytes:
        return b"".join(self.read_stream(qpair, handle, vaddr, length, region))

    def _read_page_span(self, vaddr: int, length: int, region: int) -> bytes:
        cfg = self.config
        pte = self._pages[vaddr >> PAGE_SHIFT]
        poff = vaddr & PAGE_MASK
        S, C = cfg.stripe, cfg.channels
        s0 = poff // S
        s1 = (poff + length - 1) // S
        nstripes = s1 - s0 + 1
        staging = np.empty(nstripes * S, dtype=np.uint8)
        staged = staging.reshape(nstripes, S)
        runs = []
        submits = []
        for c in range(C):
            first = s0 + ((c - s0) % C)
            if first > s1:
                continue
            count = (s1 - first) // C + 1
            base = pte.frames[c] * cfg.frame_bytes + (first // C) * S
            run_buf = np.empty(count * S, dtype=np.uint8)
            runs.append((c, first, count, run_buf))
            src = self._channels[c]
            done = 0
            nbytes = count * S
            while done < nbytes:
                n = min(cfg.burst_bytes, nbytes - done)
                submits.append((c, _copy_op(run_buf, done, src, base + done, n), n))
                done += n
        completion = _Completion(len(submits))
        for c, op, n in submits:
            self._bump("read", c)
            self.read_services[c].submit(region, op, n, completion)
        completion.event.wait()
        for c, first, count, run_buf in runs:
            staged[first - s0 :: C] = run_buf.reshape(count, S)
        head = poff - s0 * S
        return staging[head : head + length].tobytes()

    def write_stream(self, qpair: int, handle: TableHandle, vaddr: int, data: bytes, region: int = 0) -> None:
        """Store data at [vaddr, vaddr+len(data)); last writer wins per byte."""
        if not data:
            self._check_range(qpair, handle, vaddr, 0)
            return
        self._check_range(qpair, handle, vaddr, len(data))
        view = np.frombuffer(data, dtype=np.uint8)
        pos = vaddr
        off = 0
        while off < len(data):
            page_end = (pos | PAGE_MASK) + 1
            span = min(len(data) - off, page_end - pos)
            self._write_page_span(pos, view[off : off + span], region)
            pos += span
            off += span

    def _write_page_span(self, vaddr: int, data: np.ndarray, region: int) -> None:
        cfg = self.config
        pte = self._pages[vaddr >> PAGE_SHIFT]
        poff = vaddr & PAGE_MASK
        S, C = cfg.stripe, cfg.channels
        length = len(data)
        end = poff + length
        submits = []

        cursor = poff
        dcur = 0
        head = min(length, -poff % S)
        if head:
            submits += self._sub_stripe_write(pte, cursor, data[:head])
            cursor += head
            dcur += head
        nfull = (end - cursor) // S
        if nfull > 0:
            fs0 = cursor // S
            src = data[dcur : dcur + nfull * S].reshape(nfull, S)
            for c in range(C):
                first = fs0 + ((c - fs0) % C)
                if first >= fs0 + nfull:
                    continue
                count = (fs0 + nfull - 1 - first) // C + 1
                base = pte.frames[c] * cfg.frame_bytes + (first // C) * S
                run = np.ascontiguousarray(src[first - fs0 :: C]).reshape(count * S)
                dst = self._channels[c]
                done = 0
                nbytes = count * S
                while done < nbytes:
                    n = min(cfg.burst_bytes, nbytes - done)
                    submits.append((c, _copy_op(dst, base + done, run, done, n), n))
                    done += n
            cursor += nfull * S
            dcur += nfull * S
        if dcur < length:
            submits += self._sub_stripe_write(pte, cursor, data[dcur:])

        completion = _Completion(len(submits))
        for c, op, n in submits:
            self._bump("write", c)
            self.write_services[c].submit(region, op, n, completion)
        completion.event.wait()

    def _sub_stripe_write(self, pte: PageTableEntry, off: int, data: np.ndarray):
        """Write path for a piece inside one stripe; off is page-relative."""
        cfg = self.config
        sidx = off // cfg.stripe
        c = sidx % cfg.channels
        phys = (
            pte.frames[c] * cfg.frame_bytes
            + (sidx // cfg.channels) * cfg.stripe
            + off % cfg.stripe
        )
        dst = self._channels[c]
        return [(c, _copy_op(dst, phys, np.ascontiguousarray(data), 0, len(data)), len(data))]

    def gather_words(self, qpair: int, handle: TableHandle, spans, region: int = 0) -> bytes:
        """Fetch a list of 64-byte-aligned (vaddr, length) spans in order.

        The smart-addressing read path: spans are word-multiples, fetched
        with vectorized translation; each arbiter grant covers up to a burst
        of span words per channel."""
        cfg = self.config
        total = sum(n for _, n in spans)
        if total == 0:
            return b""
        for va, n in spans:
            if va % CHANNEL_WORD or n % CHANNEL_WORD:
                raise BoundsError("gather spans must be 64-byte aligned words")
            self._check_range(qpair, handle, va, n)
        waddrs = np.concatenate(
            [np.uint64(va) + CHANNEL_WORD * np.arange(n // CHANNEL_WORD, dtype=np.uint64)
             for va, n in spans]
        )
        channel, phys = self.translate_many(waddrs)
        out = np.empty(total, dtype=np.uint8)
        out_words = out.reshape(-1, CHANNEL_WORD)
        submits = []
        scatters = []
        words_per_burst = max(1, cfg.burst_bytes // CHANNEL_WORD)
        for c in range(cfg.channels):
            mask = channel == c
            nwords = int(mask.sum())
            if not nwords:
                continue
            word_idx = (phys[mask] // CHANNEL_WORD).astype(np.int64)
            gathered = np.empty((nwords, CHANNEL_WORD), dtype=np.uint8)
            scatters.append((mask, gathered))
            chan_words = self._channels[c].reshape(-1, CHANNEL_WORD)
            for start in range(0, nwords, words_per_burst):
                idx = word_idx[start : start + words_per_burst]
                submits.append((
                    c,
                    _gather_op(gathered, start, chan_words, idx),
                    len(idx) * CHANNEL_WORD,
                ))
        completion = _Completion(len(submits))
        for c, op, n in submits:
            self._bump("read", c)
            self.read_services[c].submit(region, op, n, completion)
        completion.event.wait()
        for mask, gathered in scatters:
            out_words[mask] = gathered
        return out.tobytes()

    # ------------------------------------------------------------------
    # audits

    def _bump(self, direction: str, channel: int) -> None:
        key = (direction, channel)
        with self._count_lock:
            self.request_counts[key] = self.request_counts.get(key, 0) + 1

    @property
    def mapped_pages(self) -> int:
        return len(self._pages)

    @property
    def live_handles(self) -> list[TableHandle]:
        return list(self._handles.values())

    def mapped_frames(self) -> set[tuple[int, int]]:
        return {
            (c, f) for pte in self._pages.values() for c, f in enumerate(pte.frames)
        }

    def live_bytes(self) -> int:
        return sum(h.size for h in self._handles.values())


def _copy_op(dst: np.ndarray, dst_off: int, src: np.ndarray, src_off: int, n: int):
    def op():
        dst[dst_off : dst_off + n] = src[src_off : src_off + n]

    return op


def _gather_op(dst_words: np.ndarray, dst_start: int, chan_words: np.ndarray, idx: np.ndarray):
    def op():
        dst_words[dst_start : dst_start + len(idx)] = chan_words[idx]

    return op
