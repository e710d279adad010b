"""Memory stack: allocation, translation/striping, streaming, arbitration."""

import random
from collections import deque

import numpy as np
import pytest

from farview.errors import (
    AccessError,
    AllocationError,
    BoundsError,
    TranslationFault,
)
from farview.memory import (
    CHANNEL_WORD,
    PAGE_SIZE,
    ChannelService,
    MemoryConfig,
    MemoryStack,
    RoundRobinArbiter,
    _Completion,
    arbitrate,
)

MB = 1024 * 1024


def small_stack(channels=2, capacity=16 * MB, stripe=64, regions=4, burst=65536):
    return MemoryStack(
        MemoryConfig(channels=channels, channel_capacity=capacity,
                     stripe=stripe, burst_bytes=burst),
        regions=regions,
    )


class TestAlloc:
    def test_one_byte_allocation_maps_one_page(self):
        ms = small_stack()
        h = ms.alloc_table(1, 1, 1, (1,))
        assert ms.mapped_pages == 1
        assert h.base_vaddr % PAGE_SIZE == 0

    def test_page_boundary_plus_one(self):
        ms = small_stack()
        h = ms.alloc_table(1, 2 * MB + 1, 1, (1,))
        assert h.pages == 2
        assert ms.mapped_pages == 2

    def test_size_zero_rejected(self):
        ms = small_stack()
        with pytest.raises(AllocationError):
            ms.alloc_table(1, 0, 1, (1,))

    def test_out_of_memory(self):
        ms = small_stack(capacity=4 * MB)
        with pytest.raises(AllocationError):
            ms.alloc_table(1, 64 * MB, 8, (8,))

    def test_alloc_free_bookkeeping_oracle(self):
        """100 random alloc/free cycles: mapped frames stay disjoint and the
        mapped byte total equals live bytes rounded up to pages."""
        ms = small_stack(capacity=32 * MB)
        rng = random.Random(0)
        live = []
        for _ in range(100):
            if live and rng.random() < 0.45:
                h = live.pop(rng.randrange(len(live)))
                ms.free_table(1, h)
            else:
                size = rng.randrange(1, 5 * MB)
                try:
                    live.append(ms.alloc_table(1, size, 8, (8,)))
                except AllocationError:
                    h = live.pop(0)
                    ms.free_table(1, h)
            frames = [
                (c, f) for pte in ms._pages.values() for c, f in enumerate(pte.frames)
            ]
            assert len(frames) == len(set(frames)), "frame double-mapping"
            expect_pages = sum(h.pages for h in live)
            assert ms.mapped_pages == expect_pages

    def test_free_then_translate_faults(self):
        ms = small_stack()
        h = ms.alloc_table(1, 100, 1, (1,))
        base = h.base_vaddr
        ms.free_table(1, h)
        with pytest.raises(TranslationFault):
            ms.translate(base)

    def test_foreign_qpair_cannot_free(self):
        ms = small_stack()
        h = ms.alloc_table(1, 100, 1, (1,))
        with pytest.raises(AccessError):
            ms.free_table(2, h)

    def test_double_free(self):
        ms = small_stack()
        h = ms.alloc_table(1, 100, 1, (1,))
        ms.free_table(1, h)
        with pytest.raises(AllocationError):
            ms.free_table(1, h)

    def test_pool_reuses_frames(self):
        ms = small_stack()
        h1 = ms.alloc_table(1, 3 * MB, 1, (1,))
        frames_before = ms.mapped_frames()
        ms.free_table(1, h1)
        h2 = ms.alloc_table(1, 3 * MB, 1, (1,))
        assert ms.mapped_frames() == frames_before

    def test_share_table_grants_access(self):
        ms = small_stack()
        h = ms.alloc_table(1, 1000, 1, (1,))
        with pytest.raises(AccessError):
            ms.read(2, h, h.base_vaddr, 10)
        ms.share_table(1, h, 2)
        assert ms.read(2, h, h.base_vaddr, 10) == bytes(10)
        ms.free_table(2, h)  # shared owner may free


class TestTranslate:
    def test_striping_rule_two_channels(self):
        ms = small_stack(channels=2, stripe=64)
        h = ms.alloc_table(1, MB, 1, (1,))
        chans = [ms.translate(h.base_vaddr + off)[0] for off in (0, 64, 128)]
        assert chans == [0, 1, 0]

    def test_single_channel_degenerate(self):
        ms = small_stack(channels=1)
        h = ms.alloc_table(1, MB, 1, (1,))
        for off in (0, 63, 64, 4096, 999_999):
            assert ms.translate(h.base_vaddr + off)[0] == 0

    def test_unmapped_fault(self):
        ms = small_stack()
        with pytest.raises(TranslationFault):
            ms.translate(0xDEAD0000)

    def test_injective_over_full_page(self):
        """Exhaustive over one 2 MiB page: vaddr -> (channel, phys) never
        collides, and the per-channel images tile the page's frames."""
        ms = small_stack(channels=2)
        h = ms.alloc_table(1, PAGE_SIZE, 1, (1,))
        vaddrs = np.arange(h.base_vaddr, h.base_vaddr + PAGE_SIZE, dtype=np.uint64)
        chan, phys = ms.translate_many(vaddrs)
        combined = chan.astype(np.uint64) * np.uint64(ms.config.channel_capacity) + phys
        assert len(np.unique(combined)) == PAGE_SIZE
        # per-channel images are dense frame extents
        for c in range(2):
            p = np.sort(phys[chan == c])
            assert len(p) == PAGE_SIZE // 2
            assert p[0] % ms.config.frame_bytes == 0
            assert (np.diff(p) == 1).all()

    def test_vectorized_matches_scalar(self):
        ms = small_stack(channels=3, stripe=128)
        h = ms.alloc_table(1, 3 * MB, 1, (1,))
        rng = random.Random(1)
        sample = [h.base_vaddr + rng.randrange(3 * MB) for _ in range(5000)]
        chan, phys = ms.translate_many(np.array(sample, dtype=np.uint64))
        for i, va in enumerate(sample):
            assert ms.translate(va) == (chan[i], phys[i])


class TestStreams:
    def test_write_read_round_trip_1mib(self):
        ms = small_stack()
        h = ms.alloc_table(1, 2 * MB, 8, (8,))
        data = random.Random(2).randbytes(MB)
        ms.write_stream(1, h, h.base_vaddr + 12345, data)
        assert ms.read(1, h, h.base_vaddr + 12345, MB) == data

    def test_read_across_page_boundary(self):
        ms = small_stack()
        h = ms.alloc_table(1, 5 * MB, 8, (8,))
        rng = random.Random(3)
        data = rng.randbytes(3 * MB)
        ms.write_stream(1, h, h.base_vaddr, data)
        start = PAGE_SIZE - 777
        assert ms.read(1, h, h.base_vaddr + start, 2000) == data[start : start + 2000]

    def test_zero_length_write_is_noop(self):
        ms = small_stack()
        h = ms.alloc_table(1, 1000, 1, (1,))
        before = ms.read(1, h, h.base_vaddr, 1000)
        ms.write_stream(1, h, h.base_vaddr + 500, b"")
        assert ms.read(1, h, h.base_vaddr, 1000) == before

    def test_last_writer_wins(self):
        ms = small_stack()
        h = ms.alloc_table(1, 1000, 1, (1,))
        ms.write_stream(1, h, h.base_vaddr, b"a" * 100)
        ms.write_stream(1, h, h.base_vaddr + 50, b"b" * 100)
        got = ms.read(1, h, h.base_vaddr, 150)
        assert got == b"a" * 50 + b"b" * 100

    def test_range_escape(self):
        ms = small_stack()
        h = ms.alloc_table(1, 1000, 1, (1,))
        with pytest.raises(BoundsError):
            ms.read(1, h, h.base_vaddr + 990, 20)
        with pytest.raises(BoundsError):
            ms.write_stream(1, h, h.base_vaddr + 990, b"x" * 20)

    def test_uninitialized_reads_zero(self):
        ms = small_stack()
        h = ms.alloc_table(1, 4096, 8, (8,))
        assert ms.read(1, h, h.base_vaddr, 4096) == bytes(4096)

    def test_fuzz_against_reference_array(self):
        """10,000 random writes/reads mirrored against a flat bytearray."""
        ms = small_stack(channels=3, stripe=64, capacity=8 * MB)
        size = 3 * MB  # spans pages, odd channel count
        h = ms.alloc_table(1, size, 8, (8,))
        ref = bytearray(size)
        rng = random.Random(4)
        for i in range(10_000):
            off = rng.randrange(size)
            n = rng.randrange(1, min(8192, size - off) + 1)
            if rng.random() < 0.5:
                blob = rng.randbytes(n)
                ms.write_stream(1, h, h.base_vaddr + off, blob)
                ref[off : off + n] = blob
            else:
                assert ms.read(1, h, h.base_vaddr + off, n) == bytes(ref[off : off + n])
        assert ms.read(1, h, h.base_vaddr, size) == bytes(ref)

    def test_gather_words_matches_read(self):
        ms = small_stack(channels=2)
        h = ms.alloc_table(1, 4 * MB, 8, (8,))
        rng = random.Random(5)
        data = rng.randbytes(4 * MB)
        ms.write_stream(1, h, h.base_vaddr, data)
        spans = []
        for _ in range(500):
            start = rng.randrange(0, 4 * MB - 256, CHANNEL_WORD)
            n = rng.choice((64, 128, 192))
            spans.append((h.base_vaddr + start, n))
        got = ms.gather_words(1, h, spans)
        expect = b"".join(data[s - h.base_vaddr : s - h.base_vaddr + n] for s, n in spans)
        assert got == expect

    def test_channel_split_of_128kib_read(self):
        """A 128 KiB read over 2 channels lands 64 KiB ± one stripe on each."""
        ms = small_stack(channels=2, burst=8192)
        h = ms.alloc_table(1, MB, 8, (8,))
        ms.read(1, h, h.base_vaddr, 128 * 1024, region=1)
        per_chan = [svc.request_bytes[1] for svc in ms.read_services]
        assert len(per_chan) == 2
        for got in per_chan:
            assert abs(got - 64 * 1024) <= ms.config.stripe
        assert all(svc.grant_counts[1] >= 1 for svc in ms.read_services)


class TestArbiter:
    def test_single_region_gets_everything(self):
        arb = RoundRobinArbiter(4)
        queues = [deque(), deque(range(10)), deque(), deque()]
        grants = [arb.next_grant(queues) for _ in range(10)]
        assert all(g[0] == 1 for g in grants)
        assert arb.grant_counts[1] == 10

    def test_two_regions_split_evenly(self):
        arb = RoundRobinArbiter(2)
        queues = [deque(range(500)), deque(range(500))]
        while arb.next_grant(queues):
            pass
        assert abs(arb.grant_counts[0] - arb.grant_counts[1]) <= 1
        assert sum(arb.grant_counts) == 1000

    def test_six_regions_sliding_window_share(self):
        """Continuous demand across 6 regions: every window of 6k grants gives
        each region k ± 1."""
        r = 6
        arb = RoundRobinArbiter(r)
        queues = [deque(range(600)) for _ in range(r)]
        while arb.next_grant(queues):
            pass
        log = arb.grant_log
        for k in (1, 5, 20):
            win = r * k
            for start in range(0, len(log) - win + 1, win):
                window = log[start : start + win]
                for region in range(r):
                    assert abs(window.count(region) - k) <= 1

    def test_stateless_arbitrate(self):
        queues = [deque(), deque(["x"]), deque()]
        region, req = arbitrate(queues)
        assert region == 1 and req == "x"
        assert arbitrate(queues) is None

    def test_channel_service_exact_round_robin(self):
        """Queued demand from every region drains in strict region rotation,
        regardless of submission interleaving."""
        regions = 3
        svc = ChannelService("test-svc", regions)
        try:
            n = 200
            completion = _Completion(regions * n)
            # enqueue all demand up front, region-major, before service can
            # outpace the submissions
            for r in range(regions):
                for _ in range(n):
                    svc.submit(r, lambda: None, 64, completion)
            completion.event.wait(10)
            log = svc.grant_log
            assert svc.grant_counts == [n] * regions
            # from the first grant where all queues were visible, rotation
            # is exact: every window of 3k grants holds k ± 1 per region
            saturated = [
                r for r, mask in zip(log, svc.active_log) if mask == 0b111
            ]
            assert len(saturated) >= regions * (n - 2)
            for k in (1, 4, 10):
                win = regions * k
                for start in range(0, len(saturated) - win + 1, win):
                    window = saturated[start : start + win]
                    counts = [window.count(r) for r in range(regions)]
                    assert max(counts) - min(counts) <= 1
        finally:
            svc.close()
