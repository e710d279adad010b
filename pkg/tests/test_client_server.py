"""End-to-end client/server flows over loopback sockets."""

import random
import struct
import threading
import time

import pytest

import farview as fv
from farview import params as P
from farview.errors import (
    AccessError,
    AllocationError,
    BoundsError,
    PatternError,
    RegionsExhaustedError,
    RequestError,
)
from farview.operators.grouping import AggFn, AggregateSpec, Measure
from farview.operators.predicate import (
    ColumnType,
    Combiner,
    Comparator,
    PredicateTerm,
    SelectionPredicate,
)
from farview.server import FarviewServer, ServerConfig
from farview.wire import Verb, VerbKind


def connect(server):
    return fv.openConnection(server.address)


def fill_table(qp, name, data, widths=(8,) * 8):
    ft = fv.FTable(name, len(data), sum(widths), widths)
    fv.allocTableMem(qp, ft)
    fv.tableWrite(qp, ft, data)
    return ft


class TestConnectionLifecycle:
    def test_first_connection_region_zero(self, server):
        qp = connect(server)
        assert qp.region_id == 0
        assert qp.qpair_id == 1
        fv.closeConnection(qp)

    def test_seventh_connection_refused_with_code(self, server):
        qps = [connect(server) for _ in range(6)]
        with pytest.raises(RegionsExhaustedError):
            connect(server)
        for qp in qps:
            fv.closeConnection(qp)

    def test_open_close_open(self, server):
        qp = connect(server)
        fv.closeConnection(qp)
        qp2 = connect(server)
        assert qp2.open
        fv.closeConnection(qp2)

    def test_close_releases_region_for_reuse(self, server):
        qps = [connect(server) for _ in range(6)]
        fv.closeConnection(qps[2])
        time.sleep(0.05)
        qp = connect(server)  # reuses the freed region
        assert qp.region_id == 2
        fv.closeConnection(qp)
        for i in (0, 1, 3, 4, 5):
            fv.closeConnection(qps[i])

    def test_clean_shutdown_no_leaked_allocations(self):
        server = FarviewServer(ServerConfig(channel_capacity_bytes=16 * 1024 * 1024)).start()
        server.stop()
        assert server.memory.mapped_pages == 0
        assert server.region_table.bound_count() == 0

    def test_resource_hygiene_after_close(self, server):
        qp = connect(server)
        data = bytes(128 * 64)
        fill_table(qp, "tmp", data)
        fv.closeConnection(qp)
        deadline = time.time() + 2
        while time.time() < deadline and server.region_table.bound_count():
            time.sleep(0.01)
        assert server.region_table.bound_count() == 0
        assert server.memory.mapped_pages == 0  # sole-owner tables are reclaimed


class TestTables:
    def test_alloc_base_is_2mib_aligned(self, server):
        qp = connect(server)
        ft = fv.FTable("t", 1024 * 1024, 64, (8,) * 8)
        fv.allocTableMem(qp, ft)
        assert ft.base_vaddr % (2 * 1024 * 1024) == 0
        fv.closeConnection(qp)

    def test_free_twice_errors(self, server):
        qp = connect(server)
        ft = fv.FTable("t", 4096, 64, (8,) * 8)
        fv.allocTableMem(qp, ft)
        base = ft.base_vaddr
        fv.freeTableMem(qp, ft)
        ft.base_vaddr = base
        with pytest.raises(Exception):
            fv.freeTableMem(qp, ft)
        fv.closeConnection(qp)

    def test_write_read_identity_64k(self, server):
        qp = connect(server)
        data = random.Random(1).randbytes(64 * 1024)
        ft = fill_table(qp, "t", data)
        assert fv.tableRead(qp, ft) == data
        fv.closeConnection(qp)

    def test_unwritten_reads_zero(self, server):
        qp = connect(server)
        ft = fv.FTable("t", 8192, 64, (8,) * 8)
        fv.allocTableMem(qp, ft)
        assert fv.tableRead(qp, ft) == bytes(8192)
        fv.closeConnection(qp)

    def test_interleaved_writes_last_state(self, server):
        qp = connect(server)
        size = 32 * 1024
        ft = fv.FTable("t", size, 64, (8,) * 8)
        fv.allocTableMem(qp, ft)
        ref = bytearray(size)
        rng = random.Random(2)
        for _ in range(40):
            off = rng.randrange(size)
            n = rng.randrange(1, min(4096, size - off) + 1)
            blob = rng.randbytes(n)
            fv.tableWrite(qp, ft, blob, offset=off)
            ref[off : off + n] = blob
        assert fv.tableRead(qp, ft) == bytes(ref)
        fv.closeConnection(qp)

    def test_foreign_table_access_denied(self, server):
        qp_a = connect(server)
        qp_b = connect(server)
        ft = fill_table(qp_a, "secret", bytes(4096))
        with pytest.raises(AccessError):
            qp_b.request(
                Verb(kind=VerbKind.RDMA_READ, vaddr=ft.base_vaddr, length=64)
            )
        fv.closeConnection(qp_a)
        fv.closeConnection(qp_b)

    def test_oob_read_bounds_error(self, server):
        qp = connect(server)
        ft = fill_table(qp, "t", bytes(4096))
        with pytest.raises(BoundsError):
            fv.tableRead(qp, ft, offset=0, length=999999)
        fv.closeConnection(qp)

    def test_oom_explicit_error(self, server_factory):
        server = server_factory(channel_capacity_bytes=8 * 1024 * 1024)
        qp = connect(server)
        ft = fv.FTable("big", 512 * 1024 * 1024, 64, (8,) * 8)
        with pytest.raises(AllocationError):
            fv.allocTableMem(qp, ft)
        fv.closeConnection(qp)


class TestQueries:
    def test_select_sugar_paper_query(self, server):
        """Project column a of rows whose float column c exceeds 3.14."""
        rng = random.Random(3)
        rows = []
        expect = []
        for i in range(500):
            a = rng.randrange(1 << 32).to_bytes(8, "little")
            c = rng.uniform(0, 6.28)
            row = a + bytes(8) + struct.pack("<d", c) + rng.randbytes(40)
            rows.append(row)
            if c > 3.14:
                expect.append((a,))
        qp = connect(server)
        ft = fill_table(qp, "s", b"".join(rows))
        res = fv.select(qp, ft, projection_flags=0b001, selection_flags=0b100,
                        predicate=3.14)
        assert res.rows == expect
        assert res.stats.server_rows_emitted == len(expect)
        fv.closeConnection(qp)

    def test_distinct_5_3_5_7(self, server):
        qp = connect(server)
        data = b"".join(
            v.to_bytes(8, "little") + bytes(56) for v in (5, 3, 5, 7)
        )
        ft = fill_table(qp, "d", data)
        res = fv.distinct(qp, ft, 0b1)
        assert res.overflow_merged
        assert [int.from_bytes(r[0], "little") for r in res.rows] == [5, 3, 7]
        fv.closeConnection(qp)

    def test_group_by_overflow_injected_tiny_cuckoo(self, server_factory):
        """A deliberately tiny cuckoo config forces server-side spills; the
        client-side merge restores the exact aggregates."""
        server = server_factory(cuckoo_tables=2, cuckoo_slots=64,
                                cuckoo_max_evictions=3)
        qp = connect(server)
        rng = random.Random(5)
        pairs = [(rng.randrange(200), rng.randrange(1000)) for _ in range(5000)]
        data = b"".join(
            k.to_bytes(8, "little") + v.to_bytes(8, "little") + bytes(48)
            for k, v in pairs
        )
        ft = fill_table(qp, "g", data)
        spec = AggregateSpec(
            0b1,
            (
                Measure(1, AggFn.SUM, ColumnType.INT),
                Measure(1, AggFn.COUNT, ColumnType.INT),
                Measure(1, AggFn.AVG, ColumnType.INT),
            ),
        )
        res = fv.group_by(qp, ft, spec)
        oracle = {}
        for k, v in pairs:
            acc = oracle.setdefault(k, [0, 0])
            acc[0] += v
            acc[1] += 1
        assert len(res.rows) == len(oracle)
        for key_bytes, s, cnt, avg in res.rows:
            k = int.from_bytes(key_bytes, "little")
            assert [s, cnt] == oracle[k]
            assert avg == oracle[k][0] / oracle[k][1]
        fv.closeConnection(qp)

    def test_farview_error_surfaces_code(self, server):
        qp = connect(server)
        ft = fill_table(qp, "t", bytes(64 * 10))
        with pytest.raises(PatternError):
            fv.regex_filter(qp, ft, 0b1, b"a(b")
        with pytest.raises(RequestError):
            # distinct with proj != key violates the layout
            qp.request(Verb(
                kind=VerbKind.FARVIEW, vaddr=ft.base_vaddr, length=ft.size,
                params=(3, 0b11, 0b01),
            ))
        fv.closeConnection(qp)

    def test_stats_bytes_match_server_counters(self, server):
        qp = connect(server)
        rng = random.Random(7)
        data = rng.randbytes(64 * 2000)
        ft = fill_table(qp, "t", data)
        before = server.bytes_sent_per_qpair.get(qp.qpair_id, 0)
        pred = SelectionPredicate((PredicateTerm(0, Comparator.LT, 1 << 62),))
        res = fv.select_where(qp, ft, 0xFF, pred)
        after = server.bytes_sent_per_qpair[qp.qpair_id]
        assert res.stats.bytes_on_wire == after - before
        fv.closeConnection(qp)

    def test_length_not_tuple_multiple_rejected(self, server):
        qp = connect(server)
        ft = fill_table(qp, "t", bytes(640))
        pred = SelectionPredicate((PredicateTerm(0, Comparator.LT, 10),))
        params = P.encode_select_params(1, 0xFF, pred)
        with pytest.raises(RequestError):
            qp.request(Verb(kind=VerbKind.FARVIEW, vaddr=ft.base_vaddr,
                            length=100, params=params))
        fv.closeConnection(qp)

    def test_rcpu_disabled_config(self, server_factory):
        server = server_factory(rcpu_enabled=False)
        qp = connect(server)
        ft = fill_table(qp, "t", bytes(640))
        from farview.errors import RcpuDisabledError

        pred = SelectionPredicate((PredicateTerm(0, Comparator.LT, 10),))
        with pytest.raises(RcpuDisabledError):
            fv.select_where(qp, ft, 0xFF, pred, rcpu=True)
        fv.closeConnection(qp)


class TestAbort:
    def test_shutdown_during_inflight_sends_abort(self, server_factory):
        server = server_factory(queue_depth=64)
        qp = connect(server)
        rows = 200_000
        data = bytes(rows * 64)
        ft = fill_table(qp, "big", data)
        pred = SelectionPredicate((PredicateTerm(0, Comparator.LT, 1 << 63),))
        errors = []

        def run_query():
            try:
                fv.select_where(qp, ft, 0xFF, pred)
            except Exception as exc:
                errors.append(exc)

        t = threading.Thread(target=run_query)
        t.start()
        time.sleep(0.15)  # let streaming begin
        server.stop()
        t.join(timeout=10)
        assert errors, "client should have seen an abort or connection error"


class TestMultiClientIsolation:
    def test_concurrent_clients_each_correct(self, server):
        rng = random.Random(11)
        tables = {}
        results = {}
        errs = []

        def worker(i):
            try:
                qp = connect(server)
                data = rng.randbytes(64 * 500)
                ft = fill_table(qp, f"t{i}", data)
                tables[i] = data
                got = fv.tableRead(qp, ft)
                results[i] = got
                fv.closeConnection(qp)
            except Exception as exc:
                errs.append(exc)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errs
        assert results == tables
