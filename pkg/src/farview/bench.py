"""Benchmark harness: workload generation, the local-CPU baseline, and
experiment orchestration across the FV / FV-V / LCPU / RCPU paths.

Every generator builds its expected answer constructively (exact selectivity
by construction, known group counts, designed regex match sets), so each
measured run is verified against a brute-force oracle before its timing is
reported; a mismatch aborts the experiment with a diff report. Wall times
are reported but never asserted — only result equality, byte counts, and
fairness shares are contract material.
"""

from __future__ import annotations

import argparse
import csv
import random
import statistics
import struct
import threading
import time
from dataclasses import dataclass, field, replace

from . import client as C
from . import params as P
from .errors import FarviewError
from .operators.crypto import CryptoParams, aes_ctr_transform
from .operators.grouping import AggFn, AggregateSpec, Measure
from .operators.predicate import (
    ColumnType,
    Combiner,
    Comparator,
    PredicateTerm,
    SelectionPredicate,
)
from .operators.schema import TableSchema
from .operators.addressing import plan_smart_addressing
from .regions import string_cell
from .server import FarviewServer, ServerConfig

I64_MAX = (1 << 63) - 1
I64_MIN = -(1 << 63)

QUERIES = (
    "select",
    "distinct",
    "group_by",
    "regex",
    "encrypt_read",
    "multi_client_distinct",
    "projection_crossover",
)
PATHS = ("fv", "fvv", "lcpu", "rcpu")


@dataclass(frozen=True)
class WorkloadSpec:
    query: str
    table_rows: int = 4096
    tuple_bytes: int = 64
    selectivity_target: float = 1.0
    groups: int = 256
    string_len: int = 32
    clients: int = 1
    runs: int | None = None  # None = per-path desk defaults (50 FV / 200 CPU)
    seed: int = 0

    def __post_init__(self):
        if self.query not in QUERIES:
            raise ValueError(f"unknown query {self.query!r}")
        if not 0 < self.selectivity_target <= 1:
            raise ValueError("selectivity must be in (0, 1]")


@dataclass
class QueryCase:
    """One generated workload: stored bytes + the oracle answer + request
    builders for every path."""

    spec: WorkloadSpec
    data: bytes
    column_bytes: tuple[int, ...]
    oracle_rows: list  # canonical (sorted) expected result
    kind: str
    proj_flags: int = 0
    predicate: SelectionPredicate | None = None
    key_flags: int = 0
    agg_spec: AggregateSpec | None = None
    pattern: bytes = b""
    crypto: CryptoParams | None = None
    plaintext: bytes = b""

    @property
    def schema(self) -> TableSchema:
        return TableSchema(self.column_bytes)

    def ftable(self, name: str) -> C.FTable:
        return C.FTable(name, len(self.data), self.schema.tuple_bytes, self.column_bytes)


def canonical(rows) -> list:
    return sorted(rows)


# ---------------------------------------------------------------------------
# generators (deterministic from spec.seed; oracles by construction)


def gen_table(spec: WorkloadSpec) -> QueryCase:
    rng = random.Random(spec.seed ^ 0xFA57)
    if spec.query in ("select", "encrypt_read"):
        return _gen_select(spec, rng)
    if spec.query in ("distinct", "multi_client_distinct"):
        return _gen_distinct(spec, rng)
    if spec.query == "group_by":
        return _gen_group_by(spec, rng)
    if spec.query == "regex":
        return _gen_regex(spec, rng)
    if spec.query == "projection_crossover":
        return _gen_projection(spec, rng)
    raise ValueError(spec.query)


def _gen_select(spec: WorkloadSpec, rng: random.Random) -> QueryCase:
    """Two-term conjunctive range predicate with exact selectivity: exactly
    ceil(N*s) rows satisfy (a < X AND b < Y) by construction."""
    n = spec.table_rows
    n_pass = -(-n * spec.selectivity_target // 1)
    n_pass = int(min(n, n_pass))
    x = y = 1 << 32
    rows = []
    passing = set(rng.sample(range(n), n_pass))
    expected = []
    for i in range(n):
        if i in passing:
            a = rng.randrange(x)
            b = rng.randrange(y)
        else:
            a = rng.randrange(x, 2 * x)
            b = rng.randrange(2 * y)
        rest = rng.randbytes(48)
        row = a.to_bytes(8, "little") + b.to_bytes(8, "little") + rest
        rows.append(row)
        if i in passing:
            expected.append(tuple(row[c * 8 : (c + 1) * 8] for c in range(8)))
    data = b"".join(rows)
    predicate = SelectionPredicate(
        (
            PredicateTerm(0, Comparator.LT, x, ColumnType.UINT),
            PredicateTerm(1, Comparator.LT, y, ColumnType.UINT),
        ),
        Combiner.AND,
    )
    case = QueryCase(
        spec, data, (8,) * 8, canonical(expected), "select",
        proj_flags=0xFF, predicate=predicate,
    )
    if spec.query == "encrypt_read":
        cp = CryptoParams(rng.randbytes(16), rng.randbytes(12), rng.randrange(1 << 32))
        case.kind = "encrypt_read"
        case.crypto = cp
        case.plaintext = data
        case.data = aes_ctr_transform(data, cp)
    return case


def _gen_distinct(spec: WorkloadSpec, rng: random.Random) -> QueryCase:
    n, g = spec.table_rows, min(spec.groups, spec.table_rows)
    keys = set()
    while len(keys) < g:
        keys.add(rng.randrange(1 << 64))
    keys = list(keys)
    values = keys + [rng.choice(keys) for _ in range(n - g)]
    rng.shuffle(values)
    data = b"".join(
        v.to_bytes(8, "little") + rng.randbytes(56) for v in values
    )
    expected = [(k.to_bytes(8, "little"),) for k in keys]
    return QueryCase(
        spec, data, (8,) * 8, canonical(expected), "distinct", key_flags=0b1,
        proj_flags=0b1,
    )


def _gen_group_by(spec: WorkloadSpec, rng: random.Random) -> QueryCase:
    n, g = spec.table_rows, min(spec.groups, spec.table_rows)
    keyset = set()
    while len(keyset) < g:
        keyset.add(rng.randrange(1 << 63))
    keys = sorted(keyset)
    agg = AggregateSpec(
        0b1,
        (
            Measure(1, AggFn.SUM, ColumnType.INT),
            Measure(1, AggFn.COUNT, ColumnType.INT),
            Measure(1, AggFn.MIN, ColumnType.INT),
            Measure(1, AggFn.MAX, ColumnType.INT),
            Measure(1, AggFn.AVG, ColumnType.INT),
        ),
    )
    oracle: dict[int, list] = {}
    rows = []
    for i in range(n):
        k = keys[i] if i < g else rng.choice(keys)
        v = rng.randrange(-(1 << 20), 1 << 20)
        rows.append(
            k.to_bytes(8, "little") + v.to_bytes(8, "little", signed=True) + rng.randbytes(48)
        )
        acc = oracle.setdefault(k, [0, 0, None, None])
        acc[0] += v
        acc[1] += 1
        acc[2] = v if acc[2] is None else min(acc[2], v)
        acc[3] = v if acc[3] is None else max(acc[3], v)
    rng.shuffle(rows)
    # recompute in shuffled order for AVG float determinism: summation order
    # does not matter for ints, and AVG divides exact integer sums
    expected = [
        (k.to_bytes(8, "little"), acc[0], acc[1], acc[2], acc[3], acc[0] / acc[1])
        for k, acc in oracle.items()
    ]
    return QueryCase(
        spec, b"".join(rows), (8,) * 8, canonical(expected), "group_by",
        key_flags=0b1, proj_flags=0b1, agg_spec=agg,
    )


_REGEX_PATTERN = rb"fv[0-9]+end"


def _gen_regex(spec: WorkloadSpec, rng: random.Random) -> QueryCase:
    """Half the strings embed a substring matching fv[0-9]+end; the other
    half draw from an alphabet with no 'f', so they cannot match."""
    n = spec.table_rows
    cell = max(spec.string_len, 16)
    n_match = n // 2
    matching = set(rng.sample(range(n), n_match))
    rows, expected = [], []
    safe = b"aceghijklmnopqrstuvwxyz"
    for i in range(n):
        max_content = cell - 2
        if i in matching:
            token = b"fv" + str(rng.randrange(1000)).encode() + b"end"
            pad = max_content - len(token)
            lead = rng.randrange(pad + 1)
            s = (
                bytes(rng.choices(safe, k=lead))
                + token
                + bytes(rng.choices(safe, k=rng.randrange(pad - lead + 1)))
            )
        else:
            s = bytes(rng.choices(safe, k=rng.randrange(max_content + 1)))
        c = string_cell(s, cell)
        rows.append(c)
        if i in matching:
            expected.append((c,))
    return QueryCase(
        spec, b"".join(rows), (cell,), canonical(expected), "regex",
        proj_flags=0b1, pattern=_REGEX_PATTERN,
    )


def _gen_projection(spec: WorkloadSpec, rng: random.Random) -> QueryCase:
    """Three contiguous 8-byte columns projected from a wide tuple."""
    n = spec.table_rows
    cols = spec.tuple_bytes // 8
    data = rng.randbytes(n * spec.tuple_bytes)
    expected = [
        tuple(
            data[i * spec.tuple_bytes + c * 8 : i * spec.tuple_bytes + (c + 1) * 8]
            for c in range(3)
        )
        for i in range(n)
    ]
    return QueryCase(
        spec, data, (8,) * cols, canonical(expected), "project", proj_flags=0b111,
    )


# ---------------------------------------------------------------------------
# LCPU baseline: single-pass evaluation over the local copy


def lcpu_execute(case: QueryCase) -> list:
    schema = case.schema
    width = schema.tuple_bytes
    data = case.data
    if case.kind == "encrypt_read":
        data = aes_ctr_transform(data, case.crypto)
    rows = [data[i : i + width] for i in range(0, len(data), width)]

    if case.kind in ("select", "encrypt_read"):
        out = []
        for r in rows:
            a = int.from_bytes(r[0:8], "little")
            b = int.from_bytes(r[8:16], "little")
            if a < case.predicate.terms[0].constant and b < case.predicate.terms[1].constant:
                out.append(tuple(r[c * 8 : (c + 1) * 8] for c in range(8)))
        return out

    if case.kind == "distinct":
        seen = dict.fromkeys(r[0:8] for r in rows)
        return [(k,) for k in seen]

    if case.kind == "group_by":
        groups: dict[bytes, list] = {}
        for r in rows:
            k = r[0:8]
            v = int.from_bytes(r[8:16], "little", signed=True)
            acc = groups.get(k)
            if acc is None:
                acc = groups[k] = [0, 0, v, v]
            else:
                acc[1] += 0  # placeholder keeps shape obvious
            acc[0] += v
            acc[1] += 1
            if v < acc[2]:
                acc[2] = v
            if v > acc[3]:
                acc[3] = v
        out = []
        for k, (s, cnt, lo, hi) in groups.items():
            s = min(max(s, I64_MIN), I64_MAX)
            out.append((k, s, cnt, lo, hi, s / cnt))
        return out

    if case.kind == "regex":
        import re

        pat = case.pattern
        gold = re.compile(pat[:-1] + rb"\Z" if pat.endswith(b"$") else pat)
        out = []
        for r in rows:
            (slen,) = struct.unpack_from("<H", r, 0)
            if gold.search(r[2 : 2 + slen]):
                out.append((r,))
        return out

    if case.kind == "project":
        return [tuple(r[c * 8 : (c + 1) * 8] for c in range(3)) for r in rows]

    raise ValueError(case.kind)


# ---------------------------------------------------------------------------
# path execution over the wire


def execute_on_path(case: QueryCase, path: str, qp: C.QPair | None, ft: C.FTable | None):
    """Run the case's query on one path; returns (rows, bytes_on_wire)."""
    if path == "lcpu":
        return lcpu_execute(case), 0
    vectorized = path == "fvv"
    rcpu = path == "rcpu"
    kind = case.kind
    if kind == "select":
        res = C.select_where(qp, ft, case.proj_flags, case.predicate,
                             vectorized=vectorized, rcpu=rcpu)
    elif kind == "encrypt_read":
        res = C.select_where(qp, ft, case.proj_flags, case.predicate,
                             vectorized=vectorized, rcpu=rcpu, decrypt=case.crypto)
    elif kind == "distinct":
        res = C.distinct(qp, ft, case.key_flags, vectorized=vectorized, rcpu=rcpu)
    elif kind == "group_by":
        res = C.group_by(qp, ft, case.agg_spec, vectorized=vectorized, rcpu=rcpu)
    elif kind == "regex":
        res = C.regex_filter(qp, ft, case.proj_flags, case.pattern,
                             vectorized=vectorized, rcpu=rcpu)
    elif kind == "project":
        res = C.project(qp, ft, case.proj_flags, vectorized=vectorized, rcpu=rcpu)
    else:
        raise ValueError(kind)
    return res.rows, res.stats.bytes_on_wire


class OracleMismatch(FarviewError):
    """A run produced rows differing from the generator's oracle."""


def verify_rows(case: QueryCase, rows, path: str) -> None:
    got = canonical(rows)
    if got == case.oracle_rows:
        return
    missing = [r for r in case.oracle_rows if r not in set(got)][:5]
    extra = [r for r in got if r not in set(case.oracle_rows)][:5]
    raise OracleMismatch(
        f"{case.kind} on path {path}: {len(got)} rows vs oracle {len(case.oracle_rows)}; "
        f"missing {missing!r}; unexpected {extra!r}"
    )


# ---------------------------------------------------------------------------
# experiments


@dataclass
class RunRecord:
    path: str
    query: str
    rows: int
    tuple_bytes: int
    selectivity: float
    run: int
    wall_us: int
    bytes_on_wire: int
    rows_out: int


@dataclass
class ExperimentResult:
    spec: WorkloadSpec
    records: list[RunRecord] = field(default_factory=list)

    def aggregate(self, path: str) -> dict:
        walls = [r.wall_us for r in self.records if r.path == path]
        if not walls:
            return {}
        return {
            "median_us": statistics.median(walls),
            "mean_us": statistics.fmean(walls),
            "runs": len(walls),
        }

    def bytes_on_wire(self, path: str) -> int:
        for r in self.records:
            if r.path == path and r.bytes_on_wire:
                return r.bytes_on_wire
        return 0


DESK_RUNS = {"fv": 50, "fvv": 50, "lcpu": 200, "rcpu": 200}


def run_experiment(spec: WorkloadSpec, paths=("fv", "fvv", "lcpu", "rcpu"),
                   node: str | tuple | None = None, out: str | None = None,
                   server_config: ServerConfig | None = None) -> ExperimentResult:
    """Generate the workload, execute every path, verify each run against the
    oracle, and optionally write the CSV."""
    for p in paths:
        if p not in PATHS:
            raise ValueError(f"unknown path {p!r}")
    if spec.query == "multi_client_distinct":
        return _run_multi_client(spec, paths, node, out, server_config)
    if spec.query == "projection_crossover":
        return _run_crossover(spec, paths, node, out, server_config)

    case = gen_table(spec)
    result = ExperimentResult(spec)
    server, address = _ensure_node(node, server_config)
    try:
        qp = ft = None
        if any(p != "lcpu" for p in paths):
            qp = C.openConnection(address)
            ft = case.ftable(f"bench_{spec.query}_{spec.seed}")
            C.allocTableMem(qp, ft)
            C.tableWrite(qp, ft, case.data)
        try:
            for path in paths:
                runs = spec.runs if spec.runs is not None else DESK_RUNS[path]
                for run in range(runs):
                    t0 = time.perf_counter_ns()
                    rows, nbytes = execute_on_path(case, path, qp, ft)
                    wall_us = (time.perf_counter_ns() - t0) // 1000
                    verify_rows(case, rows, path)
                    result.records.append(RunRecord(
                        path, spec.query, spec.table_rows, case.schema.tuple_bytes,
                        spec.selectivity_target, run, wall_us, nbytes, len(rows),
                    ))
        finally:
            if qp is not None:
                C.freeTableMem(qp, ft)
                C.closeConnection(qp)
    finally:
        if server is not None:
            server.stop()
    if out:
        write_csv(out, result.records)
    return result


def _run_crossover(spec, paths, node, out, server_config) -> ExperimentResult:
    """Planner picks full scan at 256 B tuples and smart addressing at 512 B;
    both modes must return identical rows."""
    result = ExperimentResult(spec)
    server, address = _ensure_node(node, server_config)
    try:
        for tuple_bytes, want_mode in ((256, "full_scan"), (512, "smart")):
            sub = replace(spec, query="projection_crossover", tuple_bytes=tuple_bytes)
            case = gen_table(sub)
            plan = plan_smart_addressing(case.schema, case.proj_flags)
            if plan.mode != want_mode:
                raise OracleMismatch(
                    f"planner chose {plan.mode} for {tuple_bytes}B tuples, wanted {want_mode}"
                )
            qp = C.openConnection(address)
            ft = case.ftable(f"crossover_{tuple_bytes}")
            C.allocTableMem(qp, ft)
            C.tableWrite(qp, ft, case.data)
            try:
                runs = spec.runs if spec.runs is not None else 5
                for run in range(runs):
                    for mode_name, mode in (("auto", 0), ("full", 1), ("smart", 2)):
                        t0 = time.perf_counter_ns()
                        res = C.project(qp, ft, case.proj_flags, mode=mode)
                        wall_us = (time.perf_counter_ns() - t0) // 1000
                        verify_rows(case, res.rows, f"fv-{mode_name}")
                        result.records.append(RunRecord(
                            f"fv-{mode_name}", f"projection_{tuple_bytes}", sub.table_rows,
                            tuple_bytes, 1.0, run, wall_us,
                            res.stats.bytes_on_wire, len(res.rows),
                        ))
                if "lcpu" in paths:
                    rows = lcpu_execute(case)
                    verify_rows(case, rows, "lcpu")
            finally:
                C.freeTableMem(qp, ft)
                C.closeConnection(qp)
    finally:
        if server is not None:
            server.stop()
    if out:
        write_csv(out, result.records)
    return result


def _run_multi_client(spec, paths, node, out, server_config) -> ExperimentResult:
    """spec.clients concurrent connections each running the distinct query on
    its own (identically generated) table; every result oracle-verified."""
    result = ExperimentResult(spec)
    server, address = _ensure_node(node, server_config)
    case = gen_table(replace(spec, query="distinct"))
    errors: list[BaseException] = []
    barrier = threading.Barrier(spec.clients)
    lock = threading.Lock()

    def worker(idx: int):
        try:
            qp = C.openConnection(address)
            ft = case.ftable(f"client{idx}")
            C.allocTableMem(qp, ft)
            C.tableWrite(qp, ft, case.data)
            barrier.wait()
            t0 = time.perf_counter_ns()
            res = C.distinct(qp, ft, case.key_flags)
            wall_us = (time.perf_counter_ns() - t0) // 1000
            verify_rows(case, res.rows, f"fv-client{idx}")
            with lock:
                result.records.append(RunRecord(
                    f"fv-client{idx}", spec.query, spec.table_rows, 64,
                    1.0, 0, wall_us, res.stats.bytes_on_wire, len(res.rows),
                ))
            C.freeTableMem(qp, ft)
            C.closeConnection(qp)
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)
            try:
                barrier.abort()
            except threading.BrokenBarrierError:
                pass

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(spec.clients)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    try:
        if errors:
            raise errors[0]
    finally:
        if server is not None:
            server.stop()
    if out:
        write_csv(out, result.records)
    return result


def _ensure_node(node, server_config) -> tuple[FarviewServer | None, tuple[str, int]]:
    if node is not None:
        if isinstance(node, str):
            host, _, port = node.rpartition(":")
            node = (host, int(port))
        return None, node
    cfg = server_config or ServerConfig(channel_capacity_bytes=128 * 1024 * 1024)
    server = FarviewServer(cfg).start()
    return server, server.address


CSV_COLUMNS = ("path", "query", "rows", "tuple_bytes", "selectivity", "run",
               "wall_us", "bytes_on_wire", "rows_out")


def write_csv(path: str, records: list[RunRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([getattr(r, c) for c in CSV_COLUMNS])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="farview-bench",
                                     description="workload harness and baselines")
    parser.add_argument("--query", required=True, choices=QUERIES)
    parser.add_argument("--rows", type=int, default=4096)
    parser.add_argument("--tuple-bytes", type=int, default=64, dest="tuple_bytes")
    parser.add_argument("--selectivity", type=float, default=1.0)
    parser.add_argument("--groups", type=int, default=256)
    parser.add_argument("--string-len", type=int, default=32, dest="string_len")
    parser.add_argument("--clients", type=int, default=6)
    parser.add_argument("--runs", type=int, default=None)
    parser.add_argument("--paths", default="fv,fvv,lcpu,rcpu")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--node", default=None,
                        help="host:port of a running node (default: self-hosted)")
    parser.add_argument("--out", default="results.csv")
    args = parser.parse_args(argv)
    spec = WorkloadSpec(
        query=args.query, table_rows=args.rows, tuple_bytes=args.tuple_bytes,
        selectivity_target=args.selectivity, groups=args.groups,
        string_len=args.string_len, clients=args.clients, runs=args.runs,
        seed=args.seed,
    )
    paths = tuple(p.strip() for p in args.paths.split(",") if p.strip())
    result = run_experiment(spec, paths, node=args.node, out=args.out)
    for path in sorted({r.path for r in result.records}):
        agg = result.aggregate(path)
        print(f"{path:12s} runs={agg['runs']:4d} median={agg['median_us']:.0f}us "
              f"mean={agg['mean_us']:.0f}us bytes={result.bytes_on_wire(path)}")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
