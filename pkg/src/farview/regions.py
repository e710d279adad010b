"""Operator stack: dynamic regions hosting loadable operator pipelines.

A fixed set of regions is created at startup. Opening a connection binds a
queue pair to one region until close; loading swaps the region's pipeline
(precompiled, from the registry); FARVIEW requests route through the loaded
pipeline while plain reads/writes bypass the regions entirely.

Pipelines execute as pull-driven stage chains over tuple batches (bounded by
the batch size, so a slow consumer stalls the whole chain — the software
backpressure analog). Each request gets fresh operator state; nothing is
shared across regions.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, field

from .errors import (
    RegionBusyError,
    RegionsExhaustedError,
    RequestAborted,
    RequestError,
    UnknownPipelineError,
)
from .memory import MemoryStack, TableHandle
from .operators.addressing import AccessPlan, plan_smart_addressing
from .operators.crypto import CtrCipher
from .operators.grouping import (
    AggregateSpec,
    distinct_stream,
    encode_group_row,
    group_by_stream,
)
from .operators.hashing import CuckooTableSet, LruShiftRegister
from .operators.packing import emit_send_commands, pack_bytes, pack_stream
from .operators.predicate import compute_lanes, select_stream, vectorized_select
from .operators.regexp import RegexEngine
from .operators.schema import AnnotatedTuple, TableSchema, parse_and_project
from . import params as P


@dataclass(frozen=True)
class PipelineSpec:
    """One precompiled pipeline design: its stage chain and vector width.

    lanes == 0 means auto: resolved per request from the channel count and
    tuple width. stage_params carries operator tuning (cuckoo shape, LRU
    depth, batch rows) frozen at load time.
    """

    pipeline_id: int
    name: str
    family: str  # select | distinct | group_by | regex | project
    stages: tuple[str, ...]
    lanes: int = 1
    decrypt: bool = False
    encrypt: bool = False
    stage_params: dict = field(default_factory=dict)


def _specs():
    out = {}

    def add(pid, name, family, stages, lanes=1, decrypt=False, encrypt=False):
        out[pid] = PipelineSpec(pid, name, family, tuple(stages), lanes, decrypt, encrypt)

    select_stages = ("parse_project", "select", "pack", "send")
    add(1, "select", "select", select_stages)
    add(2, "select_vec", "select", select_stages, lanes=0)
    add(3, "distinct", "distinct", ("parse_project", "distinct", "pack", "send"))
    add(4, "distinct_vec", "distinct", ("parse_project", "distinct", "pack", "send"), lanes=0)
    add(5, "group_by", "group_by", ("parse_project", "group_by", "pack", "send"))
    add(6, "group_by_vec", "group_by", ("parse_project", "group_by", "pack", "send"), lanes=0)
    add(7, "regex", "regex", ("parse_project", "regex", "pack", "send"))
    add(8, "regex_vec", "regex", ("parse_project", "regex", "pack", "send"), lanes=0)
    dsel = ("parse_project", "decrypt", "select", "pack", "send")
    add(9, "decrypt_select", "select", dsel, decrypt=True)
    add(10, "decrypt_select_vec", "select", dsel, lanes=0, decrypt=True)
    dse = ("parse_project", "decrypt", "select", "encrypt", "pack", "send")
    add(11, "decrypt_select_encrypt", "select", dse, decrypt=True, encrypt=True)
    add(12, "decrypt_select_encrypt_vec", "select", dse, lanes=0, decrypt=True, encrypt=True)
    add(13, "project", "project", ("smart_address", "parse_project", "pack", "send"))
    add(14, "project_vec", "project", ("smart_address", "parse_project", "pack", "send"), lanes=0)
    return out


BUILTIN_PIPELINES = _specs()
PIPELINE_IDS = {spec.name: pid for pid, spec in BUILTIN_PIPELINES.items()}


class PipelineRegistry:
    """Registry of precompiled pipeline designs, read-only after startup."""

    def __init__(self, reconfig_delay_ms: float = 0.0, entries=None):
        self.entries = dict(entries or BUILTIN_PIPELINES)
        self.reconfig_delay_ms = reconfig_delay_ms

    def get(self, pipeline_id: int) -> PipelineSpec:
        spec = self.entries.get(pipeline_id)
        if spec is None:
            raise UnknownPipelineError(f"pipeline id {pipeline_id} is not registered")
        return spec


@dataclass
class DynamicRegion:
    region_id: int
    bound_qpair: int | None = None
    loaded: PipelineSpec | None = None
    state: str = "idle"  # idle | busy
    abort_event: threading.Event = field(default_factory=threading.Event)


class RegionTable:
    """Bind/load/release lifecycle for the fixed region set."""

    def __init__(self, regions: int, registry: PipelineRegistry):
        self.regions = [DynamicRegion(i) for i in range(regions)]
        self.registry = registry
        self._lock = threading.Lock()

    def bind_region(self, qpair: int) -> int:
        with self._lock:
            for region in self.regions:
                if region.bound_qpair is None:
                    region.bound_qpair = qpair
                    region.loaded = None
                    region.state = "idle"
                    region.abort_event.clear()
                    return region.region_id
        raise RegionsExhaustedError(
            f"all {len(self.regions)} dynamic regions are bound"
        )

    def region_of(self, qpair: int) -> DynamicRegion | None:
        with self._lock:
            for region in self.regions:
                if region.bound_qpair == qpair:
                    return region
        return None

    def load_pipeline(self, region_id: int, pipeline_id: int) -> PipelineSpec:
        spec = self.registry.get(pipeline_id)
        with self._lock:
            region = self.regions[region_id]
            if region.bound_qpair is None:
                raise RequestError(f"region {region_id} is not bound")
            if region.state == "busy":
                raise RegionBusyError(f"region {region_id} has an in-flight request")
            region.loaded = spec
        if self.registry.reconfig_delay_ms:
            time.sleep(self.registry.reconfig_delay_ms / 1000.0)
        return spec

    def release_region(self, qpair: int) -> None:
        """Unbind (idempotent); any in-flight request aborts."""
        with self._lock:
            for region in self.regions:
                if region.bound_qpair == qpair:
                    region.abort_event.set()
                    region.bound_qpair = None
                    region.loaded = None
                    return

    def bound_count(self) -> int:
        with self._lock:
            return sum(1 for r in self.regions if r.bound_qpair is not None)


# ---------------------------------------------------------------------------
# request execution


class RequestContext:
    """Everything one FARVIEW request needs, decoded and validated upfront."""

    def __init__(self, spec: PipelineSpec, schema: TableSchema, words, payload: bytes,
                 channels: int, config):
        self.spec = spec
        self.schema = schema
        self.lanes = spec.lanes or compute_lanes(channels, schema.tuple_bytes)
        self.config = config
        self.plan: AccessPlan | None = None
        self.decrypt_params = None
        self.encrypt_params = None
        family = spec.family
        if family == "select":
            n_crypto = int(spec.decrypt) + int(spec.encrypt)
            self.proj_flags, self.predicate, crypto = P.decode_select_params(
                words, schema, n_crypto
            )
            if spec.decrypt:
                self.decrypt_params = crypto[0]
            if spec.encrypt:
                self.encrypt_params = crypto[-1]
            self.sel_flags = sum(1 << t.column for t in self.predicate.terms)
        elif family == "distinct":
            self.proj_flags, self.key_flags = P.decode_distinct_params(words, schema)
        elif family == "group_by":
            self.agg_spec: AggregateSpec = P.decode_group_by_params(words, schema)
            self.key_flags = self.agg_spec.key_flags
            self.proj_flags = self.agg_spec.key_flags
        elif family == "regex":
            self.proj_flags, pattern = P.decode_regex_params(words, payload, schema)
            self.engine_pattern = pattern
            RegexEngine(pattern)  # compile errors surface before any memory read
        elif family == "project":
            self.proj_flags, force = P.decode_project_params(words, schema)
            self.plan = plan_smart_addressing(schema, self.proj_flags, force=force)
        else:
            raise RequestError(f"unknown pipeline family {family}")


def execute_pipeline(ctx: RequestContext, chunks, overflow_sink=None):
    """Drive the stage chain over a byte-chunk stream.

    Returns a PackedStream whose exhaustion also finalizes overflow contents
    (reported through overflow_sink, a one-element list the caller reads
    after the stream ends).
    """
    spec = ctx.spec
    schema = ctx.schema
    cfg = ctx.config
    batch_rows = cfg.queue_depth
    family = spec.family

    if family == "project" and ctx.plan is not None and ctx.plan.mode == "smart":
        schema = ctx.plan.condensed_schema
        proj = ctx.plan.condensed_proj
        batches = parse_and_project(chunks, schema, proj, batch_rows=batch_rows)
        spans = schema.projected_spans(proj)
        return pack_stream(batches, spans)

    batches = parse_and_project(
        chunks,
        schema,
        ctx.proj_flags,
        getattr(ctx, "sel_flags", 0),
        getattr(ctx, "key_flags", 0),
        batch_rows=batch_rows,
    )

    if spec.decrypt:
        batches = _decrypt_stage(batches, ctx.decrypt_params, schema)

    if family == "select":
        if ctx.lanes > 1:
            batches = vectorized_select(batches, ctx.predicate, schema, ctx.lanes)
        else:
            batches = select_stream(batches, ctx.predicate, schema)
        spans = schema.projected_spans(ctx.proj_flags)
        if spec.encrypt:
            pieces = _encrypt_stage(batches, ctx.encrypt_params, spans)
            return pack_bytes(pieces)
        return pack_stream(batches, spans)

    if family == "project":
        spans = schema.projected_spans(ctx.proj_flags)
        return pack_stream(batches, spans)

    if family == "regex":
        spans = schema.projected_spans(ctx.proj_flags)
        cell_start = spans[0][0]
        matched = _regex_stage(batches, ctx.engine_pattern, ctx.lanes, cell_start)
        return pack_stream(matched, spans)

    if family == "distinct":
        cuckoo = CuckooTableSet(cfg.cuckoo_tables, cfg.cuckoo_slots,
                                cfg.cuckoo_max_evictions, cfg.cuckoo_seed)
        cache = LruShiftRegister(cfg.lru_depth)
        uniques, overflow = distinct_stream(batches, ctx.key_flags, cuckoo, cache, schema)
        if overflow_sink is not None:
            overflow_sink.append(overflow)
        spans = schema.projected_spans(ctx.proj_flags)
        return pack_stream(uniques, spans)

    if family == "group_by":
        cuckoo = CuckooTableSet(cfg.cuckoo_tables, cfg.cuckoo_slots,
                                cfg.cuckoo_max_evictions, cfg.cuckoo_seed)
        cache = LruShiftRegister(cfg.lru_depth)

        def rows():
            groups, overflow = group_by_stream(batches, ctx.agg_spec, cuckoo, cache, schema)
            if overflow_sink is not None:
                overflow_sink.append(overflow)
            for state in groups:
                yield encode_group_row(state, ctx.agg_spec.measures)

        return pack_bytes(rows())

    raise RequestError(f"unknown pipeline family {family}")


def _decrypt_stage(batches, cp, schema: TableSchema):
    cipher = CtrCipher(cp)
    for batch in batches:
        blob = cipher.update(b"".join(t.raw for t in batch))
        width = schema.tuple_bytes
        yield [
            AnnotatedTuple(blob[i * width : (i + 1) * width], schema,
                           t.proj_flags, t.sel_flags, t.group_flags)
            for i, t in enumerate(batch)
        ]


def _encrypt_stage(batches, cp, spans):
    cipher = CtrCipher(cp)
    for batch in batches:
        yield cipher.update(b"".join(t.project(spans) for t in batch))


def _regex_stage(batches, pattern: bytes, engines: int, cell_start: int = 0):
    """Match each tuple's string cell (u16 length prefix + content) against
    the pattern, round-robin across parallel engine instances."""
    matchers = [RegexEngine(pattern) for _ in range(max(1, engines))]
    i = 0
    for batch in batches:
        out = []
        for t in batch:
            raw = t.raw
            (slen,) = struct.unpack_from("<H", raw, cell_start)
            if cell_start + 2 + slen > len(raw):
                raise RequestError(f"string length {slen} exceeds the cell")
            if matchers[i % len(matchers)].match(raw[cell_start + 2 : cell_start + 2 + slen]):
                out.append(t)
            i += 1
        if out:
            yield out


def string_cell(s: bytes, cell_bytes: int) -> bytes:
    """Fixed-width string cell: u16 length + content + zero padding."""
    if len(s) > cell_bytes - 2:
        raise ValueError(f"string of {len(s)} bytes exceeds cell {cell_bytes}")
    return struct.pack("<H", len(s)) + s + b"\x00" * (cell_bytes - 2 - len(s))
