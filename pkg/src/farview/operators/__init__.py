"""Streaming query operators that compose into pipelines."""

from .schema import AnnotatedTuple, TableSchema, parse_and_project, serialize_tuples
from .addressing import AccessPlan, plan_smart_addressing
from .predicate import (
    Combiner,
    Comparator,
    PredicateTerm,
    SelectionPredicate,
    compute_lanes,
    eval_predicate,
    select_stream,
    vectorized_select,
)
from .hashing import CuckooTableSet, LruShiftRegister, OverflowBuffer
from .grouping import AggFn, AggregateSpec, distinct_stream, group_by_stream
from .crypto import CryptoParams, CtrCipher, aes_ctr_transform
from .packing import PackedStream, emit_send_commands, pack_stream
from .regexp import RegexEngine, regex_match_stream

__all__ = [
    "AccessPlan",
    "AggFn",
    "AggregateSpec",
    "AnnotatedTuple",
    "Combiner",
    "Comparator",
    "CryptoParams",
    "CtrCipher",
    "CuckooTableSet",
    "LruShiftRegister",
    "OverflowBuffer",
    "PackedStream",
    "PredicateTerm",
    "RegexEngine",
    "SelectionPredicate",
    "TableSchema",
    "aes_ctr_transform",
    "compute_lanes",
    "distinct_stream",
    "emit_send_commands",
    "eval_predicate",
    "group_by_stream",
    "pack_stream",
    "parse_and_project",
    "plan_smart_addressing",
    "regex_match_stream",
    "select_stream",
    "serialize_tuples",
    "vectorized_select",
]
