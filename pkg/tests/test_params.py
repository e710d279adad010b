"""Request parameter layouts and the response trailer codec."""

import random
import struct

import pytest

from farview import params as P
from farview.errors import RequestError
from farview.operators.crypto import CryptoParams
from farview.operators.grouping import AggFn, AggregateSpec, Measure
from farview.operators.predicate import (
    ColumnType,
    Combiner,
    Comparator,
    PredicateTerm,
    SelectionPredicate,
)
from farview.operators.schema import TableSchema

SCHEMA = TableSchema((8,) * 8)


class TestSelectParams:
    def test_paper_style_float_encoding(self):
        """proj bit0 (column a), sel bit2 (column c), '>' on 3.14 as raw
        binary64 bits in the constant word."""
        pred = SelectionPredicate(
            (PredicateTerm(2, Comparator.GT, 3.14, ColumnType.FLOAT),)
        )
        words = P.encode_select_params(1, 0b1, pred)
        assert words[1] == 0b1
        assert words[2] == 0b100
        assert (words[3] & 0xF) == Comparator.GT
        assert (words[3] >> 32) & 0x3 == ColumnType.FLOAT
        assert words[4] == struct.unpack("<Q", struct.pack("<d", 3.14))[0]
        proj, back, crypto = P.decode_select_params(words, SCHEMA)
        assert proj == 0b1 and crypto == []
        assert back == pred

    def test_round_trip_random(self):
        rng = random.Random(3)
        for _ in range(300):
            ncols = rng.randrange(1, 5)
            cols = sorted(rng.sample(range(8), ncols))
            terms = []
            for c in cols:
                ctype = ColumnType(rng.randrange(3))
                const = (
                    rng.uniform(-1e9, 1e9)
                    if ctype is ColumnType.FLOAT
                    else rng.randrange(-(1 << 40), 1 << 40)
                    if ctype is ColumnType.INT
                    else rng.randrange(1 << 48)
                )
                terms.append(PredicateTerm(c, Comparator(rng.randrange(1, 7)), const, ctype))
            pred = SelectionPredicate(tuple(terms), Combiner(rng.randrange(2)))
            proj = rng.randrange(1, 256)
            words = P.encode_select_params(1, proj, pred)
            got_proj, got_pred, _ = P.decode_select_params(words, SCHEMA)
            assert (got_proj, got_pred) == (proj, pred)

    def test_crypto_words_round_trip(self):
        rng = random.Random(5)
        dec = CryptoParams(rng.randbytes(16), rng.randbytes(12), 42)
        enc = CryptoParams(rng.randbytes(16), rng.randbytes(12), 7)
        pred = SelectionPredicate((PredicateTerm(0, Comparator.NE, 5),))
        words = P.encode_select_params(11, 0xFF, pred, decrypt=dec, encrypt=enc)
        _, _, crypto = P.decode_select_params(words, SCHEMA, n_crypto=2)
        assert crypto == [dec, enc]

    def test_wrong_word_count_rejected(self):
        pred = SelectionPredicate((PredicateTerm(0, Comparator.EQ, 1),))
        words = P.encode_select_params(1, 1, pred)
        with pytest.raises(RequestError):
            P.decode_select_params(words + (0,), SCHEMA)

    def test_bad_comparator_code(self):
        words = (1, 1, 1, 0xF, 0)
        with pytest.raises(RequestError):
            P.decode_select_params(words, SCHEMA)

    def test_flags_beyond_schema(self):
        pred = SelectionPredicate((PredicateTerm(0, Comparator.EQ, 1),))
        words = P.encode_select_params(1, 1 << 9, pred)
        with pytest.raises(Exception):
            P.decode_select_params(words, SCHEMA)

    def test_rcpu_flag(self):
        pred = SelectionPredicate((PredicateTerm(0, Comparator.EQ, 1),))
        words = P.encode_select_params(1, 1, pred, rcpu=True)
        assert words[0] & P.RCPU_FLAG
        assert words[0] & ~P.RCPU_FLAG == 1


class TestOtherFamilies:
    def test_distinct_round_trip(self):
        words = P.encode_distinct_params(3, 0b11, 0b11)
        assert P.decode_distinct_params(words, SCHEMA) == (0b11, 0b11)

    def test_distinct_proj_must_equal_key(self):
        with pytest.raises(RequestError):
            P.decode_distinct_params((3, 0b111, 0b011), SCHEMA)

    def test_group_by_round_trip(self):
        spec = AggregateSpec(
            0b11,
            (
                Measure(2, AggFn.SUM, ColumnType.INT),
                Measure(3, AggFn.AVG, ColumnType.FLOAT),
                Measure(4, AggFn.COUNT, ColumnType.UINT),
            ),
        )
        words = P.encode_group_by_params(5, spec)
        assert P.decode_group_by_params(words, SCHEMA) == spec

    def test_group_by_bad_fn(self):
        with pytest.raises(RequestError):
            P.decode_group_by_params((5, 1, 0xFF), SCHEMA)

    def test_regex_round_trip(self):
        words, payload = P.encode_regex_params(7, 0b1, b"a.*b")
        assert P.decode_regex_params(words, payload, SCHEMA) == (0b1, b"a.*b")

    def test_regex_length_mismatch(self):
        words, _ = P.encode_regex_params(7, 0b1, b"abc")
        with pytest.raises(RequestError):
            P.decode_regex_params(words, b"ab", SCHEMA)

    def test_project_modes(self):
        for mode, force in ((0, None), (1, "full_scan"), (2, "smart")):
            words = P.encode_project_params(13, 0b111, mode)
            assert P.decode_project_params(words, SCHEMA) == (0b111, force)
        with pytest.raises(RequestError):
            P.decode_project_params((13, 0b1, 9), SCHEMA)


class TestSchemaWords:
    def test_round_trip(self):
        for widths in ((8,) * 8, (8,) * 64, (4, 8, 2, 16, 100), (65535,)):
            assert P.unpack_schema_words(P.pack_schema_words(widths)) == widths

    def test_word_budget_for_64_columns(self):
        assert len(P.pack_schema_words((8,) * 64)) == 17  # count + 16 packed

    def test_width_overflow(self):
        with pytest.raises(RequestError):
            P.pack_schema_words((70000,))


class TestTrailer:
    def test_empty(self):
        body = b"main" + P.build_trailer([])
        main, entries = P.split_trailer(body, 8)
        assert main == b"main" and entries == []

    def test_entries_round_trip(self):
        entries = [bytes([i]) * 8 for i in range(5)]
        body = b"payload" + P.build_trailer(entries)
        main, got = P.split_trailer(body, 8)
        assert main == b"payload" and got == entries

    def test_missing_marker(self):
        with pytest.raises(RequestError):
            P.split_trailer(b"short", 8)

    def test_count_beyond_body(self):
        bogus = struct.pack("<I", 99) + P.TRAILER_MARKER
        with pytest.raises(RequestError):
            P.split_trailer(bogus, 8)
