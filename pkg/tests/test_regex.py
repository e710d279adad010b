"""Regex engine: subset semantics vs the stdlib reference, engine parity."""

import random
import re

import pytest

from farview.errors import PatternError
from farview.operators.regexp import RegexEngine, regex_match_stream


def reference(pattern: bytes):
    """Map the engine's '$' (absolute end) to re's \\Z before comparing."""
    if pattern.endswith(b"$") and not pattern.endswith(rb"\$"):
        pattern = pattern[:-1] + rb"\Z"
    return re.compile(pattern)


PATTERNS = [
    rb"a.*b",
    rb"abc",
    rb"^abc",
    rb"abc$",
    rb"^abc$",
    rb"a+b?c*",
    rb"[abc]+",
    rb"[a-f0-9]+",
    rb"[^xyz]",
    rb"(ab|cd)+",
    rb"x(y|z)w?",
    rb"\d+\.\d?",
    rb"\w+\s\w+",
    rb"a[bc]d[e-g]",
    rb"(foo|bar|baz)qux*",
    rb"^$",
    rb"a*",
    rb"\(lit\)",
    rb"a.c$",
]


class TestEngineParity:
    def test_known_example(self):
        out = list(regex_match_stream([b"aXXb", b"ba"], rb"a.*b"))
        assert out == [b"aXXb"]

    def test_fixed_patterns_fuzz(self):
        rng = random.Random(43)
        alphabet = b"abcdefgxyz012. \n\t()"
        for pat in PATTERNS:
            eng = RegexEngine(pat)
            gold = reference(pat)
            for _ in range(2000):
                s = bytes(rng.choices(alphabet, k=rng.randrange(0, 16)))
                assert eng.match(s) == bool(gold.search(s)), (pat, s)

    def test_random_generated_patterns(self):
        rng = random.Random(47)

        def gen_atom():
            r = rng.random()
            if r < 0.4:
                return bytes([rng.choice(b"abcxy0")])
            if r < 0.55:
                return b"."
            if r < 0.75:
                chars = bytes(sorted(set(rng.choices(b"abcxy012", k=rng.randrange(1, 4)))))
                neg = b"^" if rng.random() < 0.3 else b""
                return b"[" + neg + chars + b"]"
            return b"(" + gen_alt(depth=1) + b")"

        def gen_piece(depth=0):
            atom = gen_atom() if depth else gen_atom()
            r = rng.random()
            if r < 0.2:
                return atom + rng.choice([b"*", b"+", b"?"])
            return atom

        def gen_concat(depth=0):
            return b"".join(gen_piece(depth) for _ in range(rng.randrange(1, 4)))

        def gen_alt(depth=0):
            return b"|".join(gen_concat(depth) for _ in range(rng.randrange(1, 3)))

        for _ in range(300):
            pat = gen_alt()
            try:
                eng = RegexEngine(pat)
            except PatternError:
                continue
            gold = reference(pat)
            for _ in range(50):
                s = bytes(rng.choices(b"abcxy012z", k=rng.randrange(0, 10)))
                assert eng.match(s) == bool(gold.search(s)), (pat, s)

    def test_multi_engine_output_equals_single(self):
        rng = random.Random(53)
        strings = [
            bytes(rng.choices(b"abcdef012 ", k=rng.randrange(0, 20))) for _ in range(10_000)
        ]
        pat = rb"[a-c]+\d"
        single = list(regex_match_stream(strings, pat, engines=1))
        for e in (2, 3, 8):
            assert list(regex_match_stream(strings, pat, engines=e)) == single

    def test_order_preserved(self):
        strings = [b"a1", b"zz", b"b2", b"c3", b"yy"]
        out = list(regex_match_stream(strings, rb"[abc]\d"))
        assert out == [b"a1", b"b2", b"c3"]


class TestPatternErrors:
    @pytest.mark.parametrize(
        "bad",
        [rb"a(b", rb"[abc", rb"*a", rb"+", rb"a\q", rb"ab)", rb"a**" , rb"a$b", rb"[z-a]"],
    )
    def test_rejects(self, bad):
        with pytest.raises(PatternError):
            RegexEngine(bad)

    def test_anchor_only_at_edges(self):
        RegexEngine(rb"^ab$")
        with pytest.raises(PatternError):
            RegexEngine(rb"a^b")

    def test_engines_floor(self):
        with pytest.raises(PatternError):
            list(regex_match_stream([b"x"], rb"x", engines=0))


class TestSemanticsDetails:
    def test_dot_excludes_newline(self):
        eng = RegexEngine(rb"^a.b$")
        assert eng.match(b"axb")
        assert not eng.match(b"a\nb")

    def test_class_includes_newline_if_listed(self):
        eng = RegexEngine(rb"a[\n]b")
        assert eng.match(b"a\nb")

    def test_negated_class_spans_all_bytes(self):
        eng = RegexEngine(rb"^[^a]$")
        assert eng.match(bytes([0xFF]))
        assert eng.match(b"\x00")
        assert not eng.match(b"a")

    def test_empty_pattern_matches_everything(self):
        eng = RegexEngine(rb"")
        assert eng.match(b"") and eng.match(b"anything")

    def test_high_bytes(self):
        eng = RegexEngine(b"[\xfe-\xff]+")
        assert eng.match(bytes([0xFE, 0xFF]))
        assert not eng.match(b"ab")
