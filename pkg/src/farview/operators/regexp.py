"""Regular-expression matching over byte strings.

Supported subset: literals, '.', repetition '*' '+' '?', bracket classes
(ranges, negation), alternation '|', grouping '()', the anchors '^' (pattern
start only) and '$' (pattern end only), and escapes for metacharacters plus
\\d \\w \\s \\n \\t \\r. Semantics are byte-oriented substring search, matching
re.search over bytes: '.' excludes the newline byte, and '$' means absolute
end of input (re's \\Z — no special case before a trailing newline). That
mapping is the parity contract the tests hold this engine to.

Compilation is a Thompson NFA; execution runs a lazily built DFA whose
transition rows are memoized per pattern, so long streams of strings pay
dictionary-free per-byte costs after warmup. Multiple engine instances
dispatch round-robin over the input and re-merge in input order.
"""

from __future__ import annotations

from ..errors import PatternError

ANY = (1 << 256) - 1
NEWLINE = 1 << 0x0A
DOT = ANY & ~NEWLINE
END_SYMBOL = 256  # virtual byte fed once at end-of-string (for '$')

_DIGITS = 0
for _b in b"0123456789":
    _DIGITS |= 1 << _b
_WORD = 0
for _b in b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_":
    _WORD |= 1 << _b
_SPACE = 0
for _b in b" \t\n\r\x0b\x0c":
    _SPACE |= 1 << _b

_ESCAPES = {
    ord("d"): _DIGITS,
    ord("w"): _WORD,
    ord("s"): _SPACE,
    ord("n"): NEWLINE,
    ord("t"): 1 << 0x09,
    ord("r"): 1 << 0x0D,
}
_META = frozenset(b".*+?[]()|^$\\")


class _Parser:
    """Recursive-descent parser producing an NFA fragment tree."""

    def __init__(self, pattern: bytes):
        self.p = pattern
        self.i = 0

    def peek(self) -> int | None:
        return self.p[self.i] if self.i < len(self.p) else None

    def take(self) -> int:
        b = self.p[self.i]
        self.i += 1
        return b

    def parse(self):
        anchored_start = False
        anchored_end = False
        if self.peek() == ord("^"):
            self.take()
            anchored_start = True
        node = self.alternation()
        if self.i < len(self.p) and self.p[self.i] == ord("$") and self.i == len(self.p) - 1:
            self.take()
            anchored_end = True
        if self.i != len(self.p):
            raise PatternError(
                f"unexpected {chr(self.p[self.i])!r} at offset {self.i} in {self.p!r}"
            )
        return node, anchored_start, anchored_end

    def alternation(self):
        branches = [self.concat()]
        while self.peek() == ord("|"):
            self.take()
            branches.append(self.concat())
        return ("alt", branches) if len(branches) > 1 else branches[0]

    def concat(self):
        parts = []
        while True:
            b = self.peek()
            if b is None or b in (ord("|"), ord(")")):
                break
            if b == ord("$") and self.i == len(self.p) - 1:
                break  # trailing end anchor handled by parse()
            parts.append(self.repeat())
        if not parts:
            return ("empty",)
        return ("cat", parts) if len(parts) > 1 else parts[0]

    def repeat(self):
        node = self.atom()
        b = self.peek()
        if b in (ord("*"), ord("+"), ord("?")):
            self.take()
            kind = {ord("*"): "star", ord("+"): "plus", ord("?"): "opt"}[b]
            return (kind, node)
        return node

    def atom(self):
        b = self.take()
        if b == ord("("):
            node = self.alternation()
            if self.peek() != ord(")"):
                raise PatternError(f"unclosed group in {self.p!r}")
            self.take()
            return node
        if b == ord("."):
            return ("lit", DOT)
        if b == ord("["):
            return ("lit", self.bracket_class())
        if b == ord("\\"):
            return ("lit", self.escape())
        if b in (ord("^"), ord("$")):
            raise PatternError(f"anchor {chr(b)!r} only allowed at the pattern edge")
        if b in _META:
            raise PatternError(f"dangling metacharacter {chr(b)!r} in {self.p!r}")
        return ("lit", 1 << b)

    def escape(self) -> int:
        if self.peek() is None:
            raise PatternError(f"trailing backslash in {self.p!r}")
        b = self.take()
        if b in _ESCAPES:
            return _ESCAPES[b]
        if b in _META or not (
            ord("a") <= b <= ord("z") or ord("A") <= b <= ord("Z") or ord("0") <= b <= ord("9")
        ):
            return 1 << b
        raise PatternError(f"unsupported escape \\{chr(b)} in {self.p!r}")

    def bracket_class(self) -> int:
        mask = 0
        negate = False
        if self.peek() == ord("^"):
            self.take()
            negate = True
        if self.peek() is None:
            raise PatternError(f"unclosed class in {self.p!r}")
        first = True
        while True:
            b = self.peek()
            if b is None:
                raise PatternError(f"unclosed class in {self.p!r}")
            if b == ord("]") and not first:
                self.take()
                break
            first = False
            self.take()
            if b == ord("\\"):
                mask |= self.escape()
                continue
            if self.peek() == ord("-") and self.i + 1 < len(self.p) and self.p[self.i + 1] != ord("]"):
                self.take()
                hi = self.take()
                if hi == ord("\\"):
                    raise PatternError("escape not allowed as range bound")
                if hi < b:
                    raise PatternError(f"reversed range {chr(b)}-{chr(hi)}")
                for v in range(b, hi + 1):
                    mask |= 1 << v
            else:
                mask |= 1 << b
        return (ANY & ~mask) if negate else mask


class _Nfa:
    def __init__(self):
        self.eps: list[list[int]] = []
        self.edges: list[list[tuple[int, int]]] = []  # (byte mask incl END bit, target)

    def state(self) -> int:
        self.eps.append([])
        self.edges.append([])
        return len(self.eps) - 1

    def build(self, node) -> tuple[int, int]:
        kind = node[0]
        if kind == "empty":
            s = self.state()
            return s, s
        if kind == "lit":
            s, e = self.state(), self.state()
            self.edges[s].append((node[1], e))
            return s, e
        if kind == "cat":
            first_s, cur_e = self.build(node[1][0])
            for part in node[1][1:]:
                s, e = self.build(part)
                self.eps[cur_e].append(s)
                cur_e = e
            return first_s, cur_e
        if kind == "alt":
            s, e = self.state(), self.state()
            for branch in node[1]:
                bs, be = self.build(branch)
                self.eps[s].append(bs)
                self.eps[be].append(e)
            return s, e
        if kind == "star":
            s, e = self.state(), self.state()
            bs, be = self.build(node[1])
            self.eps[s] += [bs, e]
            self.eps[be] += [bs, e]
            return s, e
        if kind == "plus":
            bs, be = self.build(node[1])
            e = self.state()
            self.eps[be] += [bs, e]
            return bs, e
        if kind == "opt":
            s, e = self.state(), self.state()
            bs, be = self.build(node[1])
            self.eps[s] += [bs, e]
            self.eps[be].append(e)
            return s, e
        raise AssertionError(f"unknown node {kind}")


class RegexEngine:
    """One compiled matcher; match() decides substring-search acceptance."""

    def __init__(self, pattern: bytes | str):
        if isinstance(pattern, str):
            pattern = pattern.encode()
        self.pattern = pattern
        node, anchor_start, anchor_end = _Parser(pattern).parse()
        nfa = _Nfa()
        start, accept = nfa.build(node)
        if not anchor_start:
            loop = nfa.state()
            nfa.edges[loop].append((ANY, loop))
            nfa.eps[loop].append(start)
            start = loop
        if anchor_end:
            final = nfa.state()
            nfa.edges[accept].append((1 << END_SYMBOL, final))
            accept = final
        self._nfa = nfa
        self._accept = accept
        self._start_key = self._closure(frozenset([start]))
        # lazy DFA: state key -> id; per id: 257-entry transition row
        self._ids: dict[frozenset, int] = {self._start_key: 0}
        self._keys: list[frozenset] = [self._start_key]
        self._rows: list[list[int | None]] = [[None] * 257]
        self._accepting: list[bool] = [accept in self._start_key]

    def _closure(self, states: frozenset) -> frozenset:
        seen = set(states)
        stack = list(states)
        eps = self._nfa.eps
        while stack:
            for nxt in eps[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return frozenset(seen)

    def _step(self, state_id: int, symbol: int) -> int:
        nxt = set()
        bit = 1 << symbol
        edges = self._nfa.edges
        for s in self._keys[state_id]:
            for mask, target in edges[s]:
                if mask & bit:
                    nxt.add(target)
        if not nxt:
            new_id = -1
        else:
            key = self._closure(frozenset(nxt))
            new_id = self._ids.get(key)
            if new_id is None:
                new_id = len(self._rows)
                self._ids[key] = new_id
                self._keys.append(key)
                self._rows.append([None] * 257)
                self._accepting.append(self._accept in key)
        self._rows[state_id][symbol] = new_id
        return new_id

    def match(self, s: bytes) -> bool:
        rows = self._rows
        accepting = self._accepting
        cur = 0
        if accepting[0]:
            return True
        for b in s:
            nxt = rows[cur][b]
            if nxt is None:
                nxt = self._step(cur, b)
            if nxt < 0:
                return False
            cur = nxt
            if accepting[cur]:
                return True
        nxt = rows[cur][END_SYMBOL]
        if nxt is None:
            nxt = self._step(cur, END_SYMBOL)
        return nxt >= 0 and accepting[nxt]


def compile_pattern(pattern: bytes | str) -> RegexEngine:
    return RegexEngine(pattern)


def regex_match_stream(strings, pattern: bytes | str, engines: int = 1):
    """Yield exactly the input strings the pattern matches, in input order.

    Strings dispatch round-robin to `engines` parallel matcher instances and
    the verdicts re-merge by input index, so the output is engine-count
    independent.
    """
    if engines < 1:
        raise PatternError("need at least one engine")
    matchers = [RegexEngine(pattern) for _ in range(engines)]
    for i, s in enumerate(strings):
        if matchers[i % engines].match(s):
            yield s
