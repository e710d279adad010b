"""Access planning: full sequential scan vs smart per-column addressing.

For narrow projections over wide tuples it pays to fetch only the 64-byte
memory words that cover the projected columns instead of whole rows. The
planner prices both modes per tuple and picks the cheaper one:

    full_cost = tuple_bytes
    sa_cost   = requests * c_req + fetched_bytes        (c_req default 256)

where requests counts the merged word-runs per tuple. Execution under a
smart plan sees condensed tuples made of just the fetched words, so the
plan also carries the remapped schema/flags for the parser.
"""

from __future__ import annotations

from dataclasses import dataclass

from .schema import TableSchema

WORD = 64
DEFAULT_REQUEST_COST = 256


@dataclass(frozen=True)
class AccessPlan:
    mode: str  # "full_scan" | "smart"
    word_runs: tuple[tuple[int, int], ...]  # per-tuple (byte offset, byte length)
    fetched_bytes: int
    full_cost: int
    sa_cost: int
    condensed_schema: TableSchema | None = None
    condensed_proj: int = 0
    condensed_sel: int = 0
    condensed_group: int = 0

    @property
    def requests_per_tuple(self) -> int:
        return len(self.word_runs)


def _word_runs(schema: TableSchema, flags: int) -> tuple[tuple[int, int], ...]:
    """64-byte word spans covering the flagged columns, adjacent runs merged."""
    words = set()
    for col in schema.flag_columns(flags):
        s, e = schema.column_span(col)
        words.update(range(s // WORD, (e - 1) // WORD + 1))
    runs: list[tuple[int, int]] = []
    for w in sorted(words):
        start = w * WORD
        if runs and runs[-1][0] + runs[-1][1] == start:
            runs[-1] = (runs[-1][0], runs[-1][1] + WORD)
        else:
            runs.append((start, WORD))
    return tuple(runs)


def plan_smart_addressing(schema: TableSchema, proj_flags: int,
                          sel_flags: int = 0, group_flags: int = 0,
                          request_cost: int = DEFAULT_REQUEST_COST,
                          force: str | None = None) -> AccessPlan:
    """Choose the access mode for a projection and build the word plan.

    All columns any stage will look at (projection, selection, grouping)
    must be fetched, so the word plan covers the union of the flag masks.
    force ∈ {"full_scan", "smart"} overrides the cost decision (both modes
    must return identical rows; used for crossover verification).
    """
    needed = proj_flags | sel_flags | group_flags
    if not needed:
        raise ValueError("smart addressing needs at least one flagged column")
    runs = _word_runs(schema, needed)
    fetched = sum(n for _, n in runs)
    full_cost = schema.tuple_bytes
    sa_cost = len(runs) * request_cost + fetched
    mode = "smart" if sa_cost < full_cost else "full_scan"
    if force is not None:
        if force not in ("full_scan", "smart"):
            raise ValueError(f"bad forced mode {force!r}")
        mode = force
    if mode == "full_scan":
        return AccessPlan("full_scan", runs, fetched, full_cost, sa_cost)

    # Remap columns into the condensed layout made of the fetched words.
    # Offset translation: old byte -> position within the concatenated runs.
    remap: dict[int, int] = {}
    pos = 0
    for start, length in runs:
        for b in range(start, start + length):
            remap[b] = pos
            pos += 1
    cond_widths = []
    cond_proj = cond_sel = cond_group = 0
    new_col = 0
    cursor = 0
    # Columns fully inside fetched words keep their width; gaps between
    # fetched words become filler columns so the condensed schema tiles the
    # fetched bytes exactly.
    covered_cols = schema.flag_columns(needed)
    spans = [schema.column_span(c) for c in covered_cols]
    for (s, e), col in zip(spans, covered_cols):
        cs = remap[s]
        if cs > cursor:
            cond_widths.append(cs - cursor)  # filler from neighboring words
            new_col += 1
            cursor = cs
        cond_widths.append(e - s)
        if proj_flags >> col & 1:
            cond_proj |= 1 << new_col
        if sel_flags >> col & 1:
            cond_sel |= 1 << new_col
        if group_flags >> col & 1:
            cond_group |= 1 << new_col
        new_col += 1
        cursor = cs + (e - s)
    if cursor < fetched:
        cond_widths.append(fetched - cursor)
    return AccessPlan(
        "smart",
        runs,
        fetched,
        full_cost,
        sa_cost,
        condensed_schema=TableSchema(tuple(cond_widths)),
        condensed_proj=cond_proj,
        condensed_sel=cond_sel,
        condensed_group=cond_group,
    )


def spans_for_table(plan: AccessPlan, base_vaddr: int, tuple_bytes: int, rows: int):
    """Expand a smart plan into absolute (vaddr, length) word spans per row."""
    out = []
    for r in range(rows):
        row_base = base_vaddr + r * tuple_bytes
        for off, length in plan.word_runs:
            out.append((row_base + off, length))
    return out
