"""Turning raw model output into SQL and schema links."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .corpus import DatabaseSchema, ForeignKey
from .errors import SqlParseError
from .linkex.link import SchemaLink
from .linkex.parser import parse_sql


class Extraction(str, Enum):
    VERBATIM = "verbatim"
    FENCED_BLOCK = "fenced_block"
    FIRST_STATEMENT = "first_statement"
    FAILED = "failed"


@dataclass(frozen=True)
class CleanedSql:
    question_id: int | None
    sql: str
    extraction: Extraction

    @property
    def failed(self) -> bool:
        return self.extraction is Extraction.FAILED


_FENCE = re.compile(r"```[^\n`]*\n?(.*?)(?:```|\Z)", re.DOTALL)
_START = re.compile(r"\b(SELECT|WITH)\b", re.IGNORECASE)
_MAX_PREFIX_TRIES = 400


def _parses(sql: str) -> bool:
    try:
        parse_sql(sql)
    except SqlParseError:
        return False
    return True


def _strip_terminator(sql: str) -> str:
    return sql.strip().rstrip(";").strip()


def _scan_statement(text: str, start: int) -> tuple[int, bool]:
    """End offset of the statement starting at ``start`` and whether a terminator was seen.

    Stops at a top-level ``;`` or blank line; quotes and parentheses are
    tracked so neither is mistaken for a boundary inside a literal.
    """
    depth = 0
    i = start
    n = len(text)
    closers = {"'": "'", '"': '"', "`": "`", "[": "]"}
    while i < n:
        ch = text[i]
        if ch in closers:
            end = text.find(closers[ch], i + 1)
            if end < 0:
                return n, False
            i = end + 1
            continue
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth = max(depth - 1, 0)
        elif ch == ";" and depth == 0:
            return i, True
        elif ch == "\n" and depth == 0:
            j = i + 1
            while j < n and text[j] in " \t\r":
                j += 1
            if j < n and text[j] == "\n":
                return i, True
        i += 1
    return n, False


def _first_statement(text: str) -> str | None:
    for m in _START.finditer(text):
        end, terminated = _scan_statement(text, m.start())
        candidate = text[m.start():end].rstrip()
        # a lower-case "select" in prose needs a FROM before we believe it
        upper = m.group(1).isupper()

        def plausible(sql: str) -> bool:
            return bool(sql) and (upper or re.search(r"\bfrom\b", sql, re.IGNORECASE) is not None)

        if not plausible(candidate):
            continue
        if _parses(candidate):
            return candidate
        # trim trailing prose word by word until what is left parses
        cuts = [w.start() for w in re.finditer(r"\s+", candidate)]
        for cut in reversed(cuts[-_MAX_PREFIX_TRIES:]):
            prefix = candidate[:cut].rstrip().rstrip(";")
            if plausible(prefix) and _parses(prefix):
                return prefix
        # valid SQLite beyond the supported grammar; trust an upper-case keyword
        if m.group(1).isupper() and re.search(r"\bFROM\b", candidate) and (terminated or end == len(text)):
            return candidate
    return None


def clean_sql(raw: str, question_id: int | None = None) -> CleanedSql:
    """Extract one SQL statement from raw model output.

    Tries, in order: the whole output, the first fenced code block, and the
    first statement found by scanning from a SELECT/WITH keyword to its
    boundary.
    """
    text = _strip_terminator(raw or "")
    if text and "```" not in text and _parses(text):
        return CleanedSql(question_id, text, Extraction.VERBATIM)
    m = _FENCE.search(raw or "")
    if m:
        body = _strip_terminator(m.group(1).replace("```", ""))
        if body:
            return CleanedSql(question_id, body, Extraction.FENCED_BLOCK)
    stmt = _first_statement(raw or "")
    if stmt:
        return CleanedSql(question_id, _strip_terminator(stmt).replace("```", ""), Extraction.FIRST_STATEMENT)
    return CleanedSql(question_id, "", Extraction.FAILED)


def raw_sql(raw: str, question_id: int | None = None) -> CleanedSql:
    """Model output scored as-is (no cleanup)."""
    text = (raw or "").strip()
    return CleanedSql(question_id, text, Extraction.VERBATIM if text else Extraction.FAILED)


# -- link responses -----------------------------------------------------------

_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")


@dataclass(frozen=True)
class ParsedLink:
    link: SchemaLink
    flagged_lines: tuple[str, ...] = ()
    outside_chunk: tuple[tuple[str, str], ...] = ()


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.i = 0

    def ws(self):
        while self.i < len(self.text) and self.text[self.i].isspace():
            self.i += 1

    def done(self) -> bool:
        self.ws()
        return self.i >= len(self.text)

    def peek(self) -> str:
        self.ws()
        return self.text[self.i:self.i + 1]

    def take(self, ch: str) -> bool:
        if self.peek() == ch:
            self.i += 1
            return True
        return False

    def ident(self) -> str | None:
        self.ws()
        t = self.text
        if self.i >= len(t):
            return None
        q = t[self.i]
        if q in "`\"[":
            close = "]" if q == "[" else q
            parts = []
            j = self.i + 1
            while True:
                end = t.find(close, j)
                if end < 0:
                    return None
                parts.append(t[j:end])
                if close != "]" and t.startswith(close * 2, end):
                    parts.append(close)
                    j = end + 2
                    continue
                self.i = end + 1
                return "".join(parts)
        m = re.compile(r"[^\s(),.=`\"\[\]]+").match(t, self.i)
        if not m:
            return None
        self.i = m.end()
        return m.group(0)


def _parse_line(line: str):
    """One response line as ('none',) | ('table', t, cols) | ('fk', ForeignKey) | ('pair', t, c) | None."""
    if line.casefold() == "none":
        return ("none",)
    s = _Scanner(line)
    first = s.ident()
    if first is None:
        return None
    if s.take("("):
        cols = []
        if not s.take(")"):
            while True:
                col = s.ident()
                if col is None:
                    return None
                cols.append(col)
                if s.take(")"):
                    break
                if not s.take(","):
                    return None
        return ("table", first, cols) if s.done() else None
    if s.take("."):
        col = s.ident()
        if col is None:
            return None
        if s.done():
            return ("pair", first, col)
        if not s.take("="):
            return None
        t2 = s.ident()
        if t2 is None or not s.take("."):
            return None
        c2 = s.ident()
        if c2 is None or not s.done():
            return None
        return ("fk", ForeignKey(first, col, t2, c2))
    return None


def parse_link_response(raw: str, chunk_tables: Sequence[str] | None = None) -> ParsedLink:
    """Parse a link-stage response written in the ``table(col, ...)`` line format.

    Lenient about whitespace, bullets and trailing punctuation.  ``None``
    yields an empty link.  Lines that do not parse are skipped and returned
    as flagged; pairs on tables outside ``chunk_tables`` are kept but listed.
    """
    columns: set[tuple[str, str]] = set()
    bare: set[str] = set()
    fks: set[ForeignKey] = set()
    flagged = []
    for line in (raw or "").splitlines():
        text = _BULLET.sub("", line).strip().rstrip(".;,").strip()
        if not text:
            continue
        parsed = _parse_line(text)
        if parsed is None:
            flagged.append(line)
        elif parsed[0] == "table":
            _, table, cols = parsed
            if cols:
                columns.update((table, c) for c in cols)
            else:
                bare.add(table)
        elif parsed[0] == "pair":
            columns.add((parsed[1], parsed[2]))
        elif parsed[0] == "fk":
            fks.add(parsed[1])
    link = SchemaLink.build(columns, fks, bare)
    outside = ()
    if chunk_tables is not None:
        allowed = {t.casefold() for t in chunk_tables}
        outside = tuple(sorted(p for p in link.columns if p[0].casefold() not in allowed))
    return ParsedLink(link, tuple(flagged), outside)


def merge_links(parts: Iterable[SchemaLink]) -> SchemaLink:
    """Set union of partial links; case-insensitive duplicates keep the first-seen spelling."""
    columns: dict[tuple[str, str], tuple[str, str]] = {}
    fks: dict[tuple, ForeignKey] = {}
    bare: dict[str, str] = {}
    for part in parts:
        for t, c in sorted(part.columns):
            columns.setdefault((t.casefold(), c.casefold()), (t, c))
        for fk in sorted(part.foreign_keys, key=lambda f: (f.key(), str(f))):
            fks.setdefault(fk.key(), fk)
        for t in sorted(part.bare_tables):
            bare.setdefault(t.casefold(), t)
    table_spelling: dict[str, str] = {}
    for t, _ in columns.values():
        table_spelling.setdefault(t.casefold(), t)
    return SchemaLink(
        frozenset(columns.values()),
        frozenset(fks.values()),
        frozenset(t for k, t in bare.items() if k not in table_spelling),
    )


@dataclass(frozen=True)
class LinkValidation:
    accepted: SchemaLink
    repaired: tuple = ()  # ((table, column), (table, column), reason)
    rejected: tuple = ()  # (item, reason)

    def to_json(self) -> dict:
        return {
            "repaired": [{"raw": list(r), "canonical": list(c), "reason": why} for r, c, why in self.repaired],
            "rejected": [{"raw": item if isinstance(item, str) else list(item), "reason": why} for item, why in self.rejected],
        }


def validate_link(link: SchemaLink, schema: DatabaseSchema, repair_unique_home: bool = True) -> LinkValidation:
    """Check a predicted link against the schema, repairing what is unambiguous.

    Exact case-insensitive matches are accepted in schema casing.  A column
    named under the wrong table is moved when it exists in exactly one
    table.  Everything else is rejected with a reason.  Foreign keys survive
    only when both endpoints resolve and both tables were accepted.
    """
    accepted: set[tuple[str, str]] = set()
    bare: set[str] = set()
    repaired = []
    rejected = []
    for raw in sorted(link.columns):
        table_name, col_name = raw
        table = schema.table(table_name)
        col = table.column(col_name) if table is not None else None
        if col is not None:
            canon = (table.name, col.name)
            accepted.add(canon)
            if canon != raw:
                repaired.append((raw, canon, "casing"))
            continue
        homes = schema.tables_with_column(col_name)
        if repair_unique_home and len(homes) == 1:
            home = homes[0]
            canon = (home.name, home.column(col_name).name)
            accepted.add(canon)
            repaired.append((raw, canon, f"column exists only in table {home.name}"))
        elif table is None:
            rejected.append((raw, "unknown-table"))
        elif len(homes) == 1:
            rejected.append((raw, f"unknown-column (exists in table {homes[0].name})"))
        elif homes:
            rejected.append((raw, "unknown-column (exists in several other tables)"))
        else:
            rejected.append((raw, "unknown-column"))
    for raw in sorted(link.bare_tables):
        table = schema.table(raw)
        if table is None:
            rejected.append((raw, "unknown-table"))
        else:
            bare.add(table.name)

    tables = {t.casefold() for t, _ in accepted} | {t.casefold() for t in bare}
    fks = set()
    for fk in sorted(link.foreign_keys, key=lambda f: f.key()):
        ends = []
        for t, c in ((fk.from_table, fk.from_column), (fk.to_table, fk.to_column)):
            table = schema.table(t)
            col = table.column(c) if table is not None else None
            ends.append((table.name, col.name) if col is not None else None)
        if None in ends:
            rejected.append((str(fk), "foreign key endpoint does not resolve"))
            continue
        if ends[0][0].casefold() not in tables or ends[1][0].casefold() not in tables:
            rejected.append((str(fk), "foreign key endpoint table not in link"))
            continue
        canon = ForeignKey(ends[0][0], ends[0][1], ends[1][0], ends[1][1])
        # prefer the schema's orientation when the edge is declared the other way round
        flipped = ForeignKey(canon.to_table, canon.to_column, canon.from_table, canon.from_column)
        if canon not in schema.foreign_keys and flipped in schema.foreign_keys:
            canon = flipped
        fks.add(canon)
    return LinkValidation(SchemaLink.build(accepted, fks, bare), tuple(repaired), tuple(rejected))
