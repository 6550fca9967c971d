"""Token-budgeted schema rendering and chunking.

Tables are packed greedily, in catalog order, into as few prompts as the
budget allows; the question and hint are part of every prompt.
"""

from __future__ import annotations

import functools
import logging
import math
import subprocess
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

from .corpus import DatabaseSchema, TableDef
from .errors import BudgetError, ConfigurationError, TokenizerError
from .linkex.link import quote_ident
from .templates import PromptTemplate

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_BUDGET = 4096
DEFAULT_ND_BUDGET = 5000


@dataclass(frozen=True)
class TokenBudget:
    max_tokens: int = DEFAULT_CHUNK_BUDGET
    tokenizer: str = "heuristic"  # "heuristic" or "external"
    command: tuple[str, ...] | None = None
    counter: Callable[[str], int] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ConfigurationError("max_tokens must be positive")
        if self.tokenizer not in ("heuristic", "external"):
            raise ConfigurationError(f"unknown tokenizer {self.tokenizer!r}")
        if self.tokenizer == "external" and not (self.command or self.counter):
            raise ConfigurationError("external tokenizer needs a command or a counter callable")
        if self.command is not None and not isinstance(self.command, tuple):
            object.__setattr__(self, "command", tuple(self.command))

    def with_max(self, max_tokens: int) -> "TokenBudget":
        return replace(self, max_tokens=max_tokens)


@functools.lru_cache(maxsize=4096)
def _external_count(command: tuple[str, ...], text: str) -> int:
    try:
        proc = subprocess.run(command, input=text, capture_output=True, text=True, timeout=120, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise TokenizerError(f"tokenizer command {command[0]!r} failed: {exc}") from exc
    if proc.returncode != 0:
        raise TokenizerError(f"tokenizer command exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
    try:
        return int(proc.stdout.strip())
    except ValueError:
        raise TokenizerError(f"tokenizer command printed {proc.stdout.strip()[:50]!r}, expected an integer") from None


def count_tokens(text: str, budget: TokenBudget = TokenBudget()) -> int:
    """Token count of ``text``: ceil(utf-8 bytes / 4) unless an external tokenizer is configured."""
    if budget.tokenizer == "heuristic":
        return math.ceil(len(text.encode("utf-8")) / 4)
    if budget.counter is not None:
        try:
            return int(budget.counter(text))
        except Exception as exc:
            raise TokenizerError(f"tokenizer callable failed: {exc}") from exc
    return _external_count(budget.command, text)


class ShedItem(NamedTuple):
    table: str
    column: str
    field: str  # "value_description" or "description"


@dataclass(frozen=True)
class TablePiece:
    """A table, or a slice of its columns when the table had to be split."""

    table: str
    columns: tuple[str, ...] | None = None
    part: tuple[int, int] | None = None


@dataclass(frozen=True)
class SchemaRendering:
    schema: DatabaseSchema
    pieces: tuple[TablePiece, ...]
    dropped: frozenset = frozenset()

    @classmethod
    def full(cls, schema: DatabaseSchema) -> "SchemaRendering":
        return cls(schema, tuple(TablePiece(t.name) for t in schema.tables))

    @property
    def table_names(self) -> list[str]:
        seen = []
        for p in self.pieces:
            if p.table not in seen:
                seen.append(p.table)
        return seen

    def text(self) -> str:
        present = {p.table.casefold() for p in self.pieces}
        return "\n\n".join(self._render_piece(p, present) for p in self.pieces)

    def _render_piece(self, piece: TablePiece, present: set[str]) -> str:
        table = self.schema.table(piece.table)
        wanted = None if piece.columns is None else {c.casefold() for c in piece.columns}
        header = f"Table: {quote_ident(table.name)}"
        if piece.part is not None:
            header += f" (part {piece.part[0]} of {piece.part[1]})"
        lines = [header]
        shown = set()
        for col in table.columns:
            if wanted is not None and col.name.casefold() not in wanted:
                continue
            shown.add(col.name.casefold())
            attrs = [a for a in (col.sql_type, "primary key" if col.is_primary_key else "") if a]
            lines.append(f"  - {quote_ident(col.name)}" + (f" ({', '.join(attrs)})" if attrs else ""))
            if col.description and (table.name, col.name, "description") not in self.dropped:
                lines.append(f"      description: {col.description}")
            if col.value_description and (table.name, col.name, "value_description") not in self.dropped:
                lines.append(f"      values: {col.value_description}")
        for fk in self.schema.foreign_keys:
            if fk.from_table.casefold() != table.name.casefold() or fk.from_column.casefold() not in shown:
                continue
            if fk.to_table.casefold() in present:
                lines.append(
                    f"  foreign key: {quote_ident(fk.from_table)}.{quote_ident(fk.from_column)}"
                    f" = {quote_ident(fk.to_table)}.{quote_ident(fk.to_column)}"
                )
            else:
                lines.append(f"  related table: {quote_ident(fk.to_table)} (via {quote_ident(fk.from_column)})")
        return "\n".join(lines)

    def drop(self, item: ShedItem) -> "SchemaRendering":
        return replace(self, dropped=self.dropped | {tuple(item)})

    def droppable(self) -> list[ShedItem]:
        """Description lines still present, in shedding order."""
        order = []
        for fld in ("value_description", "description"):
            for piece in reversed(self.pieces):
                table = self.schema.table(piece.table)
                cols = table.columns
                if piece.columns is not None:
                    keep = {c.casefold() for c in piece.columns}
                    cols = [c for c in cols if c.name.casefold() in keep]
                for col in reversed(cols):
                    if getattr(col, fld) and (table.name, col.name, fld) not in self.dropped:
                        order.append(ShedItem(table.name, col.name, fld))
        return order


def shed_descriptions(
    rendering: SchemaRendering,
    budget: TokenBudget,
    measure: Callable[[SchemaRendering], int] | None = None,
) -> tuple[SchemaRendering, list[ShedItem]]:
    """Drop description lines until ``rendering`` fits ``budget``.

    Value descriptions go first, then descriptions, walking from the last
    table (and last column) backward, one line at a time.  ``measure``
    defaults to counting the rendering alone; callers pass a closure that
    measures the whole prompt.  The result may still be over budget once
    every description is gone; the report then lists all of them.
    """
    if measure is None:
        measure = lambda r: count_tokens(r.text(), budget)  # noqa: E731
    report: list[ShedItem] = []
    if measure(rendering) <= budget.max_tokens:
        return rendering, report
    for item in rendering.droppable():
        rendering = rendering.drop(item)
        report.append(item)
        if measure(rendering) <= budget.max_tokens:
            break
    return rendering, report


@dataclass(frozen=True)
class PromptChunk:
    index: int
    total: int
    text: str
    included_tables: tuple[str, ...]
    token_count: int
    split_tables: tuple[str, ...] = ()
    shed: tuple[ShedItem, ...] = ()
    pieces: tuple[TablePiece, ...] = ()

    def to_json(self, question_id=None) -> dict:
        return {
            "question_id": question_id,
            "index": self.index,
            "total": self.total,
            "included_tables": list(self.included_tables),
            "token_count": self.token_count,
            "text": self.text,
        }


def chunk_schema(
    schema: DatabaseSchema,
    question: str,
    hint: str,
    budget: TokenBudget,
    template: PromptTemplate,
    instruction: str = "",
) -> list[PromptChunk]:
    """Split one question's schema into prompts that each fit ``budget``.

    Tables are added one at a time in schema order until the next table no
    longer fits, then a new prompt is started.  A table too large for an
    empty prompt first loses its descriptions, then is split by columns
    with the table header repeated.  Either reduced form still joins the
    open prompt when it fits there.
    """

    def prompt_for(rendering: SchemaRendering) -> str:
        return template.render(instruction=instruction, question=question, hint=hint, schema=rendering.text())

    def size(rendering: SchemaRendering) -> int:
        return count_tokens(prompt_for(rendering), budget)

    def fits(rendering: SchemaRendering) -> bool:
        return size(rendering) <= budget.max_tokens

    empty = SchemaRendering(schema, ())
    scaffold = size(empty)
    if scaffold > budget.max_tokens:
        raise BudgetError(f"prompt scaffold alone needs {scaffold} tokens, budget is {budget.max_tokens}")

    groups: list[SchemaRendering] = []
    current = empty
    for table in schema.tables:
        piece = TablePiece(table.name)
        candidate = replace(current, pieces=current.pieces + (piece,))
        if fits(candidate):
            current = candidate
            continue
        alone = SchemaRendering(schema, (piece,))
        if fits(alone):
            if current.pieces:
                groups.append(current)
            current = alone
            continue
        shed, report = shed_descriptions(alone, budget, size)
        if fits(shed):
            logger.info("%s: table %s shed %d description lines to fit", schema.db_id, table.name, len(report))
            merged = SchemaRendering(schema, current.pieces + (piece,), current.dropped | shed.dropped)
            if current.pieces and fits(merged):
                current = merged
                continue
            if current.pieces:
                groups.append(current)
            current = shed
            continue
        parts = _split_table(schema, table, shed.dropped, current, fits)
        logger.info("%s: table %s split into %d parts", schema.db_id, table.name, len(parts))
        groups.extend(parts[:-1])
        current = parts[-1]
    if current.pieces:
        groups.append(current)

    chunks = []
    for i, rendering in enumerate(groups):
        text = prompt_for(rendering)
        chunks.append(
            PromptChunk(
                index=i,
                total=len(groups),
                text=text,
                included_tables=tuple(rendering.table_names),
                token_count=count_tokens(text, budget),
                split_tables=tuple(p.table for p in rendering.pieces if p.part is not None),
                shed=tuple(ShedItem(*d) for d in sorted(rendering.dropped)),
                pieces=rendering.pieces,
            )
        )
    return chunks


def _split_table(
    schema: DatabaseSchema, table: TableDef, dropped: frozenset, host: SchemaRendering, fits
) -> list[SchemaRendering]:
    """Pack a table's columns first-fit, starting in ``host`` (the open chunk).

    Returns the finished chunks; a chunk that only received other tables is
    returned unchanged.  Packing is measured with the real "(part k of n)"
    headers, so it is repeated until the guessed part count n settles.
    """
    guess = 1
    for _ in range(8):
        finished = _pack_columns(schema, table, dropped, host, fits, guess)
        n = sum(1 for _, c in finished if c)
        if n == guess:
            break
        guess = n
    else:
        logger.warning("%s: part count for table %s did not settle", schema.db_id, table.name)

    out, k = [], 0
    for base, names in finished:
        if not names:
            out.append(base)
            continue
        k += 1
        piece = TablePiece(table.name, tuple(names), (k, n))
        rendering = SchemaRendering(schema, base.pieces + (piece,), base.dropped | dropped)
        if not fits(rendering):
            raise BudgetError(f"table {table.name} could not be split to fit the budget")
        out.append(rendering)
    return out


def _pack_columns(schema, table, dropped, host, fits, n_guess):
    empty = SchemaRendering(schema, ())
    finished: list[tuple[SchemaRendering, list[str]]] = []
    cols: list[str] = []
    k = 1

    def probe(base: SchemaRendering, names: list[str]) -> SchemaRendering:
        return SchemaRendering(
            schema,
            base.pieces + (TablePiece(table.name, tuple(names), (k, n_guess)),),
            base.dropped | dropped,
        )

    for name in table.column_names:
        if fits(probe(host, cols + [name])):
            cols.append(name)
            continue
        if cols:
            finished.append((host, cols))
            k += 1
        elif host.pieces:
            finished.append((host, []))
        host, cols = empty, [name]
        if not fits(probe(host, cols)):
            raise BudgetError(f"column {table.name}.{name} alone does not fit the budget")
    finished.append((host, cols))
    return finished


def render_schema(schema: DatabaseSchema, tables: Sequence[str] | None = None) -> str:
    """Full rendering (all descriptions) of ``schema`` or a subset of its tables."""
    names = schema.table_names if tables is None else list(tables)
    return SchemaRendering(schema, tuple(TablePiece(n) for n in names)).text()
