"""Gold schema-link extraction: resolve every column a query touches to its base table."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..corpus import DatabaseSchema, Example, TableDef
from ..errors import AmbiguousColumn, LinkError, SqlParseError, UnknownColumn, UnknownTable
from . import ast
from .link import SchemaLink, close_foreign_keys
from .parser import parse_sql

logger = logging.getLogger(__name__)

Lineage = frozenset  # of (table, column) pairs in schema casing


@dataclass
class Output:
    name: str | None
    lineage: Lineage


@dataclass
class Source:
    visible: str
    original: str
    table: TableDef | None = None
    outputs: list[Output] = field(default_factory=list)

    def lookup(self, column: str) -> Lineage | None:
        if self.table is not None:
            col = self.table.column(column)
            return None if col is None else frozenset({(self.table.name, col.name)})
        key = column.casefold()
        for out in self.outputs:
            if out.name is not None and out.name.casefold() == key:
                return out.lineage
        return None

    def expand(self) -> list[Output]:
        if self.table is not None:
            return [Output(c.name, frozenset({(self.table.name, c.name)})) for c in self.table.columns]
        return list(self.outputs)


@dataclass
class Scope:
    sources: list[Source]
    parent: "Scope | None" = None
    # USING/NATURAL join columns: casefolded name -> indexes of the merged sources
    merged: dict[str, set[int]] = field(default_factory=dict)
    aliases: dict[str, Lineage] = field(default_factory=dict)

    def find_source(self, name: str) -> Source | None:
        key = name.casefold()
        scope = self
        while scope is not None:
            for src in scope.sources:
                if src.visible.casefold() == key:
                    return src
            scope = scope.parent
        # lenient: an aliased table may still be named by its real name
        scope = self
        while scope is not None:
            for src in scope.sources:
                if src.original.casefold() == key:
                    return src
            scope = scope.parent
        return None


class _Extractor:
    def __init__(self, schema: DatabaseSchema):
        self.schema = schema
        self.columns: set[tuple[str, str]] = set()
        self.tables: set[str] = set()

    def record(self, lineage: Iterable[tuple[str, str]]) -> None:
        self.columns.update(lineage)

    # -- queries -------------------------------------------------------
    def query(self, q: ast.Query, outer: Scope | None, env: Mapping[str, list[Output]], demand: bool) -> list[Output]:
        env = dict(env)
        for cte in q.ctes:
            outputs = self.query(cte.query, outer, env, demand=False)
            if cte.columns:
                if len(cte.columns) != len(outputs):
                    raise LinkError(f"CTE {cte.name!r} declares {len(cte.columns)} columns but yields {len(outputs)}")
                outputs = [Output(n, o.lineage) for n, o in zip(cte.columns, outputs)]
            env[cte.name.casefold()] = outputs

        compound = len(q.cores) > 1
        results = [self.core(core, outer, env) for core in q.cores]
        outputs = [Output(o.name, o.lineage) for o in results[0][0]]
        for core_outputs, _ in results[1:]:
            if len(core_outputs) != len(outputs):
                raise LinkError("compound SELECT members have different column counts")
            for i, o in enumerate(core_outputs):
                outputs[i].lineage = outputs[i].lineage | o.lineage
        if compound:
            # column counts must agree, so every starred column is load-bearing
            for o in outputs:
                self.record(o.lineage)

        last_scope = results[-1][1]
        for item in q.order_by:
            if compound:
                ref = item.expr
                if isinstance(ref, ast.ColumnRef) and ref.table is None:
                    match = next((o for o in outputs if o.name and o.name.casefold() == ref.name.casefold()), None)
                    if match is not None:
                        self.record(match.lineage)
                        continue
            self.expr(item.expr, last_scope, env, prefer_alias=True)
        for e in (q.limit, q.offset):
            if e is not None:
                self.expr(e, outer, env)
        if demand:
            for o in outputs:
                self.record(o.lineage)
        return outputs

    def core(self, core: ast.SelectCore, outer: Scope | None, env) -> tuple[list[Output], Scope]:
        scope = Scope(sources=[], parent=outer)
        for item in core.from_items:
            src = self.source(item.source, outer, env)
            scope.sources.append(src)
            right = len(scope.sources) - 1
            using = list(item.using)
            if item.natural:
                right_cols = {o.name.casefold() for o in src.expand() if o.name}
                left_cols = {o.name.casefold() for s in scope.sources[:-1] for o in s.expand() if o.name}
                using += [c for c in right_cols & left_cols]
            for name in using:
                key = name.casefold()
                left = [i for i, s in enumerate(scope.sources[:-1]) if s.lookup(name) is not None]
                if not left or src.lookup(name) is None:
                    raise UnknownColumn(name)
                group = scope.merged.setdefault(key, set())
                group.update(left)
                group.add(right)
                self.record(src.lookup(name))
                self.record(scope.sources[left[-1]].lookup(name))
        for item in core.from_items:
            if item.on is not None:
                self.expr(item.on, scope, env)

        outputs: list[Output] = []
        for rc in core.columns:
            if isinstance(rc.expr, ast.Star):
                if rc.expr.table is None:
                    if not scope.sources:
                        raise LinkError("SELECT * without FROM")
                    for src in scope.sources:
                        outputs.extend(src.expand())
                else:
                    src = next((s for s in scope.sources if s.visible.casefold() == rc.expr.table.casefold()), None)
                    if src is None:
                        raise UnknownTable(rc.expr.table)
                    outputs.extend(src.expand())
                continue
            lineage = self.expr(rc.expr, scope, env)
            name = rc.alias
            if name is None and isinstance(rc.expr, ast.ColumnRef):
                name = rc.expr.name
            outputs.append(Output(name, lineage))
            if rc.alias is not None:
                scope.aliases[rc.alias.casefold()] = lineage

        if core.where is not None:
            self.expr(core.where, scope, env)
        for e in core.group_by:
            self.expr(e, scope, env)
        if core.having is not None:
            self.expr(core.having, scope, env)
        return outputs, scope

    def source(self, src, outer: Scope | None, env) -> Source:
        if isinstance(src, ast.SubquerySource):
            outputs = self.query(src.query, outer, env, demand=False)
            name = src.alias or ""
            return Source(visible=name, original=name, outputs=outputs)
        key = src.name.casefold()
        if key in env:
            return Source(visible=src.alias or src.name, original=src.name, outputs=env[key])
        table = self.schema.table(src.name)
        if table is None:
            raise UnknownTable(src.name)
        self.tables.add(table.name)
        return Source(visible=src.alias or table.name, original=table.name, table=table)

    # -- expressions ---------------------------------------------------
    def expr(self, node, scope: Scope | None, env, prefer_alias: bool = False) -> Lineage:
        if isinstance(node, ast.ColumnRef):
            return self.column(node, scope, prefer_alias)
        if isinstance(node, ast.Subquery):
            outs = self.query(node.query, scope, env, demand=True)
            return frozenset().union(*(o.lineage for o in outs))
        if isinstance(node, ast.InQuery):
            left = self.expr(node.expr, scope, env, prefer_alias)
            outs = self.query(node.query, scope, env, demand=True)
            return left.union(*(o.lineage for o in outs))
        if isinstance(node, ast.Exists):
            self.query(node.query, scope, env, demand=False)
            return frozenset()
        if isinstance(node, ast.Star):
            raise LinkError("* is only valid in a result column list")
        lineage = frozenset()
        for child in ast.children(node):
            lineage |= self.expr(child, scope, env, prefer_alias)
        return lineage

    def column(self, ref: ast.ColumnRef, scope: Scope | None, prefer_alias: bool) -> Lineage:
        if ref.table is not None:
            src = scope.find_source(ref.table) if scope is not None else None
            if src is None:
                raise UnknownTable(ref.table)
            lineage = src.lookup(ref.name)
            if lineage is None:
                raise UnknownColumn(ref.name, src.original or src.visible)
            self.record(lineage)
            return lineage

        key = ref.name.casefold()
        if prefer_alias and scope is not None and key in scope.aliases:
            return scope.aliases[key]
        level = scope
        while level is not None:
            hits = [(i, src, src.lookup(ref.name)) for i, src in enumerate(level.sources)]
            hits = [h for h in hits if h[2] is not None]
            if len(hits) > 1:
                group = level.merged.get(key, set())
                if not {i for i, _, _ in hits} <= group:
                    raise AmbiguousColumn(
                        ref.name, [f"{src.original or src.visible}.{ref.name}" for _, src, _ in hits]
                    )
            if hits:
                lineage = hits[0][2]
                self.record(lineage)
                return lineage
            level = level.parent
        if scope is not None and key in scope.aliases:
            return scope.aliases[key]
        if ref.quote == '"':
            # SQLite reads an unresolvable "double-quoted" identifier as a string
            return frozenset()
        raise UnknownColumn(ref.name)


def extract_links(sql: str | ast.Query, schema: DatabaseSchema) -> SchemaLink:
    """Reverse-engineer the schema link of a gold query.

    Returns every (table, column) pair the query references, in the schema's
    casing, plus each schema foreign key whose two endpoint tables both occur.
    Raises :class:`SqlParseError` or a :class:`LinkError` subclass.
    """
    query = parse_sql(sql) if isinstance(sql, str) else sql
    ex = _Extractor(schema)
    ex.query(query, None, {}, demand=True)
    link = SchemaLink.build(ex.columns, (), ex.tables)
    return close_foreign_keys(link, schema)


@dataclass(frozen=True)
class LinkFailure:
    question_id: int
    db_id: str
    error: str
    message: str


def build_gold_links(examples: Iterable[Example], schemas) -> tuple[dict[int, SchemaLink], list[LinkFailure]]:
    """Extract gold links for a batch; per-query failures are collected, never raised.

    ``schemas`` maps db_id to :class:`DatabaseSchema` (a dict or a
    :class:`~nl2sqlkit.corpus.SchemaStore`); lookup errors propagate.
    """
    links: dict[int, SchemaLink] = {}
    failures: list[LinkFailure] = []
    for ex in examples:
        schema = schemas[ex.db_id]
        try:
            links[ex.question_id] = extract_links(ex.gold_sql, schema)
        except (SqlParseError, LinkError) as exc:
            failures.append(LinkFailure(ex.question_id, ex.db_id, type(exc).__name__, str(exc)))
    if failures:
        logger.info("gold link extraction: %d of %d queries failed", len(failures), len(failures) + len(links))
    return links, failures
