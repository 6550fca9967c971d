"""The schema-link value type and its canonical text form."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

from ..corpus import DatabaseSchema, ForeignKey

NONE_TEXT = "None"
_SIMPLE_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


@dataclass(frozen=True)
class SchemaLink:
    """Columns (as ``(table, column)`` pairs), foreign keys and column-less tables.

    ``bare_tables`` holds tables a query touches without naming any of their
    columns (``SELECT COUNT(*) FROM t``); a table never appears both there
    and among the column pairs.
    """

    columns: frozenset = frozenset()
    foreign_keys: frozenset = frozenset()
    bare_tables: frozenset = frozenset()

    def __post_init__(self):
        columns = frozenset((t, c) for t, c in self.columns)
        with_columns = {t.casefold() for t, _ in columns}
        bare = frozenset(t for t in self.bare_tables if t.casefold() not in with_columns)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "foreign_keys", frozenset(self.foreign_keys))
        object.__setattr__(self, "bare_tables", bare)

    @classmethod
    def build(cls, columns: Iterable = (), foreign_keys: Iterable = (), tables: Iterable[str] = ()) -> "SchemaLink":
        return cls(frozenset(columns), frozenset(foreign_keys), frozenset(tables))

    @property
    def tables(self) -> frozenset:
        return frozenset(t for t, _ in self.columns) | self.bare_tables

    def table_keys(self) -> frozenset:
        return frozenset(t.casefold() for t in self.tables)

    def key(self) -> tuple[frozenset, frozenset, frozenset]:
        """Case-insensitive identity, for comparisons that ignore casing."""
        return (
            frozenset((t.casefold(), c.casefold()) for t, c in self.columns),
            frozenset(fk.key() for fk in self.foreign_keys),
            frozenset(t.casefold() for t in self.bare_tables),
        )

    def is_empty(self) -> bool:
        return not self.columns and not self.foreign_keys and not self.bare_tables

    def __len__(self) -> int:
        return len(self.columns)


EMPTY_LINK = SchemaLink()


def quote_ident(name: str) -> str:
    if _SIMPLE_IDENT.match(name):
        return name
    return "`" + name.replace("`", "``") + "`"


def serialize_link(link: SchemaLink, schema: DatabaseSchema | None = None) -> str:
    """Render ``link`` in the canonical line format.

    One ``table(colA, colB)`` line per table, tables sorted case-insensitively,
    then one ``t1.c1 = t2.c2`` line per foreign key.  Columns follow schema
    order when ``schema`` is given, otherwise case-insensitive name order.
    An empty link renders as ``None``.
    """
    if link.is_empty():
        return NONE_TEXT
    groups: dict[str, tuple[str, list[str]]] = {}
    for table in sorted(link.tables, key=lambda t: (t.casefold(), t)):
        groups.setdefault(table.casefold(), (table, []))
    for table, column in link.columns:
        groups[table.casefold()][1].append(column)

    lines = []
    for key in sorted(groups):
        table, cols = groups[key]
        tdef = schema.table(table) if schema is not None else None
        if tdef is not None:
            order = {c.name.casefold(): i for i, c in enumerate(tdef.columns)}
            cols.sort(key=lambda c: (order.get(c.casefold(), len(order)), c.casefold(), c))
        else:
            cols.sort(key=lambda c: (c.casefold(), c))
        lines.append(f"{quote_ident(table)}({', '.join(quote_ident(c) for c in cols)})")
    fk_lines = sorted(
        f"{quote_ident(fk.from_table)}.{quote_ident(fk.from_column)} = {quote_ident(fk.to_table)}.{quote_ident(fk.to_column)}"
        for fk in link.foreign_keys
    )
    return "\n".join(lines + fk_lines)


def restrict_link(link: SchemaLink, tables: Iterable[str]) -> SchemaLink:
    """The part of ``link`` that lives in ``tables``; FKs need both endpoints inside."""
    keep = {t.casefold() for t in tables}
    return SchemaLink(
        columns=frozenset(p for p in link.columns if p[0].casefold() in keep),
        foreign_keys=frozenset(
            fk for fk in link.foreign_keys if fk.from_table.casefold() in keep and fk.to_table.casefold() in keep
        ),
        bare_tables=frozenset(t for t in link.bare_tables if t.casefold() in keep),
    )


def schema_foreign_keys_between(schema: DatabaseSchema, tables: Iterable[str]) -> list[ForeignKey]:
    keys = {t.casefold() for t in tables}
    return [fk for fk in schema.foreign_keys if fk.from_table.casefold() in keys and fk.to_table.casefold() in keys]


def close_foreign_keys(link: SchemaLink, schema: DatabaseSchema) -> SchemaLink:
    """Add every schema foreign key whose two endpoint tables both occur in ``link``."""
    present = {fk.key() for fk in link.foreign_keys}
    extra = [fk for fk in schema_foreign_keys_between(schema, link.tables) if fk.key() not in present]
    if not extra:
        return link
    return SchemaLink(link.columns, link.foreign_keys | frozenset(extra), link.bare_tables)


def link_to_json(link: SchemaLink, schema: DatabaseSchema | None = None) -> dict:
    return {
        "link": serialize_link(link, schema),
        "tables": sorted(link.tables, key=str.casefold),
        "columns": sorted(([t, c] for t, c in link.columns), key=lambda p: (p[0].casefold(), p[1].casefold())),
        "foreign_keys": sorted(
            (
                {"from_table": fk.from_table, "from_column": fk.from_column, "to_table": fk.to_table, "to_column": fk.to_column}
                for fk in link.foreign_keys
            ),
            key=lambda d: tuple(v.casefold() for v in d.values()),
        ),
    }


def link_from_json(record: dict) -> SchemaLink:
    columns = frozenset((t, c) for t, c in record.get("columns", []))
    fks = frozenset(ForeignKey(**fk) for fk in record.get("foreign_keys", []))
    return SchemaLink(columns, fks, frozenset(record.get("tables", [])))
