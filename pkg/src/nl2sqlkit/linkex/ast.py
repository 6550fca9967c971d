"""Parse tree for the supported SQLite SELECT subset."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union


@dataclass
class ColumnRef:
    name: str
    table: str | None = None
    offset: int = -1
    # '"' when written as a double-quoted identifier; SQLite may read those as strings
    quote: str = ""


@dataclass
class Star:
    table: str | None = None
    offset: int = -1


@dataclass
class Literal:
    value: object
    kind: str  # number, string, null, blob, keyword


@dataclass
class FuncCall:
    name: str
    args: list = field(default_factory=list)
    distinct: bool = False
    star: bool = False


@dataclass
class Unary:
    op: str
    operand: "Expr"


@dataclass
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass
class Between:
    expr: "Expr"
    low: "Expr"
    high: "Expr"
    negated: bool = False


@dataclass
class InList:
    expr: "Expr"
    items: list
    negated: bool = False


@dataclass
class InQuery:
    expr: "Expr"
    query: "Query"
    negated: bool = False


@dataclass
class Exists:
    query: "Query"
    negated: bool = False


@dataclass
class Subquery:
    query: "Query"


@dataclass
class Case:
    operand: "Expr | None"
    whens: list  # list of (condition, result)
    else_: "Expr | None" = None


@dataclass
class Cast:
    expr: "Expr"
    type_name: str


@dataclass
class Collate:
    expr: "Expr"
    collation: str


@dataclass
class IsNull:
    expr: "Expr"
    negated: bool = False


Expr = Union[
    ColumnRef, Star, Literal, FuncCall, Unary, Binary, Between, InList, InQuery,
    Exists, Subquery, Case, Cast, Collate, IsNull,
]


@dataclass
class ResultColumn:
    expr: Expr
    alias: str | None = None


@dataclass
class TableSource:
    name: str
    alias: str | None = None
    offset: int = -1


@dataclass
class SubquerySource:
    query: "Query"
    alias: str | None = None


@dataclass
class FromItem:
    """One entry of a FROM clause; ``join`` is None for the first item."""

    source: Union[TableSource, SubquerySource]
    join: str | None = None  # ",", "INNER", "LEFT", "RIGHT", "FULL", "CROSS"
    natural: bool = False
    on: Expr | None = None
    using: list[str] = field(default_factory=list)


@dataclass
class OrderItem:
    expr: Expr
    descending: bool = False


@dataclass
class SelectCore:
    columns: list[ResultColumn]
    from_items: list[FromItem] = field(default_factory=list)
    where: Expr | None = None
    group_by: list = field(default_factory=list)
    having: Expr | None = None
    distinct: bool = False


@dataclass
class Cte:
    name: str
    query: "Query"
    columns: list[str] = field(default_factory=list)


@dataclass
class Query:
    """A full SELECT statement: optional CTEs, one or more cores joined by set operators."""

    cores: list[SelectCore]
    set_ops: list[str] = field(default_factory=list)  # len(cores) - 1 entries, e.g. "UNION ALL"
    ctes: list[Cte] = field(default_factory=list)
    order_by: list[OrderItem] = field(default_factory=list)
    limit: Expr | None = None
    offset: Expr | None = None

    @property
    def from_items(self) -> list[FromItem]:
        return [item for core in self.cores for item in core.from_items]


def children(node) -> Iterator:
    """Yield the direct child nodes of any AST node."""
    if isinstance(node, Query):
        for cte in node.ctes:
            yield cte.query
        yield from node.cores
        for item in node.order_by:
            yield item.expr
        if node.limit is not None:
            yield node.limit
        if node.offset is not None:
            yield node.offset
    elif isinstance(node, SelectCore):
        for col in node.columns:
            yield col.expr
        for item in node.from_items:
            if isinstance(item.source, SubquerySource):
                yield item.source.query
            if item.on is not None:
                yield item.on
        if node.where is not None:
            yield node.where
        yield from node.group_by
        if node.having is not None:
            yield node.having
    elif isinstance(node, FuncCall):
        yield from node.args
    elif isinstance(node, Unary):
        yield node.operand
    elif isinstance(node, Binary):
        yield node.left
        yield node.right
    elif isinstance(node, Between):
        yield node.expr
        yield node.low
        yield node.high
    elif isinstance(node, InList):
        yield node.expr
        yield from node.items
    elif isinstance(node, InQuery):
        yield node.expr
        yield node.query
    elif isinstance(node, (Exists, Subquery)):
        yield node.query
    elif isinstance(node, Case):
        if node.operand is not None:
            yield node.operand
        for cond, result in node.whens:
            yield cond
            yield result
        if node.else_ is not None:
            yield node.else_
    elif isinstance(node, (Cast, Collate, IsNull)):
        yield node.expr


def walk(node) -> Iterator:
    yield node
    for child in children(node):
        yield from walk(child)


def column_refs(node) -> list[ColumnRef]:
    return [n for n in walk(node) if isinstance(n, ColumnRef)]
