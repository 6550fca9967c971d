"""Tokenizer and recursive-descent parser for the SQLite SELECT dialect.

Only read queries are accepted.  Anything outside the supported grammar
(DML, window functions, recursive CTEs, bind parameters, ...) raises
:class:`UnsupportedConstruct` with the offending token and its offset;
the parser never returns a partial tree.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import UnsupportedConstruct
from . import ast

RESERVED = frozenset(
    """
    SELECT FROM WHERE GROUP BY HAVING ORDER LIMIT OFFSET UNION INTERSECT EXCEPT ALL
    DISTINCT AS ON USING JOIN INNER LEFT RIGHT FULL OUTER CROSS NATURAL AND OR NOT
    IS IN LIKE GLOB BETWEEN CASE WHEN THEN ELSE END NULL EXISTS WITH CAST ASC DESC
    COLLATE ESCAPE WINDOW VALUES INDEXED ISNULL NOTNULL
    """.split()
)

STATEMENT_STARTS = frozenset(
    "INSERT UPDATE DELETE REPLACE CREATE DROP ALTER ATTACH DETACH PRAGMA VACUUM "
    "BEGIN COMMIT ROLLBACK SAVEPOINT RELEASE REINDEX ANALYZE EXPLAIN UPSERT".split()
)

_OPERATORS = ("||", "<=", ">=", "<>", "!=", "==", "<<", ">>", "->")
_SINGLE = set("=<>+-*/%&|~(),.;")


@dataclass(frozen=True)
class Token:
    kind: str  # word, qident, string, number, blob, op, param, eof
    value: str
    offset: int
    quote: str = ""

    @property
    def upper(self) -> str:
        return self.value.upper() if self.kind == "word" else ""


_NUMBER = re.compile(r"0[xX][0-9A-Fa-f]+|(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_WORD = re.compile(r"[A-Za-z_\u0080-￿][A-Za-z0-9_$\u0080-￿]*")


def tokenize(sql: str) -> list[Token]:
    tokens = []
    i = 0
    n = len(sql)
    while i < n:
        ch = sql[i]
        if ch.isspace():
            i += 1
            continue
        if sql.startswith("--", i):
            end = sql.find("\n", i)
            i = n if end < 0 else end + 1
            continue
        if sql.startswith("/*", i):
            end = sql.find("*/", i + 2)
            i = n if end < 0 else end + 2
            continue
        if ch in "xX" and i + 1 < n and sql[i + 1] == "'":
            end = sql.find("'", i + 2)
            if end < 0:
                raise UnsupportedConstruct("unterminated blob literal", sql[i:i + 10], i)
            tokens.append(Token("blob", sql[i + 2:end], i))
            i = end + 1
            continue
        if ch == "'":
            value, i2 = _read_quoted(sql, i, "'", "'")
            tokens.append(Token("string", value, i))
            i = i2
            continue
        if ch in '"`[':
            close = {"[": "]", '"': '"', "`": "`"}[ch]
            value, i2 = _read_quoted(sql, i, ch, close)
            tokens.append(Token("qident", value, i, quote=ch))
            i = i2
            continue
        m = _NUMBER.match(sql, i)
        if m and (ch.isdigit() or ch == "."):
            if ch == "." and not m.group(0)[1:2].isdigit():
                m = None
            if m:
                tokens.append(Token("number", m.group(0), i))
                i = m.end()
                continue
        m = _WORD.match(sql, i)
        if m:
            tokens.append(Token("word", m.group(0), i))
            i = m.end()
            continue
        if ch in "?:@$":
            tokens.append(Token("param", ch, i))
            i += 1
            continue
        op = next((o for o in _OPERATORS if sql.startswith(o, i)), None)
        if op is None and ch in _SINGLE:
            op = ch
        if op is None:
            raise UnsupportedConstruct("unexpected character", ch, i)
        tokens.append(Token("op", op, i))
        i += len(op)
    tokens.append(Token("eof", "", n))
    return tokens


def _read_quoted(sql: str, start: int, open_: str, close: str) -> tuple[str, int]:
    i = start + 1
    parts = []
    while True:
        end = sql.find(close, i)
        if end < 0:
            raise UnsupportedConstruct("unterminated quoted token", sql[start:start + 10], start)
        parts.append(sql[i:end])
        # doubled closing quote is an escaped quote ([...] has no escape)
        if close != "]" and sql.startswith(close * 2, end):
            parts.append(close)
            i = end + 2
            continue
        return "".join(parts), end + 1


class Parser:
    def __init__(self, sql: str):
        self.sql = sql
        self.tokens = tokenize(sql)
        self.pos = 0

    # -- token helpers -------------------------------------------------
    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, k: int = 1) -> Token:
        return self.tokens[min(self.pos + k, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, message: str, tok: Token | None = None):
        tok = tok or self.tok
        raise UnsupportedConstruct(message, tok.value or "<end of input>", tok.offset)

    def at_kw(self, *words: str) -> bool:
        return self.tok.upper in words

    def accept_kw(self, *words: str) -> str | None:
        if self.tok.upper in words:
            return self.advance().upper
        return None

    def expect_kw(self, word: str) -> None:
        if not self.accept_kw(word):
            self.error(f"expected {word}")

    def at_op(self, *ops: str) -> bool:
        return self.tok.kind == "op" and self.tok.value in ops

    def accept_op(self, op: str) -> bool:
        if self.at_op(op):
            self.advance()
            return True
        return False

    def expect_op(self, op: str) -> None:
        if not self.accept_op(op):
            self.error(f"expected {op!r}")

    def identifier(self, what: str = "identifier", allow_reserved: bool = False) -> Token:
        tok = self.tok
        if tok.kind == "qident":
            return self.advance()
        if tok.kind == "word" and (allow_reserved or tok.upper not in RESERVED):
            return self.advance()
        self.error(f"expected {what}")

    def optional_alias(self) -> str | None:
        if self.accept_kw("AS"):
            tok = self.tok
            if tok.kind == "string":
                return self.advance().value
            return self.identifier("alias").value
        tok = self.tok
        if tok.kind == "qident" or (tok.kind == "word" and tok.upper not in RESERVED):
            return self.advance().value
        if tok.kind == "string":
            return self.advance().value
        return None

    # -- statements ----------------------------------------------------
    def parse_statement(self) -> ast.Query:
        if self.tok.kind == "eof":
            self.error("empty statement")
        if self.tok.upper in STATEMENT_STARTS:
            self.error("only SELECT statements are supported")
        query = self.parse_query()
        while self.accept_op(";"):
            pass
        if self.tok.kind != "eof":
            self.error("unexpected token after end of statement")
        return query

    def parse_query(self) -> ast.Query:
        ctes = []
        if self.accept_kw("WITH"):
            if self.tok.upper == "RECURSIVE":
                self.error("recursive CTEs are not supported")
            while True:
                ctes.append(self.parse_cte())
                if not self.accept_op(","):
                    break
        cores = [self.parse_core()]
        set_ops = []
        while self.at_kw("UNION", "INTERSECT", "EXCEPT"):
            op = self.advance().upper
            if op == "UNION" and self.accept_kw("ALL"):
                op = "UNION ALL"
            set_ops.append(op)
            cores.append(self.parse_core())
        query = ast.Query(cores=cores, set_ops=set_ops, ctes=ctes)
        if self.accept_kw("ORDER"):
            self.expect_kw("BY")
            query.order_by = self.parse_order_items()
        if self.accept_kw("LIMIT"):
            first = self.parse_expr()
            if self.accept_kw("OFFSET"):
                query.limit, query.offset = first, self.parse_expr()
            elif self.accept_op(","):
                query.offset, query.limit = first, self.parse_expr()
            else:
                query.limit = first
        return query

    def parse_cte(self) -> ast.Cte:
        name = self.identifier("CTE name").value
        columns = []
        if self.accept_op("("):
            while True:
                columns.append(self.identifier("CTE column").value)
                if not self.accept_op(","):
                    break
            self.expect_op(")")
        self.expect_kw("AS")
        if self.tok.upper == "MATERIALIZED" or (self.at_kw("NOT") and self.peek().upper == "MATERIALIZED"):
            self.accept_kw("NOT")
            self.advance()
        self.expect_op("(")
        query = self.parse_query()
        self.expect_op(")")
        return ast.Cte(name=name, query=query, columns=columns)

    def parse_core(self) -> ast.SelectCore:
        if self.at_kw("VALUES"):
            self.error("VALUES clauses are not supported")
        if self.at_op("("):
            self.error("parenthesized compound members are not supported")
        self.expect_kw("SELECT")
        distinct = False
        if self.accept_kw("DISTINCT"):
            distinct = True
        else:
            self.accept_kw("ALL")
        columns = [self.parse_result_column()]
        while self.accept_op(","):
            columns.append(self.parse_result_column())
        core = ast.SelectCore(columns=columns, distinct=distinct)
        if self.accept_kw("FROM"):
            core.from_items = self.parse_from()
        if self.accept_kw("WHERE"):
            core.where = self.parse_expr()
        if self.accept_kw("GROUP"):
            self.expect_kw("BY")
            core.group_by = [self.parse_expr()]
            while self.accept_op(","):
                core.group_by.append(self.parse_expr())
        if self.accept_kw("HAVING"):
            core.having = self.parse_expr()
        if self.at_kw("WINDOW"):
            self.error("window definitions are not supported")
        return core

    def parse_result_column(self) -> ast.ResultColumn:
        tok = self.tok
        if self.accept_op("*"):
            return ast.ResultColumn(ast.Star(offset=tok.offset))
        if tok.kind in ("word", "qident") and self.peek().kind == "op" and self.peek().value == "." \
                and self.peek(2).kind == "op" and self.peek(2).value == "*":
            self.pos += 3
            return ast.ResultColumn(ast.Star(table=tok.value, offset=tok.offset))
        expr = self.parse_expr()
        return ast.ResultColumn(expr, self.optional_alias())

    def parse_from(self) -> list[ast.FromItem]:
        items = [ast.FromItem(self.parse_source())]
        while True:
            if self.accept_op(","):
                items.append(ast.FromItem(self.parse_source(), join=","))
                continue
            natural = bool(self.accept_kw("NATURAL"))
            kind = None
            word = self.accept_kw("LEFT", "RIGHT", "FULL", "INNER", "CROSS")
            if word in ("LEFT", "RIGHT", "FULL"):
                self.accept_kw("OUTER")
                kind = word
            elif word:
                kind = word
            if self.accept_kw("JOIN"):
                kind = kind or "INNER"
            elif kind or natural:
                self.error("expected JOIN")
            else:
                break
            item = ast.FromItem(self.parse_source(), join=kind, natural=natural)
            if self.accept_kw("ON"):
                item.on = self.parse_expr()
            elif self.accept_kw("USING"):
                self.expect_op("(")
                while True:
                    item.using.append(self.identifier("column").value)
                    if not self.accept_op(","):
                        break
                self.expect_op(")")
            items.append(item)
        return items

    def parse_source(self):
        tok = self.tok
        if self.accept_op("("):
            if not self.at_kw("SELECT", "WITH"):
                self.error("parenthesized join clauses are not supported")
            query = self.parse_query()
            self.expect_op(")")
            return ast.SubquerySource(query, self.optional_alias())
        name_tok = self.identifier("table name")
        name = name_tok.value
        if self.at_op(".") and self.peek().kind in ("word", "qident"):
            # schema-qualified name; the schema part is ignored
            self.advance()
            name = self.identifier("table name", allow_reserved=True).value
        if self.at_op("("):
            self.error("table-valued functions are not supported")
        source = ast.TableSource(name=name, offset=tok.offset)
        source.alias = self.optional_alias()
        if self.at_kw("INDEXED") or (self.at_kw("NOT") and self.peek().upper == "INDEXED"):
            self.error("index hints are not supported")
        return source

    def parse_order_items(self) -> list[ast.OrderItem]:
        items = []
        while True:
            expr = self.parse_expr()
            desc = False
            word = self.accept_kw("ASC", "DESC")
            if word == "DESC":
                desc = True
            if self.tok.upper == "NULLS":
                self.advance()
                if self.tok.upper not in ("FIRST", "LAST"):
                    self.error("expected FIRST or LAST")
                self.advance()
            items.append(ast.OrderItem(expr, desc))
            if not self.accept_op(","):
                return items

    # -- expressions ---------------------------------------------------
    def parse_expr(self):
        return self.parse_or()

    def parse_or(self):
        left = self.parse_and()
        while self.accept_kw("OR"):
            left = ast.Binary("OR", left, self.parse_and())
        return left

    def parse_and(self):
        left = self.parse_not()
        while self.accept_kw("AND"):
            left = ast.Binary("AND", left, self.parse_not())
        return left

    def parse_not(self):
        if self.accept_kw("NOT"):
            return ast.Unary("NOT", self.parse_not())
        return self.parse_equality()

    _NEGATABLE = ("IN", "LIKE", "GLOB", "REGEXP", "MATCH", "BETWEEN")

    def parse_equality(self):
        left = self.parse_comparison()
        while True:
            tok = self.tok
            if self.at_op("=", "==", "!=", "<>"):
                op = self.advance().value
                op = {"==": "=", "<>": "!="}.get(op, op)
                left = ast.Binary(op, left, self.parse_comparison())
                continue
            if self.at_kw("IS"):
                self.advance()
                op = "IS"
                if self.accept_kw("NOT"):
                    op = "IS NOT"
                if self.tok.upper == "DISTINCT":
                    self.advance()
                    self.expect_kw("FROM")
                    op = "IS NOT" if op == "IS" else "IS"
                left = ast.Binary(op, left, self.parse_comparison())
                continue
            if self.at_kw("ISNULL", "NOTNULL"):
                left = ast.IsNull(left, negated=self.advance().upper == "NOTNULL")
                continue
            negated = False
            if self.at_kw("NOT") and (self.peek().upper in self._NEGATABLE or self.peek().upper == "NULL"):
                self.advance()
                negated = True
                if self.accept_kw("NULL"):
                    left = ast.IsNull(left, negated=True)
                    continue
            word = self.tok.upper
            if word == "IN":
                self.advance()
                left = self.parse_in(left, negated)
            elif word in ("LIKE", "GLOB", "REGEXP", "MATCH"):
                self.advance()
                right = self.parse_comparison()
                if self.accept_kw("ESCAPE"):
                    right = ast.FuncCall("ESCAPE", [right, self.parse_comparison()])
                left = ast.Binary(("NOT " if negated else "") + word, left, right)
            elif word == "BETWEEN":
                self.advance()
                low = self.parse_comparison()
                self.expect_kw("AND")
                high = self.parse_comparison()
                left = ast.Between(left, low, high, negated)
            elif negated:
                self.error("expected IN, LIKE, GLOB or BETWEEN after NOT", tok)
            else:
                return left

    def parse_in(self, left, negated: bool):
        if not self.at_op("("):
            self.error("IN requires a parenthesized list or subquery")
        self.advance()
        if self.at_kw("SELECT", "WITH"):
            query = self.parse_query()
            self.expect_op(")")
            return ast.InQuery(left, query, negated)
        items = []
        if not self.at_op(")"):
            items.append(self.parse_expr())
            while self.accept_op(","):
                items.append(self.parse_expr())
        self.expect_op(")")
        return ast.InList(left, items, negated)

    def _binary_level(self, ops, next_level):
        left = next_level()
        while self.at_op(*ops):
            op = self.advance().value
            left = ast.Binary(op, left, next_level())
        return left

    def parse_comparison(self):
        return self._binary_level(("<", "<=", ">", ">="), self.parse_bitwise)

    def parse_bitwise(self):
        return self._binary_level(("&", "|", "<<", ">>"), self.parse_additive)

    def parse_additive(self):
        return self._binary_level(("+", "-"), self.parse_multiplicative)

    def parse_multiplicative(self):
        return self._binary_level(("*", "/", "%"), self.parse_concat)

    def parse_concat(self):
        left = self.parse_unary()
        while True:
            if self.at_op("||"):
                self.advance()
                left = ast.Binary("||", left, self.parse_unary())
            elif self.at_op("->"):
                self.error("JSON operators are not supported")
            else:
                return left

    def parse_unary(self):
        if self.at_op("-", "+", "~"):
            op = self.advance().value
            return ast.Unary(op, self.parse_unary())
        expr = self.parse_primary()
        while self.accept_kw("COLLATE"):
            expr = ast.Collate(expr, self.identifier("collation name", allow_reserved=True).value)
        return expr

    def parse_primary(self):
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return ast.Literal(tok.value, "number")
        if tok.kind == "string":
            self.advance()
            return ast.Literal(tok.value, "string")
        if tok.kind == "blob":
            self.advance()
            return ast.Literal(tok.value, "blob")
        if tok.kind == "param":
            self.error("bind parameters are not supported")
        if tok.kind == "op":
            if tok.value == "(":
                self.advance()
                if self.at_kw("SELECT", "WITH"):
                    query = self.parse_query()
                    self.expect_op(")")
                    return ast.Subquery(query)
                expr = self.parse_expr()
                if self.at_op(","):
                    self.error("row values are not supported")
                self.expect_op(")")
                return expr
            self.error("unexpected operator")
        if tok.kind == "eof":
            self.error("unexpected end of input")

        word = tok.upper
        if word == "NULL":
            self.advance()
            return ast.Literal(None, "null")
        if word in ("CURRENT_DATE", "CURRENT_TIME", "CURRENT_TIMESTAMP", "TRUE", "FALSE"):
            self.advance()
            return ast.Literal(word, "keyword")
        if word == "CASE":
            return self.parse_case()
        if word == "CAST":
            self.advance()
            self.expect_op("(")
            expr = self.parse_expr()
            self.expect_kw("AS")
            type_words = []
            while self.tok.kind == "word" and not self.at_op(")"):
                type_words.append(self.advance().value)
            if self.accept_op("("):
                while not self.at_op(")"):
                    if self.tok.kind == "eof":
                        self.error("unterminated type")
                    self.advance()
                self.advance()
            if not type_words:
                self.error("expected type name")
            self.expect_op(")")
            return ast.Cast(expr, " ".join(type_words))
        if word == "EXISTS":
            self.advance()
            self.expect_op("(")
            query = self.parse_query()
            self.expect_op(")")
            return ast.Exists(query)
        if word == "RAISE":
            self.error("RAISE is not supported")
        if word == "SELECT":
            self.error("subquery must be parenthesized")

        if tok.kind == "word" and self.peek().kind == "op" and self.peek().value == "(":
            if word in RESERVED:
                self.error("unexpected keyword")
            return self.parse_function()
        name = self.identifier("expression")
        parts = [name]
        while self.at_op(".") and len(parts) < 3:
            self.advance()
            if self.at_op("*"):
                self.error("qualified * is only allowed in the result column list")
            parts.append(self.identifier("column name", allow_reserved=True))
        if len(parts) == 1:
            return ast.ColumnRef(name=name.value, offset=name.offset, quote=name.quote)
        col = parts[-1]
        return ast.ColumnRef(name=col.value, table=parts[-2].value, offset=name.offset, quote=col.quote)

    def parse_function(self):
        name = self.advance().value
        self.expect_op("(")
        call = ast.FuncCall(name=name)
        if self.accept_op("*"):
            call.star = True
        elif not self.at_op(")"):
            if self.accept_kw("DISTINCT"):
                call.distinct = True
            call.args.append(self.parse_expr())
            while self.accept_op(","):
                call.args.append(self.parse_expr())
            if self.at_kw("ORDER"):
                self.error("ordered aggregate arguments are not supported")
        self.expect_op(")")
        if self.tok.upper in ("OVER", "FILTER"):
            self.error("window functions are not supported")
        return call

    def parse_case(self):
        self.advance()
        operand = None
        if not self.at_kw("WHEN"):
            operand = self.parse_expr()
        whens = []
        while self.accept_kw("WHEN"):
            cond = self.parse_expr()
            self.expect_kw("THEN")
            whens.append((cond, self.parse_expr()))
        if not whens:
            self.error("CASE without WHEN")
        else_ = self.parse_expr() if self.accept_kw("ELSE") else None
        self.expect_kw("END")
        return ast.Case(operand, whens, else_)


def parse_sql(sql: str) -> ast.Query:
    """Parse one SELECT statement into a :class:`~nl2sqlkit.linkex.ast.Query`."""
    return Parser(sql).parse_statement()
