"""Reading BIRD-format corpora: question files, SQLite schemas and description sheets."""

from __future__ import annotations

import csv
import json
import logging
import sqlite3
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

from .errors import CorpusError, ExampleParseError, SchemaValidationError

logger = logging.getLogger(__name__)

SQLITE_MAGIC = b"SQLite format 3\x00"


class Difficulty(str, Enum):
    SIMPLE = "simple"
    MODERATE = "moderate"
    CHALLENGING = "challenging"


DIFFICULTIES = tuple(d.value for d in Difficulty)


@dataclass(frozen=True)
class ColumnDef:
    name: str
    sql_type: str = ""
    description: str | None = None
    value_description: str | None = None
    is_primary_key: bool = False


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnDef, ...]

    def __post_init__(self):
        if not self.name:
            raise SchemaValidationError("table name is empty")
        if not self.columns:
            raise SchemaValidationError(f"table {self.name!r} has no columns")
        seen = set()
        for col in self.columns:
            if not col.name:
                raise SchemaValidationError(f"table {self.name!r} has an unnamed column")
            key = col.name.casefold()
            if key in seen:
                raise SchemaValidationError(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(key)

    def column(self, name: str) -> ColumnDef | None:
        key = name.casefold()
        for col in self.columns:
            if col.name.casefold() == key:
                return col
        return None

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]


@dataclass(frozen=True)
class ForeignKey:
    from_table: str
    from_column: str
    to_table: str
    to_column: str

    def key(self) -> tuple[str, str, str, str]:
        return (
            self.from_table.casefold(),
            self.from_column.casefold(),
            self.to_table.casefold(),
            self.to_column.casefold(),
        )

    def __str__(self) -> str:
        return f"{self.from_table}.{self.from_column} = {self.to_table}.{self.to_column}"


@dataclass(frozen=True)
class DatabaseSchema:
    db_id: str
    tables: tuple[TableDef, ...]
    foreign_keys: tuple[ForeignKey, ...] = ()

    def __post_init__(self):
        seen = set()
        for table in self.tables:
            key = table.name.casefold()
            if key in seen:
                raise SchemaValidationError(f"duplicate table {table.name!r} in {self.db_id!r}")
            seen.add(key)
        for fk in self.foreign_keys:
            for t, c in ((fk.from_table, fk.from_column), (fk.to_table, fk.to_column)):
                table = self.table(t)
                if table is None or table.column(c) is None:
                    raise SchemaValidationError(f"foreign key {fk} does not resolve in {self.db_id!r}")

    def table(self, name: str) -> TableDef | None:
        key = name.casefold()
        for table in self.tables:
            if table.name.casefold() == key:
                return table
        return None

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def tables_with_column(self, column: str) -> list[TableDef]:
        return [t for t in self.tables if t.column(column) is not None]

    def table_index(self, name: str) -> int:
        key = name.casefold()
        for i, table in enumerate(self.tables):
            if table.name.casefold() == key:
                return i
        raise KeyError(name)


@dataclass(frozen=True)
class Example:
    question_id: int
    db_id: str
    question: str
    evidence: str
    gold_sql: str
    difficulty: Difficulty = Difficulty.SIMPLE


@dataclass
class LoadReport:
    total: int = 0
    accepted: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)
    defaulted_difficulty: list[int] = field(default_factory=list)


def _example_from_record(record, index: int) -> tuple[Example, bool]:
    if not isinstance(record, dict):
        raise ExampleParseError("record is not a JSON object", index)
    for key in ("db_id", "question", "SQL"):
        if not isinstance(record.get(key), str):
            raise ExampleParseError(f"field {key!r} missing or not a string", index)
    gold_sql = record["SQL"].strip()
    if not gold_sql:
        raise ExampleParseError("field 'SQL' is empty", index)
    defaulted = False
    label = record.get("difficulty")
    if label is None:
        difficulty = Difficulty.SIMPLE
        defaulted = True
    else:
        try:
            difficulty = Difficulty(str(label).strip().lower())
        except ValueError:
            raise ExampleParseError(
                f"field 'difficulty' has unknown label {label!r} (expected one of {', '.join(DIFFICULTIES)})",
                index,
            ) from None
    qid = record.get("question_id", index)
    if isinstance(qid, bool) or not isinstance(qid, int):
        raise ExampleParseError("field 'question_id' is not an integer", index)
    evidence = record.get("evidence") or ""
    example = Example(
        question_id=qid,
        db_id=record["db_id"],
        question=record["question"],
        evidence=evidence,
        gold_sql=gold_sql,
        difficulty=difficulty,
    )
    return example, defaulted


def _locate_bad_record(text: str) -> int | None:
    """Index of the first array element that fails to decode, if any."""
    decoder = json.JSONDecoder()
    pos = len(text) - len(text.lstrip())
    if not text.startswith("[", pos):
        return None
    pos += 1
    index = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if text.startswith("]", pos):
            return None
        try:
            _, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            return index
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if text.startswith(",", pos):
            pos += 1
            index += 1
        else:
            return index


def read_examples(path, strict: bool = True) -> tuple[list[Example], LoadReport]:
    """Load a BIRD question file.

    With ``strict`` any invalid record raises :class:`ExampleParseError`;
    otherwise invalid records are skipped and listed in the report.
    Records without a difficulty label are loaded as ``simple`` and flagged.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        index = _locate_bad_record(text)
        raise ExampleParseError(
            f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", index
        ) from exc
    if not isinstance(data, list):
        raise ExampleParseError(f"{path}: expected a JSON array of question records")

    report = LoadReport(total=len(data))
    examples = []
    seen_ids = set()
    for index, record in enumerate(data):
        try:
            example, defaulted = _example_from_record(record, index)
            if example.question_id in seen_ids:
                raise ExampleParseError(f"duplicate question_id {example.question_id}", index)
        except ExampleParseError as exc:
            if strict:
                raise
            report.rejected.append((index, str(exc)))
            continue
        seen_ids.add(example.question_id)
        if defaulted:
            report.defaulted_difficulty.append(example.question_id)
        examples.append(example)
    report.accepted = len(examples)
    if report.defaulted_difficulty:
        logger.warning("%s: %d records without difficulty defaulted to simple", path, len(report.defaulted_difficulty))
    return examples, report


def load_examples(path) -> list[Example]:
    return read_examples(path, strict=True)[0]


def _quote(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def connect_readonly(db_file) -> sqlite3.Connection:
    """Open a SQLite file read-only, refusing anything that is not a database."""
    db_file = Path(db_file)
    try:
        with open(db_file, "rb") as fh:
            header = fh.read(len(SQLITE_MAGIC))
    except OSError as exc:
        raise CorpusError(f"cannot read database file {db_file}: {exc}") from exc
    if header != SQLITE_MAGIC:
        raise CorpusError(f"{db_file} is not a SQLite database")
    uri = db_file.resolve().as_uri() + "?mode=ro"
    return sqlite3.connect(uri, uri=True, check_same_thread=False)


def introspect_schema(db_file, db_id: str | None = None) -> DatabaseSchema:
    """Read tables, columns, primary keys and foreign keys from a SQLite catalog."""
    db_file = Path(db_file)
    db_id = db_id or db_file.stem
    conn = connect_readonly(db_file)
    try:
        try:
            names = [
                row[0]
                for row in conn.execute(
                    "SELECT name FROM sqlite_master WHERE type = 'table' "
                    "AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid"
                )
            ]
        except sqlite3.DatabaseError as exc:
            raise CorpusError(f"cannot read catalog of {db_file}: {exc}") from exc
        if not names:
            raise SchemaValidationError(f"database {db_file} has no tables")

        tables = []
        raw_fks = []
        for name in names:
            info = conn.execute(f"PRAGMA table_info({_quote(name)})").fetchall()
            columns = tuple(
                ColumnDef(name=row[1], sql_type=(row[2] or "").strip(), is_primary_key=bool(row[5]))
                for row in info
            )
            tables.append(TableDef(name=name, columns=columns))
            # PRAGMA foreign_key_list rows: id, seq, table, from, to, ...
            for row in sorted(conn.execute(f"PRAGMA foreign_key_list({_quote(name)})").fetchall(), key=lambda r: (r[0], r[1])):
                raw_fks.append((name, row[3], row[2], row[4]))
    finally:
        conn.close()

    provisional = DatabaseSchema(db_id=db_id, tables=tuple(tables))
    fks = []
    seen = set()
    for from_table, from_col, to_table, to_col in raw_fks:
        src = provisional.table(from_table)
        dst = provisional.table(to_table)
        if dst is not None and to_col is None:
            pks = [c.name for c in dst.columns if c.is_primary_key]
            to_col = pks[0] if len(pks) == 1 else None
        if src is None or dst is None or to_col is None or src.column(from_col) is None or dst.column(to_col) is None:
            logger.warning("%s: dropping unresolvable foreign key %s.%s -> %s.%s", db_id, from_table, from_col, to_table, to_col)
            continue
        fk = ForeignKey(src.name, src.column(from_col).name, dst.name, dst.column(to_col).name)
        if fk.key() not in seen:
            seen.add(fk.key())
            fks.append(fk)
    return replace(provisional, foreign_keys=tuple(fks))


@dataclass(frozen=True)
class DescriptionColumns:
    """Header names of the three fields read from each description sheet."""

    name: str = "original_column_name"
    description: str = "column_description"
    value_description: str = "value_description"


def _norm(text: str | None) -> str:
    return " ".join((text or "").split())


def _read_sheet(path: Path) -> list[dict]:
    for encoding in ("utf-8-sig", "cp1252"):
        try:
            with open(path, newline="", encoding=encoding) as fh:
                return list(csv.DictReader(fh))
        except UnicodeDecodeError:
            continue
        except (OSError, csv.Error) as exc:
            raise CorpusError(f"cannot read description sheet {path.name}: {exc}") from exc
    raise CorpusError(f"cannot decode description sheet {path.name}")


def attach_descriptions(
    schema: DatabaseSchema,
    sheets,
    columns: DescriptionColumns = DescriptionColumns(),
    warnings: list[str] | None = None,
) -> DatabaseSchema:
    """Return a copy of ``schema`` with column descriptions read from ``sheets``.

    ``sheets`` is a directory with one CSV per table, matched by file stem.
    Rows naming unknown tables or columns are reported through ``warnings``
    and the log, never raised.
    """
    sheets = Path(sheets)
    if warnings is None:
        warnings = []
    if not sheets.is_dir():
        return schema

    updates: dict[tuple[str, str], tuple[str | None, str | None]] = {}
    for path in sorted(sheets.glob("*.csv")):
        table = schema.table(path.stem.strip())
        if table is None:
            warnings.append(f"{path.name}: no table named {path.stem!r}")
            continue
        for lineno, row in enumerate(_read_sheet(path), start=2):
            name = (row.get(columns.name) or "").strip()
            if not name:
                continue
            col = table.column(name)
            if col is None:
                # some sheets carry trailing or doubled whitespace in names
                col = next((c for c in table.columns if _norm(c.name).casefold() == _norm(name).casefold()), None)
            if col is None:
                warnings.append(f"{path.name}:{lineno}: no column {name!r} in table {table.name!r}")
                continue
            desc = _norm(row.get(columns.description)) or None
            vdesc = _norm(row.get(columns.value_description)) or None
            updates[(table.name, col.name)] = (desc, vdesc)

    for w in warnings:
        logger.warning("%s: %s", schema.db_id, w)
    if not updates:
        return schema
    tables = []
    for table in schema.tables:
        cols = []
        for col in table.columns:
            if (table.name, col.name) in updates:
                desc, vdesc = updates[(table.name, col.name)]
                col = replace(col, description=desc, value_description=vdesc)
            cols.append(col)
        tables.append(replace(table, columns=tuple(cols)))
    return replace(schema, tables=tuple(tables))


class SchemaStore:
    """Lazy, thread-safe access to the databases of a BIRD-style corpus.

    Expected layout: ``<root>/<db_id>/<db_id>.sqlite`` with optional
    ``<root>/<db_id>/database_description/*.csv`` sheets.
    """

    def __init__(self, root, description_columns: DescriptionColumns = DescriptionColumns(), with_descriptions: bool = True):
        self.root = Path(root)
        self.description_columns = description_columns
        self.with_descriptions = with_descriptions
        self._cache: dict[str, DatabaseSchema] = {}
        self._warnings: dict[str, list[str]] = {}
        self._lock = threading.Lock()

    def db_path(self, db_id: str) -> Path:
        return self.root / db_id / f"{db_id}.sqlite"

    def missing(self, db_ids: Iterable[str]) -> list[str]:
        return sorted({d for d in db_ids if not self.db_path(d).is_file()})

    def warnings(self, db_id: str) -> list[str]:
        return self._warnings.get(db_id, [])

    def __contains__(self, db_id: str) -> bool:
        return self.db_path(db_id).is_file()

    def __getitem__(self, db_id: str) -> DatabaseSchema:
        with self._lock:
            if db_id in self._cache:
                return self._cache[db_id]
        path = self.db_path(db_id)
        if not path.is_file():
            raise CorpusError(f"no database file for {db_id!r} at {path}")
        schema = introspect_schema(path, db_id=db_id)
        warnings: list[str] = []
        if self.with_descriptions:
            schema = attach_descriptions(schema, path.parent / "database_description", self.description_columns, warnings)
        with self._lock:
            self._cache.setdefault(db_id, schema)
            self._warnings[db_id] = warnings
            return self._cache[db_id]

    def get(self, db_id: str, default=None):
        try:
            return self[db_id]
        except CorpusError:
            return default
