from __future__ import annotations

import json
import sqlite3

import pytest

from nl2sqlkit.corpus import (
    DatabaseSchema,
    Difficulty,
    SchemaStore,
    TableDef,
    ColumnDef,
    attach_descriptions,
    connect_readonly,
    introspect_schema,
    load_examples,
    read_examples,
)
from nl2sqlkit.errors import CorpusError, ExampleParseError, SchemaValidationError


def _write(tmp_path, records, name="dev.json"):
    path = tmp_path / name
    path.write_text(json.dumps(records), encoding="utf-8")
    return path


def test_loads_bird_records(dev_examples):
    assert len(dev_examples) == 25
    first = dev_examples[0]
    assert first.db_id == "california_schools"
    assert first.gold_sql.startswith("SELECT MailStreet")
    assert {ex.difficulty for ex in dev_examples} == set(Difficulty)


def test_missing_difficulty_defaults_to_simple(tmp_path):
    path = _write(tmp_path, [{"question_id": 7, "db_id": "d", "question": "q", "evidence": "", "SQL": "SELECT 1"}])
    examples, report = read_examples(path)
    assert examples[0].difficulty is Difficulty.SIMPLE
    assert report.defaulted_difficulty == [7]


def test_unknown_difficulty_names_field_and_index(tmp_path):
    rec = {"db_id": "d", "question": "q", "SQL": "SELECT 1"}
    path = _write(tmp_path, [dict(rec, difficulty="easy"), dict(rec, difficulty="hard")])
    with pytest.raises(ExampleParseError) as info:
        load_examples(path)
    assert info.value.index == 0
    assert "difficulty" in str(info.value)


def test_lenient_mode_skips_bad_records(tmp_path):
    rec = {"db_id": "d", "question": "q", "SQL": "SELECT 1", "difficulty": "simple"}
    path = _write(tmp_path, [rec, {"db_id": "d"}, dict(rec, question_id=5)])
    examples, report = read_examples(path, strict=False)
    assert [ex.question_id for ex in examples] == [0, 5]
    assert report.rejected[0][0] == 1


def test_malformed_json_reports_record_index(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('[{"db_id": "a", "question": "q", "SQL": "SELECT 1"},\n {"db_id": "b", oops}]', encoding="utf-8")
    with pytest.raises(ExampleParseError) as info:
        load_examples(path)
    assert info.value.index == 1


def test_introspect_reads_keys(store):
    schema = store["california_schools"]
    assert schema.table_names == ["schools", "frpm", "satscores"]
    assert [c.name for c in schema.table("schools").columns if c.is_primary_key] == ["CDSCode"]
    fks = {str(fk) for fk in schema.foreign_keys}
    assert fks == {"frpm.CDSCode = schools.CDSCode", "satscores.cds = schools.CDSCode"}


def test_composite_primary_key(store):
    ym = store["debit_card"].table("yearmonth")
    assert [c.name for c in ym.columns if c.is_primary_key] == ["CustomerID", "Date"]


def test_descriptions_attached(store):
    col = store["california_schools"].table("schools").column("charter")
    assert col.description == "This field identifies a charter school."
    assert col.value_description.startswith("1 = The school is a charter")
    assert store.warnings("california_schools") == []


def test_description_sheet_problems_become_warnings(tmp_path):
    schema = DatabaseSchema("d", (TableDef("t", (ColumnDef("Name", "TEXT"), ColumnDef("Free  Meal", "REAL"))),))
    sheets = tmp_path / "database_description"
    sheets.mkdir()
    (sheets / "t.csv").write_bytes(
        "original_column_name,column_description,value_description\n"
        "name,caf\xe9 owner,\n"
        "Free Meal,meals,\n"
        "Ghost,nothing,\n".encode("cp1252")
    )
    (sheets / "other.csv").write_text("original_column_name\nx\n", encoding="utf-8")
    warnings: list[str] = []
    out = attach_descriptions(schema, sheets, warnings=warnings)
    assert out.table("t").column("Name").description == "caf\xe9 owner"
    assert out.table("t").column("Free  Meal").description == "meals"
    assert len(warnings) == 2
    assert any("Ghost" in w for w in warnings) and any("other" in w for w in warnings)


def test_connect_readonly_rejects_writes(corpus_root):
    conn = connect_readonly(corpus_root / "library" / "library.sqlite")
    with pytest.raises(sqlite3.OperationalError):
        conn.execute("DELETE FROM books")
    conn.close()


def test_connect_readonly_rejects_non_database(tmp_path):
    path = tmp_path / "x.sqlite"
    path.write_text("not a database")
    with pytest.raises(CorpusError):
        connect_readonly(path)


def test_empty_database_is_rejected(tmp_path):
    path = tmp_path / "empty.sqlite"
    conn = sqlite3.connect(path)
    conn.execute("CREATE TABLE t (a)")
    conn.execute("DROP TABLE t")
    conn.commit()
    conn.close()
    with pytest.raises(SchemaValidationError):
        introspect_schema(path)


def test_store_reports_missing_databases(corpus_root):
    store = SchemaStore(corpus_root)
    assert store.missing(["library", "nope"]) == ["nope"]
    assert "library" in store and "nope" not in store
    assert store.get("nope") is None


def test_empty_file_gives_no_examples(tmp_path):
    assert load_examples(_write(tmp_path, [])) == []


def test_single_record_round_trip(tmp_path):
    rec = {"question_id": 9, "db_id": "california_schools", "question": "q?", "evidence": "hint", "SQL": "SELECT 1", "difficulty": "moderate"}
    (ex,) = load_examples(_write(tmp_path, [rec]))
    assert (ex.question_id, ex.db_id, ex.question, ex.evidence, ex.gold_sql, ex.difficulty) == (
        9, "california_schools", "q?", "hint", "SELECT 1", Difficulty.MODERATE,
    )


def test_toy_database_introspection(toy_schema, toy_db):
    assert toy_schema.table_names == ["schools", "frpm"]
    assert [c.name for c in toy_schema.table("schools").columns] == ["CDSCode", "MailStreet", "Charter"]
    assert toy_schema.table("schools").column("CDSCode").is_primary_key
    assert [str(fk) for fk in toy_schema.foreign_keys] == ["frpm.CDSCode = schools.CDSCode"]
    assert introspect_schema(toy_db, "california_schools") == toy_schema


def test_charter_sheet_row(toy_schema, tmp_path):
    sheets = tmp_path / "sheets"
    sheets.mkdir()
    (sheets / "schools.csv").write_text(
        "original_column_name,column_description,value_description\n"
        " charter ,whether charter,1=yes 0=no\n",
        encoding="utf-8",
    )
    out = attach_descriptions(toy_schema, sheets)
    col = out.table("schools").column("Charter")
    assert (col.description, col.value_description) == ("whether charter", "1=yes 0=no")
    assert out.table_names == toy_schema.table_names


def test_empty_sheet_directory_is_identity(toy_schema, tmp_path):
    (tmp_path / "empty").mkdir()
    assert attach_descriptions(toy_schema, tmp_path / "empty") == toy_schema
