from __future__ import annotations

import shutil
import sqlite3
from pathlib import Path

import pytest
import yaml

from nl2sqlkit.corpus import ColumnDef, DatabaseSchema, ForeignKey, SchemaStore, TableDef, load_examples

FIXTURES = Path(__file__).parent / "fixtures"
DB_IDS = ("california_schools", "library", "debit_card")


def build_corpus(dest: Path) -> Path:
    """Copy the fixture corpus and materialize each database from its SQL script."""
    shutil.copytree(FIXTURES / "corpus", dest)
    for db_id in DB_IDS:
        script = dest / db_id / f"{db_id}.sql"
        conn = sqlite3.connect(dest / db_id / f"{db_id}.sqlite")
        conn.executescript(script.read_text(encoding="utf-8"))
        conn.commit()
        conn.close()
    return dest


@pytest.fixture(scope="session")
def corpus_root(tmp_path_factory) -> Path:
    return build_corpus(tmp_path_factory.mktemp("corpus") / "dev_databases")


@pytest.fixture(scope="session")
def store(corpus_root) -> SchemaStore:
    return SchemaStore(corpus_root)


@pytest.fixture(scope="session")
def dev_examples(corpus_root):
    return load_examples(corpus_root / "dev.json")


@pytest.fixture(scope="session")
def schools_schema() -> DatabaseSchema:
    """Two-table schema used by the worked chunking and prompt examples."""
    return DatabaseSchema(
        "california_schools",
        (
            TableDef(
                "schools",
                (
                    ColumnDef("CDSCode", "TEXT", "California Department of Schools code", is_primary_key=True),
                    ColumnDef("MailStreet", "TEXT", "Mailing street address", "unabbreviated mailing address"),
                    ColumnDef("County", "TEXT", "County name"),
                ),
            ),
            TableDef(
                "frpm",
                (
                    ColumnDef("CDSCode", "TEXT", "CDSCode", is_primary_key=True),
                    ColumnDef("FRPM Count (K-12)", "REAL", "Free or Reduced Price Meal Count", "eligible FRPM rate = FRPM / Enrollment"),
                ),
            ),
        ),
        (ForeignKey("frpm", "CDSCode", "schools", "CDSCode"),),
    )


@pytest.fixture
def write_config(corpus_root, tmp_path):
    """Write a run config YAML next to the corpus and return its path."""

    def _write(name="run.yaml", **sections) -> Path:
        data = {
            "corpus": {"examples": str(corpus_root / "dev.json"), "databases": str(corpus_root)},
            "output_dir": str(tmp_path / "out"),
        }
        data.update(sections)
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
        return path

    return _write


TOY_DDL = """
CREATE TABLE schools (CDSCode TEXT PRIMARY KEY, MailStreet TEXT, Charter INTEGER);
CREATE TABLE frpm (CDSCode TEXT REFERENCES schools (CDSCode), FRPM_Count REAL);
"""


@pytest.fixture(scope="session")
def toy_db(tmp_path_factory) -> Path:
    """The two-table schools/frpm database used throughout the worked examples."""
    path = tmp_path_factory.mktemp("toy") / "toy.sqlite"
    conn = sqlite3.connect(path)
    conn.executescript(TOY_DDL)
    conn.commit()
    conn.close()
    return path


@pytest.fixture(scope="session")
def toy_schema(toy_db):
    from nl2sqlkit.corpus import introspect_schema

    return introspect_schema(toy_db, "california_schools")


# acceptance criterion number -> (passed, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[n]
        line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
