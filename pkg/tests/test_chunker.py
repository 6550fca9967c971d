from __future__ import annotations

import math
import random
import sys

import pytest

from nl2sqlkit.chunker import (
    SchemaRendering,
    ShedItem,
    TablePiece,
    TokenBudget,
    chunk_schema,
    count_tokens,
    render_schema,
    shed_descriptions,
)
from nl2sqlkit.corpus import ColumnDef, DatabaseSchema, TableDef
from nl2sqlkit.errors import BudgetError, ConfigurationError, TokenizerError
from nl2sqlkit.templates import PromptTemplate

TEMPLATE = PromptTemplate("Question: {question}\nHint: {hint}\nSchema:\n{schema}\n")
QUESTION = "What is the mailing street of the school with the most FRPM?"
HINT = "FRPM = free or reduced price meal"

# Hand-written renderings of the two fixture tables.
SCHOOLS = (
    "Table: schools\n"
    "  - CDSCode (TEXT, primary key)\n"
    "      description: California Department of Schools code\n"
    "  - MailStreet (TEXT)\n"
    "      description: Mailing street address\n"
    "      values: unabbreviated mailing address\n"
    "  - County (TEXT)\n"
    "      description: County name"
)
FRPM_BODY = (
    "Table: frpm\n"
    "  - CDSCode (TEXT, primary key)\n"
    "      description: CDSCode\n"
    "  - `FRPM Count (K-12)` (REAL)\n"
    "      description: Free or Reduced Price Meal Count\n"
    "      values: eligible FRPM rate = FRPM / Enrollment\n"
)
FRPM_WITH_SCHOOLS = FRPM_BODY + "  foreign key: frpm.CDSCode = schools.CDSCode"
FRPM_ALONE = FRPM_BODY + "  related table: schools (via CDSCode)"


def tokens(s: str) -> int:
    return math.ceil(len(s.encode("utf-8")) / 4)


def prompt(schema_text: str) -> str:
    return f"Question: {QUESTION}\nHint: {HINT}\nSchema:\n{schema_text}\n"


# -- count_tokens -----------------------------------------------------------------------


def test_count_tokens_examples():
    assert count_tokens("") == 0
    assert count_tokens("SELECT") == 2
    assert count_tokens("é") == 1  # two bytes


def test_count_tokens_concatenation_property():
    rng = random.Random(11)
    alphabet = "abc xyz\n\té€😀"
    for _ in range(100):
        a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 40)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 40)))
        assert count_tokens(a + b) >= max(count_tokens(a), count_tokens(b))


def test_external_tokenizer_callable_and_command():
    words = TokenBudget(100, tokenizer="external", counter=lambda s: len(s.split()))
    assert count_tokens("one two three", words) == 3
    cmd = TokenBudget(100, tokenizer="external", command=(sys.executable, "-c", "import sys; print(len(sys.stdin.read()))"))
    assert count_tokens("abcde", cmd) == 5


def test_external_tokenizer_failure_is_loud():
    broken = TokenBudget(100, tokenizer="external", command=(sys.executable, "-c", "raise SystemExit(3)"))
    with pytest.raises(TokenizerError):
        count_tokens("x", broken)
    with pytest.raises(TokenizerError):
        count_tokens("x", TokenBudget(100, tokenizer="external", counter=lambda s: 1 / 0))


def test_budget_validation():
    with pytest.raises(ConfigurationError):
        TokenBudget(0)
    with pytest.raises(ConfigurationError):
        TokenBudget(10, tokenizer="external")


# -- rendering --------------------------------------------------------------------------


def test_rendering_matches_hand_written_text(schools_schema):
    assert render_schema(schools_schema) == SCHOOLS + "\n\n" + FRPM_WITH_SCHOOLS
    assert render_schema(schools_schema, ["frpm"]) == FRPM_ALONE


# -- chunk_schema -----------------------------------------------------------------------


def test_generous_budget_gives_one_chunk(schools_schema):
    chunks = chunk_schema(schools_schema, QUESTION, HINT, TokenBudget(4096), TEMPLATE)
    assert len(chunks) == 1
    assert chunks[0].included_tables == ("schools", "frpm")
    assert chunks[0].text == prompt(SCHOOLS + "\n\n" + FRPM_WITH_SCHOOLS)


def test_forcing_budget_gives_two_chunks(schools_schema):
    both = tokens(prompt(SCHOOLS + "\n\n" + FRPM_WITH_SCHOOLS))
    budget = both - 1
    # the forcing budget still admits each table on its own
    assert tokens(prompt(SCHOOLS)) <= budget and tokens(prompt(FRPM_ALONE)) <= budget
    chunks = chunk_schema(schools_schema, QUESTION, HINT, TokenBudget(budget), TEMPLATE)
    assert [c.included_tables for c in chunks] == [("schools",), ("frpm",)]
    assert [(c.index, c.total) for c in chunks] == [(0, 2), (1, 2)]
    assert chunks[0].text == prompt(SCHOOLS)
    assert chunks[1].text == prompt(FRPM_ALONE)
    for c in chunks:
        assert tokens(c.text) == c.token_count <= budget
        assert c.shed == () and c.split_tables == ()


def test_scaffold_over_budget(schools_schema):
    scaffold = tokens(prompt(""))
    with pytest.raises(BudgetError):
        chunk_schema(schools_schema, QUESTION, HINT, TokenBudget(scaffold - 1), TEMPLATE)


def test_chunking_is_deterministic(schools_schema):
    budget = TokenBudget(tokens(prompt(SCHOOLS)))
    a = chunk_schema(schools_schema, QUESTION, HINT, budget, TEMPLATE)
    b = chunk_schema(schools_schema, QUESTION, HINT, budget, TEMPLATE)
    assert a == b


def test_oversized_table_sheds_descriptions(schools_schema):
    # schools with its descriptions does not fit alone, without the values line it does
    no_values = SCHOOLS.replace("      values: unabbreviated mailing address\n", "")
    budget = tokens(prompt(no_values))
    assert tokens(prompt(SCHOOLS)) > budget
    chunks = chunk_schema(schools_schema, QUESTION, HINT, TokenBudget(budget), TEMPLATE)
    assert chunks[0].text == prompt(no_values)
    assert chunks[0].shed == (ShedItem("schools", "MailStreet", "value_description"),)
    assert all(c.token_count <= budget for c in chunks)


def _wide_schema(n=30) -> DatabaseSchema:
    cols = tuple(ColumnDef(f"measure_{i:02d}", "REAL", f"reading number {i}") for i in range(n))
    return DatabaseSchema("wide", (TableDef("small", (ColumnDef("id", "INTEGER"),)), TableDef("readings", cols)))


def test_oversized_table_is_split_by_columns():
    schema = _wide_schema()
    budget = TokenBudget(100)
    chunks = chunk_schema(schema, "q", "h", budget, TEMPLATE)
    assert len(chunks) > 1
    parts = [p for c in chunks for p in c.pieces if p.table == "readings"]
    assert all(p.part is not None for p in parts)
    n = len(parts)
    assert [p.part for p in parts] == [(k, n) for k in range(1, n + 1)]
    shown = [col for p in parts for col in p.columns]
    assert shown == [c.name for c in schema.table("readings").columns]
    for c in chunks:
        assert tokens(c.text) <= budget.max_tokens
        for p in c.pieces:
            if p.part:
                assert f"Table: readings (part {p.part[0]} of {p.part[1]})" in c.text
    # the small table and the first slice share the opening chunk
    assert chunks[0].included_tables == ("small", "readings")


def test_single_column_over_budget_is_an_error():
    schema = DatabaseSchema("d", (TableDef("t", (ColumnDef("c" * 400, "TEXT"),)),))
    with pytest.raises(BudgetError):
        chunk_schema(schema, "q", "h", TokenBudget(60), TEMPLATE)


def test_chunk_dump_record(schools_schema):
    (chunk,) = chunk_schema(schools_schema, QUESTION, HINT, TokenBudget(4096), TEMPLATE)
    rec = chunk.to_json(question_id=4)
    assert set(rec) == {"question_id", "index", "total", "included_tables", "token_count", "text"}
    assert rec["included_tables"] == ["schools", "frpm"]


# -- shed_descriptions ------------------------------------------------------------------


def test_shed_identity_when_within_budget(schools_schema):
    full = SchemaRendering.full(schools_schema)
    out, report = shed_descriptions(full, TokenBudget(4096))
    assert out == full and report == []


def test_shed_exactly_one_value_line(schools_schema):
    full = SchemaRendering.full(schools_schema)
    without = (SCHOOLS + "\n\n" + FRPM_WITH_SCHOOLS).replace(
        "      values: eligible FRPM rate = FRPM / Enrollment\n", ""
    )
    budget = TokenBudget(tokens(without))
    assert tokens(full.text()) > budget.max_tokens
    out, report = shed_descriptions(full, budget)
    assert report == [ShedItem("frpm", "FRPM Count (K-12)", "value_description")]
    assert out.text() == without


def test_shed_everything_still_over(schools_schema):
    full = SchemaRendering.full(schools_schema)
    out, report = shed_descriptions(full, TokenBudget(5))
    assert len(report) == 7
    assert "description:" not in out.text() and "values:" not in out.text()
    assert {(i.table, i.column, i.field) for i in report} == set(out.dropped)


def test_split_piece_renders_only_its_columns(schools_schema):
    r = SchemaRendering(schools_schema, (TablePiece("schools", ("County",), (2, 2)),))
    assert r.text() == "Table: schools (part 2 of 2)\n  - County (TEXT)\n      description: County name"
