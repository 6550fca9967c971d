"""Prompt rendering for both pipeline stages and supervised fine-tuning export."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .chunker import (
    DEFAULT_CHUNK_BUDGET,
    DEFAULT_ND_BUDGET,
    PromptChunk,
    SchemaRendering,
    ShedItem,
    TablePiece,
    TokenBudget,
    chunk_schema,
    count_tokens,
    shed_descriptions,
)
from .corpus import DatabaseSchema, Example
from .errors import BudgetError, ConfigurationError, OverBudgetError
from .linkex.link import SchemaLink, restrict_link, serialize_link
from .templates import PromptTemplate

logger = logging.getLogger(__name__)


class LinkMode(str, Enum):
    NON_DESCRIPTIVE = "non_descriptive"
    CHUNKED = "chunked"
    PERFECT = "perfect"


class SqlMode(str, Enum):
    DIRECT = "direct"
    TRUSTING = "trusting"
    NON_TRUSTING = "non_trusting"
    NON_TRUSTING_LINK_ONLY = "non_trusting_link_only"


class Stage(str, Enum):
    LINK = "link"
    SQL = "sql"


_LINK_LABEL = {LinkMode.NON_DESCRIPTIVE: "ND_p", LinkMode.CHUNKED: "CH_p", LinkMode.PERFECT: "SL_p"}
_SQL_LABEL = {SqlMode.TRUSTING: "T", SqlMode.NON_TRUSTING: "NT", SqlMode.NON_TRUSTING_LINK_ONLY: "NT_sl"}


@dataclass(frozen=True)
class PipelineVariant:
    link_mode: LinkMode = LinkMode.CHUNKED
    sql_mode: SqlMode = SqlMode.NON_TRUSTING

    def __post_init__(self):
        object.__setattr__(self, "link_mode", LinkMode(self.link_mode))
        object.__setattr__(self, "sql_mode", SqlMode(self.sql_mode))

    def validate(self) -> "PipelineVariant":
        if self.sql_mode is SqlMode.DIRECT and self.link_mode is not LinkMode.NON_DESCRIPTIVE:
            raise ConfigurationError(
                f"sql_mode 'direct' ignores schema links; link_mode {self.link_mode.value!r} is meaningless with it"
                " (use non_descriptive)"
            )
        return self

    @property
    def uses_link_stage(self) -> bool:
        return self.sql_mode is not SqlMode.DIRECT and self.link_mode is not LinkMode.PERFECT

    @property
    def label(self) -> str:
        if self.sql_mode is SqlMode.DIRECT:
            return "ND_p + SQL_ft"
        if self.link_mode is LinkMode.PERFECT:
            return f"SL_p + {_SQL_LABEL[self.sql_mode]}"
        return f"{_LINK_LABEL[self.link_mode]} + SL + {_SQL_LABEL[self.sql_mode]}"

    def __str__(self) -> str:
        return f"{self.link_mode.value}/{self.sql_mode.value}"


LINK_INSTRUCTION = (
    "List the tables and columns needed to write a SQL query that answers the question. "
    "Write one line per table as table(column, column, ...), then one line per foreign key "
    "used to join tables as table.column = table.column."
)
CHUNK_INSTRUCTION = (
    LINK_INSTRUCTION + " Only part of the database is shown below; list only tables and columns shown here. "
    "If none of them are needed, answer None."
)
SQL_INSTRUCTIONS = {
    SqlMode.DIRECT: "Write one SQLite query that answers the question. Return only the SQL query, with no explanation.",
    SqlMode.TRUSTING: (
        "Write one SQLite query that answers the question using the tables and columns in the schema link. "
        "Return only the SQL query, with no explanation."
    ),
    SqlMode.NON_TRUSTING: (
        "Write one SQLite query that answers the question. The suggested schema link lists tables and columns "
        "that are probably needed, but it may be incomplete or wrong: check it against the database schema. "
        "Return only the SQL query, with no explanation."
    ),
    SqlMode.NON_TRUSTING_LINK_ONLY: (
        "Write one SQLite query that answers the question. The suggested schema link lists tables and columns "
        "that are probably needed, but it may be incomplete or wrong. "
        "Return only the SQL query, with no explanation."
    ),
}
SQL_TEMPLATE_NAMES = {
    SqlMode.DIRECT: "sql_direct",
    SqlMode.TRUSTING: "sql_trusting",
    SqlMode.NON_TRUSTING: "sql_non_trusting",
    SqlMode.NON_TRUSTING_LINK_ONLY: "sql_non_trusting_link_only",
}


@dataclass(frozen=True)
class RenderedPrompt:
    question_id: int | None
    variant: PipelineVariant
    stage: Stage
    text: str
    token_count: int
    template_hash: str
    chunk_index: int | None = None
    chunk_total: int | None = None
    pieces: tuple[TablePiece, ...] = ()
    shed: tuple[ShedItem, ...] = ()

    @property
    def included_tables(self) -> list[str]:
        seen = []
        for p in self.pieces:
            if p.table not in seen:
                seen.append(p.table)
        return seen

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "stage": self.stage.value,
            "chunk_index": self.chunk_index,
            "chunk_total": self.chunk_total,
            "variant": str(self.variant),
            "included_tables": self.included_tables,
            "token_count": self.token_count,
            "template_hash": self.template_hash,
            "shed": [list(s) for s in self.shed],
            "text": self.text,
        }


def _template(template: PromptTemplate | None, default_name: str) -> PromptTemplate:
    return template if template is not None else PromptTemplate.default(default_name)


def _fit_schema(schema, budget, render) -> tuple[SchemaRendering, list[ShedItem], str, int]:
    """Shed descriptions until ``render(rendering)`` fits; raise if the bare schema does not."""
    full = SchemaRendering.full(schema)
    rendering, report = shed_descriptions(full, budget, lambda r: count_tokens(render(r), budget))
    text = render(rendering)
    tokens = count_tokens(text, budget)
    if tokens > budget.max_tokens:
        raise OverBudgetError(
            f"{schema.db_id}: prompt needs {tokens} tokens without any descriptions, budget is {budget.max_tokens}"
        )
    return rendering, report, text, tokens


def build_link_prompt_nd(
    schema: DatabaseSchema,
    question: str,
    hint: str,
    budget: TokenBudget = TokenBudget(DEFAULT_ND_BUDGET),
    template: PromptTemplate | None = None,
    question_id: int | None = None,
    variant: PipelineVariant | None = None,
) -> RenderedPrompt:
    """Single schema-linking prompt, dropping descriptions as needed to fit."""
    template = _template(template, "link_nd")

    def render(r: SchemaRendering) -> str:
        return template.render(instruction=LINK_INSTRUCTION, question=question, hint=hint, schema=r.text())

    rendering, report, text, tokens = _fit_schema(schema, budget, render)
    return RenderedPrompt(
        question_id=question_id,
        variant=variant or PipelineVariant(LinkMode.NON_DESCRIPTIVE, SqlMode.NON_TRUSTING),
        stage=Stage.LINK,
        text=text,
        token_count=tokens,
        template_hash=template.sha256,
        pieces=rendering.pieces,
        shed=tuple(report),
    )


def build_link_prompts_chunked(
    schema: DatabaseSchema,
    question: str,
    hint: str,
    budget: TokenBudget = TokenBudget(DEFAULT_CHUNK_BUDGET),
    template: PromptTemplate | None = None,
    question_id: int | None = None,
    variant: PipelineVariant | None = None,
) -> list[RenderedPrompt]:
    template = _template(template, "link_chunked")
    chunks = chunk_schema(schema, question, hint, budget, template, instruction=CHUNK_INSTRUCTION)
    variant = variant or PipelineVariant(LinkMode.CHUNKED, SqlMode.NON_TRUSTING)
    return [
        RenderedPrompt(
            question_id=question_id,
            variant=variant,
            stage=Stage.LINK,
            text=chunk.text,
            token_count=chunk.token_count,
            template_hash=template.sha256,
            chunk_index=chunk.index,
            chunk_total=chunk.total,
            pieces=chunk.pieces,
            shed=chunk.shed,
        )
        for chunk in chunks
    ]


def build_sql_prompt(
    variant: PipelineVariant,
    schema: DatabaseSchema,
    link: SchemaLink | None,
    question: str,
    hint: str,
    budget: TokenBudget = TokenBudget(DEFAULT_ND_BUDGET),
    template: PromptTemplate | None = None,
    question_id: int | None = None,
) -> RenderedPrompt:
    """SQL-generation prompt for ``variant.sql_mode``.

    direct: schema only.  trusting: the link only.  non_trusting: schema plus
    the link as a suggestion.  non_trusting_link_only: the link only, with
    the non-trusting wording.
    """
    mode = variant.sql_mode
    template = _template(template, SQL_TEMPLATE_NAMES[mode])
    instruction = SQL_INSTRUCTIONS[mode]
    if mode is not SqlMode.DIRECT and link is None:
        raise ConfigurationError(f"sql_mode {mode.value!r} needs a schema link")
    link_text = serialize_link(link, schema) if link is not None and mode is not SqlMode.DIRECT else ""

    def render(r: SchemaRendering | None) -> str:
        return template.render(
            instruction=instruction,
            question=question,
            hint=hint,
            schema=r.text() if r is not None else "",
            link=link_text,
        )

    pieces: tuple[TablePiece, ...] = ()
    report: list[ShedItem] = []
    if mode in (SqlMode.DIRECT, SqlMode.NON_TRUSTING):
        rendering, report, text, tokens = _fit_schema(schema, budget, render)
        pieces = rendering.pieces
    else:
        text = render(None)
        tokens = count_tokens(text, budget)
        if tokens > budget.max_tokens:
            raise OverBudgetError(f"{schema.db_id}: link-only prompt needs {tokens} tokens, budget is {budget.max_tokens}")
    return RenderedPrompt(
        question_id=question_id,
        variant=variant,
        stage=Stage.SQL,
        text=text,
        token_count=tokens,
        template_hash=template.sha256,
        pieces=pieces,
        shed=tuple(report),
    )


def restrict_to_pieces(link: SchemaLink, pieces: Sequence[TablePiece]) -> SchemaLink:
    """The part of ``link`` a prompt showing ``pieces`` can see.

    For a column-split table only the columns of the shown slice count.
    """
    restricted = restrict_link(link, [p.table for p in pieces])
    slices: dict[str, set[str]] = {}
    for p in pieces:
        if p.columns is not None:
            slices.setdefault(p.table.casefold(), set()).update(c.casefold() for c in p.columns)
    if not slices:
        return restricted

    def shown(table: str, column: str) -> bool:
        cols = slices.get(table.casefold())
        return cols is None or column.casefold() in cols

    return SchemaLink(
        frozenset(pair for pair in restricted.columns if shown(*pair)),
        frozenset(
            fk for fk in restricted.foreign_keys
            if shown(fk.from_table, fk.from_column) and shown(fk.to_table, fk.to_column)
        ),
        restricted.bare_tables,
    )


def chunk_target(link: SchemaLink, prompt: RenderedPrompt, schema: DatabaseSchema | None = None) -> str:
    """Expected answer for one link prompt: the visible part of ``link`` or ``None``."""
    return serialize_link(restrict_to_pieces(link, prompt.pieces), schema)


# -- supervised fine-tuning export -----------------------------------------


def split_examples(
    examples: Sequence[Example],
    validation_fraction: float = 0.15,
    seed: int = 0,
    validation_size: int | None = None,
) -> tuple[list[Example], list[Example]]:
    """Seeded random train/validation partition (order within each part follows the input)."""
    n = len(examples)
    n_valid = validation_size if validation_size is not None else round(n * validation_fraction)
    if not 0 <= n_valid <= n:
        raise ConfigurationError(f"validation size {n_valid} out of range for {n} examples")
    picked = set(random.Random(seed).sample(range(n), n_valid))
    train = [ex for i, ex in enumerate(examples) if i not in picked]
    valid = [ex for i, ex in enumerate(examples) if i in picked]
    return train, valid


@dataclass
class ExportReport:
    path: str
    emitted: int = 0
    examples: int = 0
    skipped: list[tuple[int, str]] = field(default_factory=list)
    template_hash: str = ""

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "emitted": self.emitted,
            "examples": self.examples,
            "skipped": [{"question_id": q, "reason": r} for q, r in self.skipped],
            "template_hash": self.template_hash,
        }


def export_sft(
    examples: Iterable[Example],
    gold_links: Mapping[int, SchemaLink],
    variant: PipelineVariant,
    stage: Stage | str,
    out,
    schemas,
    *,
    predicted_links: Mapping[int, SchemaLink] | None = None,
    budget: TokenBudget | None = None,
    template: PromptTemplate | None = None,
) -> ExportReport:
    """Write prompt/completion pairs as JSON Lines.

    Link stage: the completion is the serialized gold link, or per chunk the
    part of it visible in that chunk (``None`` when nothing is).  SQL stage:
    the completion is the gold SQL.  Non-trusting SQL data is built from
    ``predicted_links`` (links produced by a trained link model), which is
    then required.
    """
    stage = Stage(stage)
    variant = variant.validate()
    nt_modes = (SqlMode.NON_TRUSTING, SqlMode.NON_TRUSTING_LINK_ONLY)
    if stage is Stage.SQL and variant.sql_mode in nt_modes and predicted_links is None:
        raise ConfigurationError("non-trusting SQL export needs predicted links from a prior link-stage run")
    if stage is Stage.LINK and variant.link_mode is LinkMode.PERFECT:
        raise ConfigurationError("link-stage export needs link_mode non_descriptive or chunked")

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = ExportReport(path=str(out))
    with open(out, "w", encoding="utf-8") as fh:
        for ex in examples:
            report.examples += 1
            schema = schemas[ex.db_id]
            gold = gold_links.get(ex.question_id)
            try:
                records = _sft_records(ex, schema, gold, variant, stage, predicted_links, budget, template)
            except (BudgetError, _Skip) as exc:
                report.skipped.append((ex.question_id, str(exc)))
                logger.info("sft export: skipping question %s: %s", ex.question_id, exc)
                continue
            for prompt, completion in records:
                report.template_hash = prompt.template_hash
                record = {
                    "question_id": ex.question_id,
                    "prompt": prompt.text,
                    "completion": completion,
                    "template_hash": prompt.template_hash,
                    "variant": str(variant),
                    "stage": stage.value,
                }
                if prompt.chunk_index is not None:
                    record["chunk_index"] = prompt.chunk_index
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
                report.emitted += 1
    return report


class _Skip(Exception):
    pass


def _sft_records(ex, schema, gold, variant, stage, predicted_links, budget, template):
    needs_gold = stage is Stage.LINK or variant.sql_mode is SqlMode.TRUSTING
    if needs_gold and gold is None:
        raise _Skip("no gold link (extraction failed)")
    if stage is Stage.LINK:
        if variant.link_mode is LinkMode.CHUNKED:
            prompts = build_link_prompts_chunked(
                schema, ex.question, ex.evidence, budget or TokenBudget(DEFAULT_CHUNK_BUDGET), template, ex.question_id, variant
            )
            return [(p, chunk_target(gold, p, schema)) for p in prompts]
        prompt = build_link_prompt_nd(
            schema, ex.question, ex.evidence, budget or TokenBudget(DEFAULT_ND_BUDGET), template, ex.question_id, variant
        )
        return [(prompt, serialize_link(gold, schema))]

    link = None
    if variant.sql_mode is SqlMode.TRUSTING:
        link = gold
    elif variant.sql_mode is not SqlMode.DIRECT:
        link = predicted_links.get(ex.question_id)
        if link is None:
            raise _Skip("no predicted link")
    prompt = build_sql_prompt(
        variant, schema, link, ex.question, ex.evidence, budget or TokenBudget(DEFAULT_ND_BUDGET), template, ex.question_id
    )
    return [(prompt, ex.gold_sql)]
