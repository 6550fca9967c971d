"""Toolkit for two-stage NL2SQL pipelines: schema linking, then SQL generation."""

from __future__ import annotations

__version__ = "0.1.0"

from .chunker import DEFAULT_CHUNK_BUDGET, DEFAULT_ND_BUDGET, TokenBudget, chunk_schema, count_tokens
from .corpus import DatabaseSchema, Difficulty, Example, SchemaStore, introspect_schema, load_examples
from .evalx import EvalReport, compare_results, evaluate, execute_query, link_metrics
from .linkex import SchemaLink, build_gold_links, extract_links, parse_sql, serialize_link
from .postproc import clean_sql, merge_links, parse_link_response, validate_link
from .prompts import LinkMode, PipelineVariant, SqlMode, Stage

__all__ = [
    "DEFAULT_CHUNK_BUDGET",
    "DEFAULT_ND_BUDGET",
    "DatabaseSchema",
    "Difficulty",
    "EvalReport",
    "Example",
    "LinkMode",
    "PipelineVariant",
    "SchemaLink",
    "SchemaStore",
    "SqlMode",
    "Stage",
    "TokenBudget",
    "build_gold_links",
    "chunk_schema",
    "clean_sql",
    "compare_results",
    "count_tokens",
    "evaluate",
    "execute_query",
    "extract_links",
    "introspect_schema",
    "link_metrics",
    "load_examples",
    "merge_links",
    "parse_link_response",
    "parse_sql",
    "serialize_link",
    "validate_link",
]
