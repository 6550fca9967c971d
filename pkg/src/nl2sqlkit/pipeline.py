"""End-to-end orchestration behind the CLI subcommands.

Every step writes its artifacts as JSON Lines under the run directory so a
finished run can be re-scored, re-reported, or replayed as fixtures.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from . import __version__
from .config import RunConfig
from .corpus import Example, SchemaStore, load_examples
from .errors import BudgetError, ConfigurationError, RunError
from .evalx import EvalReport, evaluate, link_metrics
from .infer import Completion, make_backend, run_stage
from .linkex import SchemaLink, build_gold_links, close_foreign_keys, link_from_json, link_to_json, serialize_link
from .postproc import CleanedSql, Extraction, clean_sql, merge_links, parse_link_response, raw_sql, validate_link
from .prompts import (
    SQL_TEMPLATE_NAMES,
    LinkMode,
    RenderedPrompt,
    SqlMode,
    Stage,
    build_link_prompt_nd,
    build_link_prompts_chunked,
    build_sql_prompt,
    export_sft,
    split_examples,
)
from .templates import PromptTemplate

logger = logging.getLogger(__name__)


def write_jsonl(path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=False) + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except ValueError as exc:
                raise RunError(f"{path}:{lineno}: bad JSON line: {exc}") from exc
    return records


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_links(path) -> dict[int, SchemaLink]:
    """Links from an extract-links file or the links.jsonl of a run."""
    links = {}
    for rec in read_jsonl(path):
        body = rec.get("predicted", rec)
        if body is None:
            continue
        links[rec["question_id"]] = link_from_json(body)
    return links


def load_predictions(path) -> dict[int, CleanedSql]:
    preds = {}
    for rec in read_jsonl(path):
        preds[rec["question_id"]] = CleanedSql(rec["question_id"], rec.get("sql") or "", Extraction(rec["extraction"]))
    return preds


# -- corpus -------------------------------------------------------------------


@dataclass
class Corpus:
    examples: list[Example]
    store: SchemaStore


def load_corpus(config: RunConfig) -> Corpus:
    examples = load_examples(config.examples)
    if config.limit is not None:
        examples = examples[: config.limit]
    store = SchemaStore(config.databases, config.description_columns, config.with_descriptions)
    missing = store.missing(ex.db_id for ex in examples)
    if missing:
        raise RunError(f"missing database files under {config.databases} for: {', '.join(missing)}")
    return Corpus(examples, store)


def gold_links_for(config: RunConfig, corpus: Corpus) -> tuple[dict[int, SchemaLink], list]:
    if config.gold_links:
        return load_links(config.gold_links), []
    return build_gold_links(corpus.examples, corpus.store)


# -- extract-links --------------------------------------------------------------


def extract_links_to(config: RunConfig, out_dir) -> tuple[Path, int, int]:
    corpus = load_corpus(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    links, failures = build_gold_links(corpus.examples, corpus.store)
    records = (
        {"question_id": ex.question_id, "db_id": ex.db_id, **link_to_json(links[ex.question_id], corpus.store[ex.db_id])}
        for ex in corpus.examples
        if ex.question_id in links
    )
    path = out / "gold_links.jsonl"
    n = write_jsonl(path, records)
    write_jsonl(
        out / "gold_link_failures.jsonl",
        ({"question_id": f.question_id, "db_id": f.db_id, "error": f.error, "message": f.message} for f in failures),
    )
    return path, n, len(failures)


# -- chunk (debug dump) -----------------------------------------------------------


def dump_chunks(config: RunConfig, out_dir) -> tuple[Path, int]:
    corpus = load_corpus(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    budget = config.budget(Stage.LINK)
    template = config.template(Stage.LINK)
    records = []
    for ex in corpus.examples:
        schema = corpus.store[ex.db_id]
        try:
            prompts = build_link_prompts_chunked(schema, ex.question, ex.evidence, budget, template, ex.question_id)
        except BudgetError as exc:
            records.append({"question_id": ex.question_id, "error": str(exc)})
            continue
        records.extend(
            {
                "question_id": ex.question_id,
                "index": p.chunk_index,
                "total": p.chunk_total,
                "included_tables": p.included_tables,
                "token_count": p.token_count,
                "text": p.text,
            }
            for p in prompts
        )
    path = out / "chunks.jsonl"
    return path, write_jsonl(path, records)


# -- run ------------------------------------------------------------------------------


@dataclass
class RunSummary:
    out_dir: Path
    predictions_path: Path
    examples: int
    failures: dict[int, str] = field(default_factory=dict)


def _template_hash(config: RunConfig, stage: Stage) -> str | None:
    if stage is Stage.LINK:
        if not config.variant.uses_link_stage:
            return None
        name = "link_chunked" if config.variant.link_mode is LinkMode.CHUNKED else "link_nd"
    else:
        name = SQL_TEMPLATE_NAMES[config.variant.sql_mode]
    template = config.template(stage) or PromptTemplate.default(name)
    return template.sha256


def _link_prompts(config: RunConfig, ex: Example, schema) -> list[RenderedPrompt]:
    budget = config.budget(Stage.LINK)
    template = config.template(Stage.LINK)
    if config.variant.link_mode is LinkMode.CHUNKED:
        return build_link_prompts_chunked(schema, ex.question, ex.evidence, budget, template, ex.question_id, config.variant)
    return [build_link_prompt_nd(schema, ex.question, ex.evidence, budget, template, ex.question_id, config.variant)]


def _predicted_links(config, corpus, completions_by_q, prompts_by_q, failures):
    """Parse, merge, validate and FK-close each question's link completions."""
    links: dict[int, SchemaLink] = {}
    records = []
    for ex in corpus.examples:
        qid = ex.question_id
        if qid in failures:
            continue
        comps: list[Completion] = completions_by_q.get(qid, [])
        bad = [c for c in comps if c.failed]
        if bad:
            failures[qid] = f"link stage: {bad[0].error}"
            continue
        schema = corpus.store[ex.db_id]
        parsed = [
            parse_link_response(c.raw_text, p.included_tables)
            for c, p in zip(comps, prompts_by_q[qid])
        ]
        merged = merge_links(p.link for p in parsed)
        validation = validate_link(merged, schema, repair_unique_home=config.repair_links)
        final = close_foreign_keys(validation.accepted, schema)
        links[qid] = final
        records.append(
            {
                "question_id": qid,
                "db_id": ex.db_id,
                "chunks": [
                    {
                        "chunk_index": p.chunk_index,
                        "link": serialize_link(pl.link),
                        "flagged_lines": list(pl.flagged_lines),
                        "outside_chunk": [list(x) for x in pl.outside_chunk],
                    }
                    for p, pl in zip(prompts_by_q[qid], parsed)
                ],
                "merged": serialize_link(merged),
                "validation": validation.to_json(),
                "predicted": link_to_json(final, schema),
            }
        )
    return links, records


def run_pipeline(config: RunConfig, out_dir=None) -> RunSummary:
    """Run both stages for every example and write predictions plus artifacts.

    Configuration problems raise before any backend is called; per-example
    problems (over-budget prompts, backend errors) are recorded and the
    example gets a failed prediction.
    """
    config = config.validate()
    corpus = load_corpus(config)
    link_hash = _template_hash(config, Stage.LINK)
    sql_hash = _template_hash(config, Stage.SQL)
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(out / "config.resolved.yaml")

    variant = config.variant
    needs_gold = variant.link_mode is LinkMode.PERFECT or "oracle_links" in (
        getattr(config.link_backend, "kind", None),
        getattr(config.sql_backend, "kind", None),
    )
    gold, gold_failures = gold_links_for(config, corpus) if needs_gold else ({}, [])
    schemas_by_q = {ex.question_id: corpus.store[ex.db_id] for ex in corpus.examples}
    failures: dict[int, str] = {}
    links: dict[int, SchemaLink] = {}

    if variant.uses_link_stage:
        prompts_by_q: dict[int, list[RenderedPrompt]] = {}
        for ex in corpus.examples:
            try:
                prompts_by_q[ex.question_id] = _link_prompts(config, ex, schemas_by_q[ex.question_id])
            except BudgetError as exc:
                failures[ex.question_id] = f"link prompt: {exc}"
        flat = [p for ex in corpus.examples for p in prompts_by_q.get(ex.question_id, [])]
        backend = make_backend(config.link_backend, gold_links=gold, examples=corpus.examples, schemas=schemas_by_q)
        completions = run_stage(flat, backend, config.parallelism)
        write_jsonl(out / "prompts.link.jsonl", (p.to_json() for p in flat))
        write_jsonl(out / "completions.link.jsonl", (c.to_json() for c in completions))
        completions_by_q: dict[int, list[Completion]] = {}
        for c in completions:
            completions_by_q.setdefault(c.question_id, []).append(c)
        links, link_records = _predicted_links(config, corpus, completions_by_q, prompts_by_q, failures)
        write_jsonl(out / "links.jsonl", link_records)
        if gold:
            write_json(out / "link_metrics.json", link_metrics(links, gold).to_json())
    elif variant.link_mode is LinkMode.PERFECT:
        for ex in corpus.examples:
            if ex.question_id in gold:
                links[ex.question_id] = gold[ex.question_id]
            else:
                failures[ex.question_id] = "no gold link (extraction failed)"

    sql_prompts = []
    for ex in corpus.examples:
        qid = ex.question_id
        if qid in failures:
            continue
        link = None if variant.sql_mode is SqlMode.DIRECT else links[qid]
        try:
            sql_prompts.append(
                build_sql_prompt(
                    variant, schemas_by_q[qid], link, ex.question, ex.evidence,
                    config.budget(Stage.SQL), config.template(Stage.SQL), qid,
                )
            )
        except BudgetError as exc:
            failures[qid] = f"sql prompt: {exc}"
    backend = make_backend(config.sql_backend, gold_links=gold, examples=corpus.examples, schemas=schemas_by_q)
    sql_completions = run_stage(sql_prompts, backend, config.parallelism)
    write_jsonl(out / "prompts.sql.jsonl", (p.to_json() for p in sql_prompts))
    write_jsonl(out / "completions.sql.jsonl", (c.to_json() for c in sql_completions))

    cleaner = clean_sql if config.clean_sql else raw_sql
    by_q = {c.question_id: c for c in sql_completions}
    predictions = []
    for ex in sorted(corpus.examples, key=lambda e: e.question_id):
        qid = ex.question_id
        rec = {"question_id": qid, "db_id": ex.db_id}
        comp = by_q.get(qid)
        if comp is not None and comp.failed:
            failures[qid] = f"sql stage: {comp.error}"
        if qid in failures or comp is None:
            rec.update(sql="", extraction=Extraction.FAILED.value, error=failures.get(qid, "no completion"))
        else:
            cleaned = cleaner(comp.raw_text, qid)
            rec.update(sql=cleaned.sql, extraction=cleaned.extraction.value)
        if qid in links:
            rec["link"] = serialize_link(links[qid], schemas_by_q[qid])
        predictions.append(rec)
    pred_path = out / "predictions.jsonl"
    write_jsonl(pred_path, predictions)
    write_jsonl(out / "failures.jsonl", ({"question_id": q, "reason": r} for q, r in sorted(failures.items())))

    write_json(
        out / "manifest.json",
        {
            "package_version": __version__,
            "variant": str(variant),
            "label": variant.label,
            "model_name": config.model_name,
            "examples": len(corpus.examples),
            "failures": len(failures),
            "gold_link_failures": len(gold_failures),
            "budgets": {"link": config.effective_link_budget if variant.uses_link_stage else None, "sql": config.sql_budget},
            "template_hashes": {"link": link_hash, "sql": sql_hash},
            "backends": {
                "link": config.link_backend.kind if variant.uses_link_stage else None,
                "sql": config.sql_backend.kind,
            },
            "seed": config.seed,
            "config_sha256": hashlib.sha256((out / "config.resolved.yaml").read_bytes()).hexdigest(),
        },
    )
    logger.info("run finished: %d examples, %d failed, predictions in %s", len(corpus.examples), len(failures), pred_path)
    return RunSummary(out, pred_path, len(corpus.examples), failures)


# -- eval -------------------------------------------------------------------------------


def evaluate_run(config: RunConfig, predictions_path, out_dir=None) -> EvalReport:
    corpus = load_corpus(config)
    predictions = load_predictions(predictions_path)
    report = evaluate(corpus.examples, predictions, corpus.store, config.timeout, config.parallelism)
    out = Path(out_dir or Path(predictions_path).parent)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report.to_json())
    (out / "report.txt").write_text(report.render_text(config.model_name) + "\n", encoding="utf-8")
    (out / "report.tex").write_text(report.render_latex(config.model_name) + "\n", encoding="utf-8")
    write_jsonl(out / "timings.jsonl", ({"question_id": o.question_id, "wall_time": round(o.wall_time, 6)} for o in report.outcomes))
    return report


# -- export-sft -------------------------------------------------------------------------


def export_sft_data(config: RunConfig, out_dir=None) -> dict:
    """Seeded train/validation split of the corpus, exported as SFT JSON Lines."""
    config.variant.validate()
    corpus = load_corpus(config)
    stage = Stage(config.sft.stage)
    gold, failures = gold_links_for(config, corpus)
    predicted = load_links(config.sft.predicted_links) if config.sft.predicted_links else None
    if (
        stage is Stage.SQL
        and config.variant.sql_mode in (SqlMode.NON_TRUSTING, SqlMode.NON_TRUSTING_LINK_ONLY)
        and predicted is None
    ):
        raise ConfigurationError("non-trusting SQL export needs sft.predicted_links")
    train, valid = split_examples(
        corpus.examples, config.sft.validation_fraction, config.seed, config.sft.validation_size
    )
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    budget = config.budget(stage)
    template = config.template(stage)
    summary = {"variant": str(config.variant), "stage": stage.value, "seed": config.seed, "gold_link_failures": len(failures)}
    for name, part in (("train", train), ("valid", valid)):
        report = export_sft(
            part, gold, config.variant, stage, out / f"sft_{stage.value}_{name}.jsonl", corpus.store,
            predicted_links=predicted, budget=budget, template=template,
        )
        summary[name] = report.to_json()
    write_json(out / "sft_manifest.json", summary)
    return summary
