"""Execution-accuracy evaluation against live SQLite databases."""

from __future__ import annotations

import logging
import re
import sqlite3
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import DIFFICULTIES, Example, connect_readonly
from .errors import CorpusError, ExecutionError, QueryTimeout, RunError
from .linkex.link import SchemaLink
from .postproc import CleanedSql

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
_PROGRESS_STEPS = 1000

_ALLOWED_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}
_LEADING_NOISE = re.compile(r"(?:\s+|--[^\n]*(?:\n|$)|/\*.*?\*/|\()*", re.DOTALL)


def _is_select(sql: str) -> bool:
    rest = sql[_LEADING_NOISE.match(sql).end():]
    return re.match(r"(SELECT|WITH)\b", rest, re.IGNORECASE) is not None


def _authorizer(action, *_):
    return sqlite3.SQLITE_OK if action in _ALLOWED_ACTIONS else sqlite3.SQLITE_DENY


def normalize_value(value):
    """Integral floats become ints so REAL/INTEGER affinity differences do not matter."""
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def execute_query(db_file, sql: str, timeout: float = DEFAULT_TIMEOUT) -> list[tuple]:
    """Run one SELECT read-only and return its rows with normalized scalars.

    Raises QueryTimeout once ``timeout`` seconds have passed and
    ExecutionError for anything else (including non-SELECT input).
    """
    if not sql or not _is_select(sql):
        raise ExecutionError("only SELECT statements are executed")
    try:
        conn = connect_readonly(db_file)
    except CorpusError as exc:
        raise ExecutionError(str(exc)) from exc
    deadline = time.monotonic() + timeout
    timed_out = False

    def progress():
        nonlocal timed_out
        if time.monotonic() > deadline:
            timed_out = True
            return 1
        return 0

    try:
        conn.set_authorizer(_authorizer)
        conn.set_progress_handler(progress, _PROGRESS_STEPS)
        rows = conn.execute(sql).fetchall()
    except (sqlite3.Error, sqlite3.Warning) as exc:
        if timed_out:
            raise QueryTimeout(f"query exceeded {timeout:g}s") from exc
        raise ExecutionError(f"{type(exc).__name__}: {exc}") from exc
    finally:
        conn.close()
    return [tuple(normalize_value(v) for v in row) for row in rows]


def compare_results(pred_rows: Iterable[tuple], gold_rows: Iterable[tuple]) -> bool:
    """Set equality of result rows: order and duplicates ignored, column order kept."""
    return set(pred_rows) == set(gold_rows)


class Status(str, Enum):
    CORRECT = "correct"
    INCORRECT = "incorrect"
    PRED_ERROR = "pred_error"
    GOLD_ERROR = "gold_error"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class ExecutionOutcome:
    question_id: int
    db_id: str
    difficulty: str
    status: Status
    pred_rows: int | None = None
    gold_rows: int | None = None
    wall_time: float = 0.0
    detail: str | None = None

    def to_json(self, include_timing: bool = False) -> dict:
        rec = {
            "question_id": self.question_id,
            "db_id": self.db_id,
            "difficulty": self.difficulty,
            "status": self.status.value,
            "pred_rows": self.pred_rows,
            "gold_rows": self.gold_rows,
            "detail": self.detail,
        }
        if include_timing:
            rec["wall_time"] = round(self.wall_time, 6)
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "ExecutionOutcome":
        return cls(
            question_id=rec["question_id"],
            db_id=rec["db_id"],
            difficulty=rec["difficulty"],
            status=Status(rec["status"]),
            pred_rows=rec.get("pred_rows"),
            gold_rows=rec.get("gold_rows"),
            wall_time=rec.get("wall_time", 0.0),
            detail=rec.get("detail"),
        )


@dataclass(frozen=True)
class StratumScore:
    correct: int
    count: int
    gold_errors: int

    @property
    def accuracy(self) -> float | None:
        return 100.0 * self.correct / self.count if self.count else None


@dataclass(frozen=True)
class EvalReport:
    outcomes: tuple[ExecutionOutcome, ...]
    by_difficulty: dict
    total: StratumScore

    @classmethod
    def fold(cls, outcomes: Iterable[ExecutionOutcome]) -> "EvalReport":
        outcomes = tuple(sorted(outcomes, key=lambda o: o.question_id))
        by = {}
        for d in DIFFICULTIES:
            rows = [o for o in outcomes if o.difficulty == d]
            by[d] = StratumScore(
                correct=sum(o.status is Status.CORRECT for o in rows),
                count=sum(o.status is not Status.GOLD_ERROR for o in rows),
                gold_errors=sum(o.status is Status.GOLD_ERROR for o in rows),
            )
        total = StratumScore(
            correct=sum(s.correct for s in by.values()),
            count=sum(s.count for s in by.values()),
            gold_errors=sum(s.gold_errors for s in by.values()),
        )
        return cls(outcomes, by, total)

    @property
    def set_semantics_flags(self) -> list[int]:
        return [o.question_id for o in self.outcomes if o.detail == "row-count-differs"]

    def to_json(self, include_timing: bool = False) -> dict:
        def score(s: StratumScore) -> dict:
            acc = s.accuracy
            return {
                "accuracy": None if acc is None else round(acc, 4),
                "correct": s.correct,
                "count": s.count,
                "gold_errors": s.gold_errors,
            }

        return {
            "by_difficulty": {d: score(s) for d, s in self.by_difficulty.items()},
            "total": score(self.total),
            "outcomes": [o.to_json(include_timing) for o in self.outcomes],
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        """Rebuild a report by re-folding its outcome records."""
        return cls.fold(ExecutionOutcome.from_json(r) for r in data["outcomes"])

    def _cells(self) -> list[str]:
        scores = [self.by_difficulty[d] for d in DIFFICULTIES] + [self.total]
        return ["-" if s.accuracy is None else f"{s.accuracy:.2f}" for s in scores]

    def render_text(self, model: str = "model") -> str:
        header = ["Model", "Simple", "Moderate", "Challenging", "Total"]
        counts = [str(self.by_difficulty[d].count) for d in DIFFICULTIES] + [str(self.total.count)]
        rows = [header, [model] + self._cells(), ["count"] + counts]
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        if self.total.gold_errors:
            lines.append(f"excluded (gold SQL failed): {self.total.gold_errors}")
        flagged = self.set_semantics_flags
        if flagged:
            lines.append(f"matched as sets but row counts differ: {len(flagged)}")
        return "\n".join(lines)

    def render_latex(self, model: str = "model") -> str:
        return "\n".join(
            [
                "Model & Simple & Moderate & Challenging & Total \\\\",
                "\\hline",
                " & ".join([model] + self._cells()) + " \\\\",
            ]
        )


def _db_file(db_store, db_id: str) -> Path:
    if isinstance(db_store, Mapping):
        return Path(db_store[db_id])
    return Path(db_store.db_path(db_id))


def _db_available(db_store, db_id: str) -> bool:
    if isinstance(db_store, Mapping) and db_id not in db_store:
        return False
    return _db_file(db_store, db_id).is_file()


def _score_one(example: Example, prediction: CleanedSql | None, db_file: Path, timeout: float) -> ExecutionOutcome:
    start = time.perf_counter()

    def outcome(status, pred_rows=None, gold_rows=None, detail=None):
        return ExecutionOutcome(
            example.question_id,
            example.db_id,
            example.difficulty.value,
            status,
            pred_rows,
            gold_rows,
            time.perf_counter() - start,
            detail,
        )

    try:
        gold = execute_query(db_file, example.gold_sql, timeout)
    except ExecutionError as exc:
        logger.warning("question %s: gold SQL failed: %s", example.question_id, exc)
        return outcome(Status.GOLD_ERROR, detail=str(exc))
    if prediction is None:
        return outcome(Status.INCORRECT, gold_rows=len(gold), detail="no prediction")
    if prediction.failed:
        return outcome(Status.INCORRECT, gold_rows=len(gold), detail="extraction failed")
    try:
        pred = execute_query(db_file, prediction.sql, timeout)
    except QueryTimeout as exc:
        return outcome(Status.TIMEOUT, gold_rows=len(gold), detail=str(exc))
    except ExecutionError as exc:
        return outcome(Status.PRED_ERROR, gold_rows=len(gold), detail=str(exc))
    if compare_results(pred, gold):
        detail = "row-count-differs" if len(pred) != len(gold) else None
        return outcome(Status.CORRECT, len(pred), len(gold), detail)
    return outcome(Status.INCORRECT, len(pred), len(gold))


def evaluate(
    examples: Sequence[Example],
    predictions: Mapping[int, CleanedSql] | Iterable[CleanedSql],
    db_store,
    timeout: float = DEFAULT_TIMEOUT,
    parallelism: int = 1,
) -> EvalReport:
    """Score predictions by execution; ``db_store`` is a SchemaStore or a db_id -> path mapping."""
    if not isinstance(predictions, Mapping):
        predictions = {p.question_id: p for p in predictions}
    missing = sorted({ex.db_id for ex in examples if not _db_available(db_store, ex.db_id)})
    if missing:
        raise RunError(f"missing database files for: {', '.join(missing)}")

    def job(ex: Example) -> ExecutionOutcome:
        return _score_one(ex, predictions.get(ex.question_id), _db_file(db_store, ex.db_id), timeout)

    if parallelism <= 1:
        outcomes = [job(ex) for ex in examples]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(job, examples))
    return EvalReport.fold(outcomes)


# -- link diagnostics -----------------------------------------------------------


@dataclass(frozen=True)
class LinkScore:
    question_id: int
    tp: int
    fp: int
    fn: int
    table_recall: float

    @property
    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 1.0 if self.fn == 0 else 0.0
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        return 1.0 if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass(frozen=True)
class LinkMetrics:
    per_example: tuple[LinkScore, ...]

    @property
    def micro(self) -> dict:
        tp = sum(s.tp for s in self.per_example)
        fp = sum(s.fp for s in self.per_example)
        fn = sum(s.fn for s in self.per_example)
        p = tp / (tp + fp) if tp + fp else 1.0
        r = tp / (tp + fn) if tp + fn else 1.0
        return {"precision": p, "recall": r, "f1": _f1(p, r)}

    @property
    def macro(self) -> dict:
        n = len(self.per_example)
        if not n:
            return {"precision": 0.0, "recall": 0.0, "f1": 0.0, "table_recall": 0.0}
        return {
            "precision": sum(s.precision for s in self.per_example) / n,
            "recall": sum(s.recall for s in self.per_example) / n,
            "f1": sum(s.f1 for s in self.per_example) / n,
            "table_recall": sum(s.table_recall for s in self.per_example) / n,
        }

    def to_json(self) -> dict:
        return {
            "micro": self.micro,
            "macro": self.macro,
            "per_example": [
                {
                    "question_id": s.question_id,
                    "precision": s.precision,
                    "recall": s.recall,
                    "f1": s.f1,
                    "table_recall": s.table_recall,
                    "tp": s.tp,
                    "fp": s.fp,
                    "fn": s.fn,
                }
                for s in self.per_example
            ],
        }


def link_metrics(pred_links: Mapping[int, SchemaLink], gold_links: Mapping[int, SchemaLink]) -> LinkMetrics:
    """Column-pair P/R/F1 and table recall per gold question; a missing prediction counts as empty."""
    scores = []
    for qid in sorted(gold_links):
        gold = gold_links[qid].key()
        pred_link = pred_links.get(qid)
        pred = pred_link.key() if pred_link is not None else None
        gold_cols = gold[0]
        pred_cols = pred[0] if pred else frozenset()
        gold_tables = gold_links[qid].table_keys()
        pred_tables = pred_link.table_keys() if pred_link is not None else frozenset()
        table_recall = len(gold_tables & pred_tables) / len(gold_tables) if gold_tables else 1.0
        scores.append(
            LinkScore(
                qid,
                tp=len(gold_cols & pred_cols),
                fp=len(pred_cols - gold_cols),
                fn=len(gold_cols - pred_cols),
                table_recall=table_recall,
            )
        )
    return LinkMetrics(tuple(scores))
