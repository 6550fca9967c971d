"""Model backends: an OpenAI-compatible completions endpoint, recorded fixtures, and offline oracles."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import requests

from .corpus import DatabaseSchema, Example
from .errors import BackendError, ConfigurationError, FixtureMiss
from .linkex.link import SchemaLink, serialize_link
from .prompts import RenderedPrompt, Stage, restrict_to_pieces

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("http", "fixture", "oracle_links", "replay_gold_sql")


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    endpoint_url: str | None = None
    model_name: str | None = None
    max_new_tokens: int = 512
    temperature: float = 0.0
    request_timeout: float = 120.0
    max_retries: int = 3
    backoff: float = 1.0
    api_key_env: str = "OPENAI_API_KEY"
    stop: tuple[str, ...] = ()
    fixture_path: str | None = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigurationError(f"unknown backend kind {self.kind!r} (expected one of {', '.join(BACKEND_KINDS)})")
        if self.kind == "http" and not self.endpoint_url:
            raise ConfigurationError("http backend requires endpoint_url")
        if self.kind == "fixture" and not self.fixture_path:
            raise ConfigurationError("fixture backend requires fixture_path")
        if self.temperature < 0:
            raise ConfigurationError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be >= 0")
        if not isinstance(self.stop, tuple):
            object.__setattr__(self, "stop", tuple(self.stop))


@dataclass(frozen=True)
class Completion:
    question_id: int | None
    stage: str
    chunk_index: int | None
    raw_text: str
    latency: float
    backend_kind: str
    prompt_sha256: str
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "stage": self.stage,
            "chunk_index": self.chunk_index,
            "raw_text": self.raw_text,
            "latency": round(self.latency, 6),
            "backend_kind": self.backend_kind,
            "prompt_sha256": self.prompt_sha256,
            "error": self.error,
        }


def prompt_hash(prompt: RenderedPrompt) -> str:
    return hashlib.sha256(prompt.text.encode("utf-8")).hexdigest()


class Backend:
    kind = ""

    def generate(self, prompt: RenderedPrompt) -> str:
        raise NotImplementedError


class HttpBackend(Backend):
    """Client for ``POST {endpoint}`` in the OpenAI completions wire format."""

    kind = "http"
    _transient_status = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(self, config: BackendConfig, session: requests.Session | None = None):
        self.config = config
        self.session = session or requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def generate(self, prompt: RenderedPrompt) -> str:
        cfg = self.config
        payload = {
            "model": cfg.model_name,
            "prompt": prompt.text,
            "max_tokens": cfg.max_new_tokens,
            "temperature": cfg.temperature,
        }
        if cfg.stop:
            payload["stop"] = list(cfg.stop)
        last_error = "no attempt made"
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(cfg.endpoint_url, json=payload, headers=self._headers(), timeout=cfg.request_timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("question %s: attempt %d failed: %s", prompt.question_id, attempt + 1, last_error)
                continue
            if resp.status_code in self._transient_status:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("question %s: attempt %d got %s", prompt.question_id, attempt + 1, last_error)
                continue
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", prompt.question_id)
            try:
                return resp.json()["choices"][0]["text"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed completion response: {exc}", prompt.question_id) from exc
        raise BackendError(f"gave up after {cfg.max_retries + 1} attempts: {last_error}", prompt.question_id)


class FixtureBackend(Backend):
    """Replays recorded completions keyed by (question_id, stage, chunk_index)."""

    kind = "fixture"

    def __init__(self, path):
        self.path = Path(path)
        self.records: dict[tuple, str] = {}
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = (rec["question_id"], rec["stage"], rec.get("chunk_index"))
                    self.records[key] = rec["raw_text"]
                except (ValueError, KeyError) as exc:
                    raise ConfigurationError(f"{self.path}:{lineno}: bad fixture record: {exc}") from exc

    def generate(self, prompt: RenderedPrompt) -> str:
        key = (prompt.question_id, prompt.stage.value, prompt.chunk_index)
        if key not in self.records:
            raise FixtureMiss(f"no fixture for question {key[0]} stage {key[1]} chunk {key[2]}", prompt.question_id)
        return self.records[key]


class OracleLinkBackend(Backend):
    """Answers link prompts with the gold link restricted to what the prompt shows."""

    kind = "oracle_links"

    def __init__(self, gold_links: Mapping[int, SchemaLink], schemas: Mapping[int, DatabaseSchema] | None = None):
        self.gold_links = gold_links
        self.schemas = schemas or {}

    def generate(self, prompt: RenderedPrompt) -> str:
        if prompt.stage is not Stage.LINK:
            raise BackendError("oracle_links backend only answers link-stage prompts", prompt.question_id)
        link = self.gold_links.get(prompt.question_id)
        if link is None:
            raise BackendError(f"no gold link for question {prompt.question_id}", prompt.question_id)
        schema = self.schemas.get(prompt.question_id)
        if prompt.chunk_index is not None:
            link = restrict_to_pieces(link, prompt.pieces)
        return serialize_link(link, schema)


class ReplayGoldSqlBackend(Backend):
    kind = "replay_gold_sql"

    def __init__(self, examples: Mapping[int, Example]):
        self.examples = examples

    def generate(self, prompt: RenderedPrompt) -> str:
        if prompt.stage is not Stage.SQL:
            raise BackendError("replay_gold_sql backend only answers SQL-stage prompts", prompt.question_id)
        ex = self.examples.get(prompt.question_id)
        if ex is None:
            raise BackendError(f"unknown question {prompt.question_id}", prompt.question_id)
        return ex.gold_sql


def make_backend(
    config: BackendConfig,
    *,
    gold_links: Mapping[int, SchemaLink] | None = None,
    examples: Sequence[Example] = (),
    schemas: Mapping[int, DatabaseSchema] | None = None,
) -> Backend:
    if config.kind == "http":
        return HttpBackend(config)
    if config.kind == "fixture":
        return FixtureBackend(config.fixture_path)
    if config.kind == "oracle_links":
        if gold_links is None:
            raise ConfigurationError("oracle_links backend needs gold links")
        return OracleLinkBackend(gold_links, schemas)
    return ReplayGoldSqlBackend({ex.question_id: ex for ex in examples})


def complete(prompt: RenderedPrompt, backend: Backend) -> Completion:
    """Run one prompt.  Backend failures come back as a failed Completion, not an exception."""
    start = time.perf_counter()
    error = None
    text = ""
    try:
        text = backend.generate(prompt)
    except BackendError as exc:
        error = f"{type(exc).__name__}: {exc}"
        logger.warning("question %s (%s): %s", prompt.question_id, prompt.stage.value, error)
    return Completion(
        question_id=prompt.question_id,
        stage=prompt.stage.value,
        chunk_index=prompt.chunk_index,
        raw_text=text,
        latency=time.perf_counter() - start,
        backend_kind=backend.kind,
        prompt_sha256=prompt_hash(prompt),
        error=error,
    )


def run_stage(prompts: Sequence[RenderedPrompt], backend: Backend, parallelism: int = 1) -> list[Completion]:
    """Complete every prompt; results are returned in input order."""
    if parallelism < 1:
        raise ConfigurationError("parallelism must be >= 1")
    if not prompts:
        return []
    if parallelism == 1 or len(prompts) == 1:
        return [complete(p, backend) for p in prompts]
    slots: list[Completion | None] = [None] * len(prompts)
    with ThreadPoolExecutor(max_workers=min(parallelism, len(prompts))) as pool:
        futures = {pool.submit(complete, p, backend): i for i, p in enumerate(prompts)}
        for fut, i in futures.items():
            slots[i] = fut.result()
    return slots
