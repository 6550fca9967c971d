"""Run configuration: one YAML file describes one experiment."""

from __future__ import annotations

import copy
import os
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .chunker import DEFAULT_CHUNK_BUDGET, DEFAULT_ND_BUDGET, TokenBudget
from .corpus import DescriptionColumns
from .errors import ConfigurationError
from .infer import BACKEND_KINDS, BackendConfig
from .prompts import LinkMode, PipelineVariant, SqlMode, Stage
from .templates import PromptTemplate

_ENV = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate_env(value, environ=None):
    """Expand ``${VAR}`` and ``${VAR:-default}`` in every string of a loaded YAML tree."""
    environ = os.environ if environ is None else environ
    if isinstance(value, dict):
        return {k: interpolate_env(v, environ) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v, environ) for v in value]
    if not isinstance(value, str):
        return value

    def sub(m):
        name, default = m.group(1), m.group(2)
        if name in environ:
            return environ[name]
        if default is not None:
            return default
        raise ConfigurationError(f"environment variable {name} is not set")

    return _ENV.sub(sub, value)


@dataclass(frozen=True)
class SftSettings:
    stage: str = "link"
    validation_fraction: float = 0.15
    validation_size: int | None = None
    predicted_links: str | None = None


@dataclass(frozen=True)
class RunConfig:
    examples: str
    databases: str
    output_dir: str
    variant: PipelineVariant = PipelineVariant()
    link_budget: int | None = None
    sql_budget: int = DEFAULT_ND_BUDGET
    tokenizer: str = "heuristic"
    tokenizer_command: tuple[str, ...] | None = None
    link_backend: BackendConfig | None = None
    sql_backend: BackendConfig | None = None
    link_template: str | None = None
    sql_template: str | None = None
    gold_links: str | None = None
    description_columns: DescriptionColumns = DescriptionColumns()
    with_descriptions: bool = True
    clean_sql: bool = True
    repair_links: bool = True
    parallelism: int = 1
    timeout: float = 30.0
    seed: int = 0
    limit: int | None = None
    model_name: str = "model"
    sft: SftSettings = SftSettings()
    source: str | None = field(default=None, compare=False)

    # -- derived settings ---------------------------------------------------

    @property
    def effective_link_budget(self) -> int:
        if self.link_budget is not None:
            return self.link_budget
        return DEFAULT_CHUNK_BUDGET if self.variant.link_mode is LinkMode.CHUNKED else DEFAULT_ND_BUDGET

    def budget(self, stage: Stage) -> TokenBudget:
        max_tokens = self.effective_link_budget if stage is Stage.LINK else self.sql_budget
        kind = "external" if self.tokenizer_command else "heuristic"
        return TokenBudget(max_tokens, kind, self.tokenizer_command)

    def template(self, stage: Stage) -> PromptTemplate | None:
        path = self.link_template if stage is Stage.LINK else self.sql_template
        return PromptTemplate.from_file(path) if path else None

    # -- validation -----------------------------------------------------------

    def validate(self, need_backends: bool = True) -> "RunConfig":
        """Check everything that can be checked before any inference starts."""
        self.variant.validate()
        problems = []
        for label, path in (("examples", self.examples), ("databases", self.databases)):
            if not Path(path).exists():
                problems.append(f"{label} path does not exist: {path}")
        for label, path in (
            ("link_template", self.link_template),
            ("sql_template", self.sql_template),
            ("gold_links", self.gold_links),
        ):
            if path and not Path(path).is_file():
                problems.append(f"{label} file does not exist: {path}")
        for stage, backend in (("link", self.link_backend), ("sql", self.sql_backend)):
            if backend is not None and backend.fixture_path and not Path(backend.fixture_path).is_file():
                problems.append(f"{stage} fixture file does not exist: {backend.fixture_path}")
        if need_backends:
            if self.variant.uses_link_stage:
                if self.link_backend is None:
                    problems.append(f"variant {self.variant} needs backends.link")
                elif self.link_backend.kind == "replay_gold_sql":
                    problems.append("replay_gold_sql cannot answer link prompts")
            elif self.link_backend is not None and self.link_backend.kind == "http":
                problems.append(f"variant {self.variant} has no link stage; an http link backend would never be used")
            if self.sql_backend is None:
                problems.append("backends.sql is required")
            elif self.sql_backend.kind == "oracle_links":
                problems.append("oracle_links cannot answer SQL prompts")
        if self.parallelism < 1:
            problems.append("parallelism must be >= 1")
        if self.timeout <= 0:
            problems.append("timeout must be positive")
        if self.limit is not None and self.limit < 0:
            problems.append("limit must be >= 0")
        if self.tokenizer not in ("heuristic", "external") or (self.tokenizer == "external" and not self.tokenizer_command):
            problems.append("tokenizer must be 'heuristic' or 'external' with a command")
        if problems:
            raise ConfigurationError("invalid run config:\n  " + "\n  ".join(problems))
        return self

    # -- (de)serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        def backend(b: BackendConfig | None):
            if b is None:
                return None
            d = asdict(b)
            d["stop"] = list(b.stop)
            return d

        return {
            "corpus": {
                "examples": self.examples,
                "databases": self.databases,
                "gold_links": self.gold_links,
                "with_descriptions": self.with_descriptions,
                "description_columns": asdict(self.description_columns),
            },
            "variant": {"link_mode": self.variant.link_mode.value, "sql_mode": self.variant.sql_mode.value},
            "budgets": {"link": self.effective_link_budget, "sql": self.sql_budget},
            "tokenizer": {"kind": self.tokenizer, "command": list(self.tokenizer_command) if self.tokenizer_command else None},
            "backends": {"link": backend(self.link_backend), "sql": backend(self.sql_backend)},
            "templates": {"link": self.link_template, "sql": self.sql_template},
            "postprocess": {"clean_sql": self.clean_sql, "repair_links": self.repair_links},
            "sft": asdict(self.sft),
            "parallelism": self.parallelism,
            "timeout": self.timeout,
            "seed": self.seed,
            "limit": self.limit,
            "model_name": self.model_name,
            "output_dir": self.output_dir,
        }

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")


def _backend_from(data, base: Path) -> BackendConfig | None:
    if data is None:
        return None
    if isinstance(data, str):
        data = {"kind": data}
    data = dict(data)
    if data.get("fixture_path"):
        data["fixture_path"] = str(_path(data["fixture_path"], base))
    if "stop" in data:
        data["stop"] = tuple(data["stop"] or ())
    try:
        return BackendConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad backend settings: {exc}") from exc


def _path(value, base: Path) -> str | None:
    if value in (None, ""):
        return None
    p = Path(os.path.expanduser(str(value)))
    return str(p if p.is_absolute() else (base / p).resolve())


def config_from_dict(data: dict, base_dir=".", source: str | None = None) -> RunConfig:
    """Build a RunConfig from a parsed (already interpolated) mapping; relative paths resolve against ``base_dir``."""
    base = Path(base_dir).resolve()
    data = copy.deepcopy(data or {})
    known = {
        "corpus", "variant", "budgets", "tokenizer", "backends", "templates", "postprocess",
        "sft", "parallelism", "timeout", "seed", "limit", "model_name", "output_dir",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    corpus = data.get("corpus") or {}
    if "examples" not in corpus or "databases" not in corpus:
        raise ConfigurationError("corpus.examples and corpus.databases are required")
    variant_data = data.get("variant") or {}
    try:
        variant = PipelineVariant(
            LinkMode(variant_data.get("link_mode", LinkMode.CHUNKED.value)),
            SqlMode(variant_data.get("sql_mode", SqlMode.NON_TRUSTING.value)),
        )
    except ValueError as exc:
        raise ConfigurationError(f"bad variant: {exc}") from exc
    budgets = data.get("budgets") or {}
    tok = data.get("tokenizer") or {}
    if isinstance(tok, str):
        tok = {"kind": tok}
    backends = data.get("backends") or {}
    templates = data.get("templates") or {}
    post = data.get("postprocess") or {}
    desc = corpus.get("description_columns") or {}
    try:
        return RunConfig(
            examples=_path(corpus["examples"], base),
            databases=_path(corpus["databases"], base),
            output_dir=_path(data.get("output_dir", "runs/latest"), base),
            variant=variant,
            link_budget=budgets.get("link"),
            sql_budget=int(budgets.get("sql", DEFAULT_ND_BUDGET)),
            tokenizer=tok.get("kind", "heuristic"),
            tokenizer_command=tuple(tok["command"]) if tok.get("command") else None,
            link_backend=_backend_from(backends.get("link"), base),
            sql_backend=_backend_from(backends.get("sql"), base),
            link_template=_path(templates.get("link"), base),
            sql_template=_path(templates.get("sql"), base),
            gold_links=_path(corpus.get("gold_links"), base),
            description_columns=DescriptionColumns(**desc),
            with_descriptions=bool(corpus.get("with_descriptions", True)),
            clean_sql=bool(post.get("clean_sql", True)),
            repair_links=bool(post.get("repair_links", True)),
            parallelism=int(data.get("parallelism", 1)),
            timeout=float(data.get("timeout", 30.0)),
            seed=int(data.get("seed", 0)),
            limit=data.get("limit"),
            model_name=str(data.get("model_name", variant.label)),
            sft=SftSettings(**{**(data.get("sft") or {}), "predicted_links": _path((data.get("sft") or {}).get("predicted_links"), base)}),
            source=source,
        )
    except TypeError as exc:
        raise ConfigurationError(f"bad config value: {exc}") from exc


def load_config(path, environ=None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return config_from_dict(interpolate_env(raw or {}, environ), base_dir=path.parent, source=str(path))


def apply_backend_override(config: RunConfig, spec: str) -> RunConfig:
    """``STAGE=KIND[,key=value...]``, e.g. ``sql=replay_gold_sql`` or ``link=fixture,fixture_path=f.jsonl``."""
    stage, sep, rest = spec.partition("=")
    if not sep or stage not in ("link", "sql") or not rest:
        raise ConfigurationError(f"bad --backend-override {spec!r}; expected STAGE=KIND[,key=value...]")
    kind, *pairs = rest.split(",")
    if kind not in BACKEND_KINDS:
        raise ConfigurationError(f"unknown backend kind {kind!r}")
    settings: dict = {"kind": kind}
    for pair in pairs:
        key, eq, value = pair.partition("=")
        if not eq:
            raise ConfigurationError(f"bad override setting {pair!r}")
        settings[key] = yaml.safe_load(value)
    backend = _backend_from(settings, Path.cwd())
    return replace(config, **{f"{stage}_backend": backend})
