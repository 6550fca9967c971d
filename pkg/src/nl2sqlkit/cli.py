"""Command-line entry point: ``nl2sqlkit <subcommand> --config run.yaml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, apply_backend_override, load_config
from .errors import ConfigurationError, NL2SQLKitError
from .evalx import EvalReport

logger = logging.getLogger("nl2sqlkit")


def _common(p: argparse.ArgumentParser, *, out=True, limit=True, parallelism=False):
    p.add_argument("--config", required=True, help="run config (YAML)")
    if out:
        p.add_argument("--out", help="output directory (default: output_dir from the config)")
    if limit:
        p.add_argument("--limit", type=int, help="only use the first N examples of the corpus")
    if parallelism:
        p.add_argument("--parallelism", type=int, help="worker threads for inference/evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nl2sqlkit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-links", help="extract gold schema links from the corpus SQL")
    _common(p)

    p = sub.add_parser("chunk", help="dump the chunked link-stage prompts (debugging)")
    _common(p)

    p = sub.add_parser("run", help="run the pipeline and write predictions")
    _common(p, parallelism=True)
    p.add_argument(
        "--backend-override",
        action="append",
        default=[],
        metavar="STAGE=KIND[,k=v...]",
        help="replace a stage backend, e.g. sql=replay_gold_sql (repeatable)",
    )

    p = sub.add_parser("eval", help="score a predictions file by execution accuracy")
    _common(p, parallelism=True)
    p.add_argument("--predictions", required=True, help="predictions.jsonl from a run")

    p = sub.add_parser("export-sft", help="write fine-tuning data (train/valid JSONL)")
    _common(p)

    p = sub.add_parser("report", help="render one or more report.json files as a table")
    p.add_argument("reports", nargs="+", help="report.json files")
    p.add_argument("--name", action="append", default=[], help="row label per report (default: parent directory name)")
    p.add_argument("--format", choices=("text", "latex"), default="text")
    return parser


def _config(args) -> RunConfig:
    config = load_config(args.config)
    changes = {}
    if getattr(args, "limit", None) is not None:
        changes["limit"] = args.limit
    if getattr(args, "parallelism", None) is not None:
        changes["parallelism"] = args.parallelism
    if changes:
        config = replace(config, **changes)
    for spec in getattr(args, "backend_override", []):
        config = apply_backend_override(config, spec)
    return config


def _out(args, config: RunConfig) -> Path:
    return Path(args.out or config.output_dir)


def render_reports(paths, names=(), fmt="text") -> str:
    rows = []
    for i, path in enumerate(paths):
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        name = names[i] if i < len(names) else Path(path).resolve().parent.name
        rows.append((name, EvalReport.from_json(data)))
    if fmt == "latex":
        body = [r.render_latex(n).splitlines()[-1] for n, r in rows]
        return "\n".join(["Model & Simple & Moderate & Challenging & Total \\\\", "\\hline", *body])
    tables = [r.render_text(n).splitlines() for n, r in rows]
    header, rule = tables[0][:2]
    lines = [header, rule] + [t[2] for t in tables]
    return "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            print(render_reports(args.reports, args.name, args.format))
            return 0

        from . import pipeline

        config = _config(args)
        if args.command == "extract-links":
            path, n, failed = pipeline.extract_links_to(config, _out(args, config))
            print(f"{n} gold links written to {path}; {failed} failures")
        elif args.command == "chunk":
            path, n = pipeline.dump_chunks(config, _out(args, config))
            print(f"{n} chunk records written to {path}")
        elif args.command == "run":
            summary = pipeline.run_pipeline(config, args.out)
            print(f"{summary.examples} examples, {len(summary.failures)} failed; predictions: {summary.predictions_path}")
        elif args.command == "eval":
            report = pipeline.evaluate_run(config, args.predictions, args.out)
            print(report.render_text(config.model_name))
        elif args.command == "export-sft":
            summary = pipeline.export_sft_data(config, args.out)
            print(
                f"train: {summary['train']['emitted']} records from {summary['train']['examples']} examples; "
                f"valid: {summary['valid']['emitted']} records from {summary['valid']['examples']} examples"
            )
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NL2SQLKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
