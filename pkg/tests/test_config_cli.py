from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from nl2sqlkit.cli import main, render_reports
from nl2sqlkit.config import apply_backend_override, config_from_dict, interpolate_env, load_config
from nl2sqlkit.errors import ConfigurationError
from nl2sqlkit.prompts import Stage

from conftest import FIXTURES

COMPLETIONS = FIXTURES / "completions_fixture.jsonl"


def _jsonl(path):
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


# -- config ---------------------------------------------------------------------------------


def test_env_interpolation():
    env = {"HOST": "example.org"}
    data = {"a": "http://${HOST}/v1", "b": ["${MISSING:-fallback}", 3], "c": {"d": "${HOST:-x}"}}
    assert interpolate_env(data, env) == {"a": "http://example.org/v1", "b": ["fallback", 3], "c": {"d": "example.org"}}
    with pytest.raises(ConfigurationError):
        interpolate_env("${MISSING}", {})


def test_load_config_defaults_and_relative_paths(tmp_path, corpus_root):
    (tmp_path / "fx.jsonl").write_text("")
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(
        yaml.safe_dump(
            {
                "corpus": {"examples": str(corpus_root / "dev.json"), "databases": "${DBS}"},
                "variant": {"link_mode": "chunked", "sql_mode": "trusting"},
                "backends": {"link": {"kind": "fixture", "fixture_path": "fx.jsonl"}, "sql": "replay_gold_sql"},
                "output_dir": "out",
            }
        )
    )
    cfg = load_config(cfg_path, environ={"DBS": str(corpus_root)})
    assert cfg.databases == str(corpus_root)
    assert cfg.link_backend.fixture_path == str(tmp_path / "fx.jsonl")
    assert cfg.output_dir == str(tmp_path / "out")
    assert cfg.effective_link_budget == 4096 and cfg.sql_budget == 5000
    assert cfg.model_name == "CH_p + SL + T"
    assert cfg.budget(Stage.LINK).max_tokens == 4096
    cfg.validate()


def test_budget_defaults_follow_link_mode(corpus_root):
    base = {"corpus": {"examples": "e", "databases": "d"}}
    nd = config_from_dict({**base, "variant": {"link_mode": "non_descriptive"}})
    assert nd.effective_link_budget == 5000
    custom = config_from_dict({**base, "budgets": {"link": 1000, "sql": 2000}})
    assert (custom.effective_link_budget, custom.sql_budget) == (1000, 2000)


@pytest.mark.parametrize(
    "data, message",
    [
        ({"corpus": {"examples": "e"}}, "required"),
        ({"corpus": {"examples": "e", "databases": "d"}, "colour": "blue"}, "unknown config keys"),
        ({"corpus": {"examples": "e", "databases": "d"}, "variant": {"link_mode": "psychic"}}, "bad variant"),
        ({"corpus": {"examples": "e", "databases": "d"}, "backends": {"sql": {"kind": "http"}}}, "endpoint_url"),
        ({"corpus": {"examples": "e", "databases": "d"}, "backends": {"sql": {"kind": "fixture", "colour": 1}}}, "bad backend"),
    ],
)
def test_bad_configs(data, message):
    with pytest.raises(ConfigurationError, match=message):
        config_from_dict(data)


def _valid_base(corpus_root, **extra):
    return {"corpus": {"examples": str(corpus_root / "dev.json"), "databases": str(corpus_root)}, **extra}


def test_validation_rules(corpus_root):
    perfect_direct = config_from_dict(_valid_base(corpus_root, variant={"link_mode": "perfect", "sql_mode": "direct"},
                                                  backends={"sql": "replay_gold_sql"}))
    with pytest.raises(ConfigurationError, match="direct"):
        perfect_direct.validate()
    http_unused = config_from_dict(_valid_base(
        corpus_root, variant={"link_mode": "perfect", "sql_mode": "trusting"},
        backends={"link": {"kind": "http", "endpoint_url": "http://x"}, "sql": "replay_gold_sql"},
    ))
    with pytest.raises(ConfigurationError, match="never be used"):
        http_unused.validate()
    wrong_roles = config_from_dict(_valid_base(corpus_root, backends={"link": "replay_gold_sql", "sql": "oracle_links"}))
    with pytest.raises(ConfigurationError) as info:
        wrong_roles.validate()
    assert "link prompts" in str(info.value) and "SQL prompts" in str(info.value)
    missing = config_from_dict({"corpus": {"examples": "/nope.json", "databases": "/nope"}, "backends": {"sql": "replay_gold_sql"},
                                "variant": {"link_mode": "perfect", "sql_mode": "trusting"}})
    with pytest.raises(ConfigurationError, match="does not exist"):
        missing.validate()


def test_backend_override(corpus_root):
    cfg = config_from_dict(_valid_base(corpus_root))
    cfg = apply_backend_override(cfg, "sql=replay_gold_sql")
    cfg = apply_backend_override(cfg, f"link=fixture,fixture_path={COMPLETIONS},max_retries=5")
    assert cfg.sql_backend.kind == "replay_gold_sql"
    assert cfg.link_backend.fixture_path == str(COMPLETIONS) and cfg.link_backend.max_retries == 5
    for bad in ("sql", "tool=http", "sql=teleport", "sql=http,endpoint_url"):
        with pytest.raises(ConfigurationError):
            apply_backend_override(cfg, bad)


def test_resolved_config_round_trips(corpus_root, tmp_path):
    cfg = config_from_dict(_valid_base(corpus_root, backends={"link": "oracle_links", "sql": "replay_gold_sql"}, seed=7))
    cfg.dump(tmp_path / "c.yaml")
    again = load_config(tmp_path / "c.yaml")
    # the frozen copy pins the effective link budget
    assert again.link_budget == 4096
    assert again.to_dict() == cfg.to_dict()


# -- commands ------------------------------------------------------------------------------------


def _three_example_corpus(corpus_root, tmp_path, broken=False):
    records = json.loads((corpus_root / "dev.json").read_text())[:3]
    if broken:
        records[1]["SQL"] = "SELECT FROM WHERE"
    path = tmp_path / "three.json"
    path.write_text(json.dumps(records))
    return path


def test_extract_links_command(write_config, corpus_root, tmp_path, capsys):
    cfg = write_config(corpus={"examples": str(_three_example_corpus(corpus_root, tmp_path)), "databases": str(corpus_root)})
    out = tmp_path / "links"
    assert main(["extract-links", "--config", str(cfg), "--out", str(out)]) == 0
    first = (out / "gold_links.jsonl").read_bytes()
    assert len(_jsonl(out / "gold_links.jsonl")) == 3
    assert _jsonl(out / "gold_link_failures.jsonl") == []
    assert main(["extract-links", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "gold_links.jsonl").read_bytes() == first
    assert "3 gold links" in capsys.readouterr().out


def test_extract_links_with_a_broken_query(write_config, corpus_root, tmp_path):
    cfg = write_config(corpus={"examples": str(_three_example_corpus(corpus_root, tmp_path, broken=True)), "databases": str(corpus_root)})
    out = tmp_path / "links"
    assert main(["extract-links", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(_jsonl(out / "gold_links.jsonl")) == 2
    (failure,) = _jsonl(out / "gold_link_failures.jsonl")
    assert failure["question_id"] == 1


def test_chunk_command(write_config, tmp_path):
    cfg = write_config(budgets={"link": 400}, limit=2)
    out = tmp_path / "chunks"
    assert main(["chunk", "--config", str(cfg), "--out", str(out)]) == 0
    rows = _jsonl(out / "chunks.jsonl")
    assert {r["question_id"] for r in rows} == {0, 1}
    assert all(r["token_count"] <= 400 for r in rows)
    assert set(rows[0]) == {"question_id", "index", "total", "included_tables", "token_count", "text"}
    assert max(r["total"] for r in rows) > 1


def test_run_perfect_trusting_is_offline(write_config, tmp_path, monkeypatch):
    import requests

    def no_network(*a, **k):
        raise AssertionError("network used")

    monkeypatch.setattr(requests.Session, "post", no_network)
    cfg = write_config(variant={"link_mode": "perfect", "sql_mode": "trusting"}, backends={"sql": "replay_gold_sql"})
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    preds = _jsonl(out / "predictions.jsonl")
    assert len(preds) == 25 and all(p["extraction"] == "verbatim" for p in preds)
    assert not (out / "prompts.link.jsonl").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["backends"] == {"link": None, "sql": "replay_gold_sql"}
    assert manifest["label"] == "SL_p + T"


def test_run_chunked_walk_through(write_config, tmp_path):
    cfg = write_config(
        variant={"link_mode": "chunked", "sql_mode": "non_trusting"},
        budgets={"link": 500},
        backends={"link": "oracle_links", "sql": "replay_gold_sql"},
        limit=3,
    )
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    prompts = _jsonl(out / "prompts.link.jsonl")
    completions = _jsonl(out / "completions.link.jsonl")
    links = _jsonl(out / "links.jsonl")
    preds = _jsonl(out / "predictions.jsonl")
    assert len(completions) == len(prompts)
    per_q = {}
    for p in prompts:
        per_q.setdefault(p["question_id"], []).append(p)
    assert all(len(ps) == ps[0]["chunk_total"] >= 2 for ps in per_q.values())
    assert [l["question_id"] for l in links] == [0, 1, 2]
    assert all(len(l["chunks"]) == len(per_q[l["question_id"]]) for l in links)
    assert [p["question_id"] for p in preds] == [0, 1, 2]
    assert json.loads((out / "link_metrics.json").read_text())["micro"]["recall"] == 1.0
    assert (out / "config.resolved.yaml").is_file()


def test_run_rejects_perfect_direct_before_inference(write_config, tmp_path, capsys):
    cfg = write_config(variant={"link_mode": "perfect", "sql_mode": "direct"}, backends={"sql": "replay_gold_sql"})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_run_with_fixture_backends_and_failures(write_config, tmp_path):
    cfg = write_config(
        variant={"link_mode": "chunked", "sql_mode": "non_trusting"},
        backends={
            "link": {"kind": "fixture", "fixture_path": str(COMPLETIONS)},
            "sql": {"kind": "fixture", "fixture_path": str(COMPLETIONS)},
        },
    )
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    preds = {p["question_id"]: p for p in _jsonl(out / "predictions.jsonl")}
    assert len(preds) == 25
    assert {p["extraction"] for p in preds.values()} >= {"fenced_block", "first_statement", "verbatim"}
    links = {l["question_id"]: l for l in _jsonl(out / "links.jsonl")}
    assert links[0]["validation"]["repaired"][0]["reason"] == "casing"
    assert any("only in table" in r["reason"] for r in links[9]["validation"]["repaired"])

    assert main(["eval", "--config", str(cfg), "--predictions", str(out / "predictions.jsonl")]) == 0
    report = json.loads((out / "report.json").read_text())
    statuses = {o["question_id"]: o["status"] for o in report["outcomes"]}
    assert statuses[3] == "incorrect"
    assert report["total"]["count"] == 25


def test_eval_is_bit_identical_on_rerun(write_config, tmp_path):
    cfg = write_config(variant={"link_mode": "perfect", "sql_mode": "trusting"}, backends={"sql": "replay_gold_sql"})
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    preds = str(out / "predictions.jsonl")
    assert main(["eval", "--config", str(cfg), "--predictions", preds]) == 0
    first = (out / "report.json").read_bytes()
    assert main(["eval", "--config", str(cfg), "--predictions", preds, "--parallelism", "4"]) == 0
    assert (out / "report.json").read_bytes() == first
    assert json.loads(first)["total"]["accuracy"] == 100.0


def test_report_command(write_config, tmp_path, capsys):
    cfg = write_config(variant={"link_mode": "perfect", "sql_mode": "trusting"}, backends={"sql": "replay_gold_sql"})
    out = tmp_path / "a"
    main(["run", "--config", str(cfg), "--out", str(out), "--limit", "4"])
    main(["eval", "--config", str(cfg), "--predictions", str(out / "predictions.jsonl"), "--limit", "4"])
    capsys.readouterr()
    assert main(["report", str(out / "report.json"), "--name", "SL_p + T"]) == 0
    text = capsys.readouterr().out.splitlines()
    assert text[0].split(" | ")[0].strip() == "Model"
    assert [c.strip() for c in text[0].split("|")] == ["Model", "Simple", "Moderate", "Challenging", "Total"]
    assert text[2].startswith("SL_p + T") and text[2].rstrip().endswith("100.00")
    latex = render_reports([out / "report.json", out / "report.json"], ["x", "y"], "latex").splitlines()
    assert latex[0] == "Model & Simple & Moderate & Challenging & Total \\\\"
    assert len(latex) == 4 and latex[3].startswith("y & ")


def test_export_sft_command(write_config, tmp_path, capsys):
    cfg = write_config(
        variant={"link_mode": "chunked", "sql_mode": "trusting"},
        sft={"stage": "link", "validation_fraction": 0.2},
        seed=5,
    )
    out = tmp_path / "sft"
    assert main(["export-sft", "--config", str(cfg), "--out", str(out)]) == 0
    train, valid = _jsonl(out / "sft_link_train.jsonl"), _jsonl(out / "sft_link_valid.jsonl")
    assert {r["question_id"] for r in train}.isdisjoint(r["question_id"] for r in valid)
    assert len({r["question_id"] for r in valid}) == 5
    manifest = json.loads((out / "sft_manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["valid"]["examples"] == 5
    assert "train:" in capsys.readouterr().out


def test_export_sft_non_trusting_needs_predictions(write_config, tmp_path):
    cfg = write_config(variant={"link_mode": "chunked", "sql_mode": "non_trusting"}, sft={"stage": "sql"})
    assert main(["export-sft", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


def test_missing_database_is_exit_1(write_config, tmp_path, corpus_root):
    records = [{"question_id": 1, "db_id": "atlantis", "question": "q", "SQL": "SELECT 1"}]
    (tmp_path / "a.json").write_text(json.dumps(records))
    cfg = write_config(corpus={"examples": str(tmp_path / "a.json"), "databases": str(corpus_root)})
    assert main(["extract-links", "--config", str(cfg)]) == 1
