import json
import os

import pytest
import requests
import yaml

from medadapt.cli import COMMANDS, run
from medadapt.corpus import PUBMEDQA_OPTIONS, Dataset, McqRecord

from conftest import annotation_script, write_pubmedqa


def snapshot(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            p = os.path.join(dirpath, n)
            with open(p, "rb") as f:
                out[p] = f.read()
    return out


@pytest.fixture
def workspace(tmp_path, golden):
    labels = ["yes"] * 6 + ["no"] * 3 + ["maybe"]
    write_pubmedqa(tmp_path / "pqal.json", labels)
    write_pubmedqa(tmp_path / "pqau.json", [None] * 4, first_id=20000)
    Dataset([McqRecord.from_dict(golden["record"])]).to_jsonl(tmp_path / "golden.jsonl")
    (tmp_path / "golden_mock.json").write_text(json.dumps(golden["script"]))
    (tmp_path / "tokens.jsonl").write_text("".join(json.dumps({"id": f"s{i}", "tokens": list(range(i, i + 30))}) + "\n" for i in range(5)))
    (tmp_path / "kg.tsv").write_text("aspirin\ttreats\theadache\nstatin\tlowers\tcholesterol\n")
    # same records the pqau.json file holds
    u = [McqRecord(str(20000 + i), f"Question number {i}?", ("Some context here.",), PUBMEDQA_OPTIONS, None, "It is.", "PQA-U")
         for i in range(4)]
    (tmp_path / "annot_mock.json").write_text(json.dumps(annotation_script(u, ["yes", "no", "yes", "maybe"]).to_dict()))
    unigram = {"yes": 0.5, "no": 0.3, "maybe": 0.2}
    (tmp_path / "ppl_mock.json").write_text(json.dumps({"unigram": unigram}))
    return tmp_path


def test_no_args_usage(capsys):
    assert run([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_command_is_usage():
    assert run(["frobnicate"]) == 2


def test_help_exits_zero():
    assert run(["--help"]) == 0


def test_stats_prints_proportions(workspace, capsys):
    assert run(["stats", "--in", str(workspace / "pqal.json"), "--subset", "PQA-L"]) == 0
    out = capsys.readouterr().out
    assert "records: 10" in out and "yes 60.0%" in out and "maybe 10.0%" in out


def test_validation_error_exit_3(workspace, capsys):
    bad = workspace / "bad.json"
    bad.write_text("")
    assert run(["stats", "--in", str(bad)]) == 3
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: parse: ") and "\n" not in err


def test_missing_seed_is_usage(workspace):
    assert run(["split", "--in", str(workspace / "pqal.json"), "--out", str(workspace / "s")]) == 2


def test_cpoly_check_default(capsys):
    assert run(["cpoly-check"]) == 0
    out = capsys.readouterr().out
    line = [l for l in out.splitlines() if l.startswith("max gradient error")][0]
    assert float(line.split()[3]) <= 1e-4


def test_emit_recipe(workspace):
    assert run(["emit-recipe", "--stage", "knowledge_injection", "--out", str(workspace / "ki.yaml")]) == 0
    data = yaml.safe_load((workspace / "ki.yaml").read_text())
    assert data["learning_rate"] == 7e-6 and data["batch_size"] == 256


def commands(ws):
    """One invocation per subcommand, all writing under ``ws/out``."""
    o = ws / "out"
    return {
        "ingest": ["ingest", "--in", str(ws / "pqal.json"), "--subset", "PQA-L", "--out", str(o / "pqal.jsonl")],
        "stats": ["stats", "--in", str(ws / "pqal.json"), "--json-out", str(o / "stats.json")],
        "split": ["split", "--in", str(ws / "pqal.json"), "--fractions", "0.5,0.5", "--seed", "3", "--out", str(o / "s")],
        "prep-glm": ["prep-glm", "--in", str(ws / "tokens.jsonl"), "--vocab-size", "100", "--seed", "1", "--out", str(o / "glm.jsonl")],
        "voc-run": ["voc-run", "--in", str(ws / "golden.jsonl"), "--mock", str(ws / "golden_mock.json"), "--out", str(o / "pred.jsonl")],
        "ppl-rank": ["ppl-rank", "--in", str(ws / "pqal.json"), "--mock", str(ws / "ppl_mock.json"), "--out", str(o / "ppl.jsonl")],
        "annotate": ["annotate", "--in", str(ws / "pqau.json"), "--mock", str(ws / "annot_mock.json"), "--concurrency", "2",
                     "--out", str(o / "pseudo.jsonl")],
        "merge": ["merge", "--labeled", str(ws / "pqal.json"), "--pseudo", str(o / "pseudo.jsonl"), "--out", str(o / "merged.jsonl")],
        "score": ["score", "--predictions", str(o / "pred.jsonl"), "--gold", str(ws / "pqal.json"), "--allow-missing",
                  "--summary-out", str(o / "score.json")],
        "report": ["report", "--leaderboard", "--ours", "0.806", "--out", str(o / "report.txt")],
        "cpoly-check": ["cpoly-check", "--seed", "2"],
        "emit-recipe": ["emit-recipe", "--stage", "task_adaptation", "--out", str(o / "ta.yaml")],
    }


def test_every_command_covered(workspace):
    assert set(commands(workspace)) == set(COMMANDS)


def test_all_commands_run_and_are_byte_stable(workspace):
    (workspace / "out").mkdir()
    cmds = commands(workspace)
    for name, argv in cmds.items():
        assert run(argv) == 0, name
    first = snapshot(workspace / "out")
    assert any(p.endswith("pseudo.jsonl") for p in first)
    merged = [json.loads(l) for l in (workspace / "out" / "merged.jsonl").read_text().splitlines()]
    assert len(merged) == 14
    for p in list(first):
        os.remove(p)
    for name, argv in cmds.items():
        assert run(argv) == 0, name
    assert snapshot(workspace / "out") == first


def test_dry_run_writes_nothing(workspace, monkeypatch):
    (workspace / "out").mkdir()
    # produce the inputs that merge and score consume
    for name in ("voc-run", "annotate"):
        assert run(commands(workspace)[name]) == 0
    before = snapshot(workspace)

    def no_network(*a, **k):
        raise AssertionError("network call during dry run")

    monkeypatch.setattr(requests.Session, "post", no_network)
    for name, argv in commands(workspace).items():
        assert run(argv + ["--dry-run"]) == 0, name
    endpoint = ["voc-run", "--in", str(workspace / "golden.jsonl"), "--endpoint", "http://127.0.0.1:9/v1/chat/completions",
                "--out", str(workspace / "out" / "x.jsonl"), "--dry-run"]
    assert run(endpoint) == 0
    assert snapshot(workspace) == before


def test_config_file_and_flag_override(workspace, capsys):
    cfg = {
        "backend": {"mock": "golden_mock.json"},
        "paths": {"data_in": str(workspace / "golden.jsonl"), "data_out": str(workspace / "cfg_pred.jsonl")},
        "strategy": {"kind": "VoC"},
        "seed": 1,
    }
    (workspace / "run.yaml").write_text(yaml.safe_dump(cfg))
    assert run(["voc-run", "--config", str(workspace / "run.yaml")]) == 0
    assert json.loads((workspace / "cfg_pred.jsonl").read_text()) == {"id": "hospital-mortality", "label": "yes"}
    assert run(["voc-run", "--config", str(workspace / "run.yaml"), "--out", str(workspace / "flag.jsonl")]) == 0
    assert (workspace / "flag.jsonl").exists()


def test_config_needs_exactly_one_backend(workspace, capsys):
    (workspace / "bad.yaml").write_text(yaml.safe_dump({"backend": {"mock": "a.json", "endpoint": "http://x"}}))
    assert run(["stats", "--config", str(workspace / "bad.yaml"), "--in", str(workspace / "pqal.json")]) == 3
    (workspace / "weird.yaml").write_text(yaml.safe_dump({"colour": 1}))
    assert run(["stats", "--config", str(workspace / "weird.yaml"), "--in", str(workspace / "pqal.json")]) == 3


def test_transport_failure_is_runtime_exit(workspace, monkeypatch, capsys):
    def refuse(*a, **k):
        raise requests.ConnectionError("refused")

    monkeypatch.setattr(requests.Session, "post", refuse)
    argv = ["voc-run", "--in", str(workspace / "golden.jsonl"), "--endpoint", "http://127.0.0.1:9/v1/chat/completions",
            "--out", str(workspace / "x.jsonl")]
    assert run(argv) == 1
    assert capsys.readouterr().err.startswith("error: transport: ")


def test_ingest_triplets(workspace):
    out = workspace / "kg.txt"
    assert run(["ingest", "--kind", "triplets", "--in", str(workspace / "kg.tsv"), "--out", str(out)]) == 0
    assert out.read_text().splitlines() == ["aspirin treats headache.", "statin lowers cholesterol."]


def test_prep_glm_reads_back(workspace):
    from medadapt.glm_prep import read_examples, reconstruct

    out = workspace / "g.jsonl"
    assert run(["prep-glm", "--in", str(workspace / "tokens.jsonl"), "--vocab-size", "100", "--seed", "4", "--out", str(out)]) == 0
    header, exs = read_examples(out)
    assert header["mask_id"] == 100 and len(exs) == 5
    assert reconstruct(exs[2]).tolist() == list(range(2, 32))
    assert run(["prep-glm", "--in", str(workspace / "tokens.jsonl"), "--vocab-size", "10", "--seed", "4", "--out", str(out)]) == 3
