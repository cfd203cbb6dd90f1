from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import pytest
import yaml

from aimem import cli
from aimem.config import build_provider, load_config, parse_config
from aimem.errors import ConfigError, CorruptRunLog, InvariantViolation
from aimem.runstore import RECORD_FILE, RunStore, resume, verify_outputs

from conftest import T0, note, write_jsonl

MOCKS = {
    "answerer": {"kind": "mock", "model": "m", "mock": {"default": "The answer is in the notes."}},
    "judge": {"kind": "mock", "model": "m",
              "mock": {"rules": [{"match": "numerical score", "response": "7"}], "default": "4"}},
}


def niah_config(tmp_path, **niah):
    data = {
        "providers": MOCKS,
        "output_dir": "runs",
        "niah": {"providers": ["answerer"], "judge": "judge", "synthetic_corpora": 1,
                 "synthetic_items": 40, "context_lengths": [2000], "modes": ["multi"], **niah},
    }
    path = tmp_path / "niah.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_minimal_config_and_defaults(tmp_path):
    cfg = parse_config({"providers": {"a": {"model": "gpt-4o"}}}, tmp_path)
    assert cfg.providers["a"].max_context_tokens == 128_000
    assert cfg.providers["a"].retry.max_attempts == 3
    assert cfg.path("x.jsonl") == tmp_path / "x.jsonl"
    assert parse_config(None).providers == {}


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match=r"providers\.a\.temprature: unknown key"):
        parse_config({"providers": {"a": {"model": "m", "temprature": 0.2}}})


def test_missing_provider_caught_at_load():
    with pytest.raises(ConfigError, match="niah.judge: provider 'nobody'"):
        parse_config({"providers": MOCKS, "niah": {"providers": ["answerer"], "judge": "nobody"}})
    with pytest.raises(ConfigError, match="either script or mock"):
        parse_config({"providers": {"x": {"kind": "mock", "model": "m", "script": "s.json",
                                          "mock": {"default": "a"}}}})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "none.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("providers: [unclosed")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(bad)


def test_mock_provider_from_config(tmp_path):
    cfg = parse_config({"providers": MOCKS}, tmp_path)
    from aimem.providers import ChatMessage

    p = build_provider(cfg, "judge")
    assert p.complete([ChatMessage("user", "Only respond with a numerical score")]).text == "7"


def test_runstore_resume_and_manifest(tmp_path):
    store = RunStore.create(tmp_path, "niah", {"seed": 1})
    assert store.root.name == f"niah-{store.record.run_id}"
    (store.root / "out.txt").write_text("hello")
    store.finish(["out.txt"])
    first = (store.root / RECORD_FILE).read_bytes()
    again = RunStore.create(tmp_path, "niah", {"seed": 1})
    again.finish([store.root / "out.txt"])
    assert (store.root / RECORD_FILE).read_bytes() == first
    assert verify_outputs(store.root) == []
    (store.root / "out.txt").write_text("changed")
    assert verify_outputs(store.root) == ["out.txt"]
    with pytest.raises(Exception, match="already holds run"):
        RunStore.create(tmp_path, "niah", {"seed": 2}, run_dir=store.root)


def test_runstore_refuses_tampered_log(tmp_path):
    store = RunStore.create(tmp_path, "x", {})
    store.log.append({"op": "chat", "fingerprint": "f", "response": "a"})
    store.log.append({"op": "chat", "fingerprint": "g", "response": "b"})
    lines = store.calls_path.read_text().splitlines()
    lines[0] = lines[0].replace('"a"', '"z"')
    store.calls_path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptRunLog) as exc:
        resume(store.root)
    assert exc.value.line == 1


def test_niah_run_then_resume_makes_no_calls(tmp_path, capsys):
    spec = niah_config(tmp_path)
    code, out, err = run_cli(capsys, "niah", "run", "--spec", str(spec))
    assert code == 0, err
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][:5] == ["provider", "mode", "context_length", "hops", "mean"]
    assert "provider_calls=0" not in err
    run_dir = Path(err.split("run_dir=")[1].split()[0])
    scores = (run_dir / "scores.csv").read_bytes()
    record = (run_dir / RECORD_FILE).read_bytes()
    assert sorted(p.name for p in run_dir.glob("*.svg")) == ["heatmap_answerer_multi.svg"]

    code, _, err = run_cli(capsys, "niah", "run", "--spec", str(spec))
    assert code == 1 and "--resume" in err

    code, out2, err = run_cli(capsys, "niah", "run", "--spec", str(spec), "--resume")
    assert code == 0 and "provider_calls=0" in err
    assert (run_dir / "scores.csv").read_bytes() == scores
    assert (run_dir / RECORD_FILE).read_bytes() == record
    assert out2 == out

    code, _, _ = run_cli(capsys, "niah", "report", "--run", str(run_dir), "--out", str(tmp_path / "rep"))
    assert code == 0 and (tmp_path / "rep" / "scores.csv").read_bytes() == scores

    calls = run_dir / "calls.jsonl"
    calls.write_text(calls.read_text().replace("The answer", "An answer", 1))
    code, _, err = run_cli(capsys, "niah", "run", "--spec", str(spec), "--resume")
    assert code == 1 and "CorruptRunLog" in err and "line 1" in err


def test_niah_run_with_relative_paths(tmp_path, capsys, monkeypatch):
    niah_config(tmp_path)
    monkeypatch.chdir(tmp_path)
    code, _, err = run_cli(capsys, "niah", "run", "--spec", "niah.yaml")
    assert code == 0, err
    run_dir = Path(err.split("run_dir=")[1].split()[0])
    assert run_dir.parent == tmp_path / "runs"
    assert verify_outputs(run_dir) == []


def test_niah_plan_marks_skipped(tmp_path, capsys):
    spec = niah_config(tmp_path, context_lengths=[2000, 256000])
    code, out, _ = run_cli(capsys, "niah", "plan", "--spec", str(spec))
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0
    assert [r[-1] for r in rows[1:]] == ["planned", "skipped"]
    assert rows[1][3] == "6"


def test_exit_codes(tmp_path, capsys, monkeypatch):
    code, _, err = run_cli(capsys, "niah", "plan", "--spec", str(tmp_path / "missing.yaml"))
    assert code == 1 and "ConfigError" in err
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "n1"}\n')
    code, _, err = run_cli(capsys, "ingest", "--corpus", str(bad))
    assert code == 1 and "line 1" in err

    corpus = tmp_path / "c.jsonl"
    write_jsonl(corpus, [note(1, "Ran 5k.").to_record()])
    cfg = tmp_path / "lpm.yaml"
    cfg.write_text(yaml.safe_dump({"providers": {"remote": {"model": "m", "api_key_env": "AIMEM_NO_SUCH_KEY",
                                                            "endpoint": "http://127.0.0.1:9"}},
                                   "lpm": {"generator": "remote"}}))
    monkeypatch.delenv("AIMEM_NO_SUCH_KEY", raising=False)
    code, _, err = run_cli(capsys, "lpm", "gen-data", "-c", str(cfg), "--corpus", str(corpus),
                           "--out", str(tmp_path / "ds"), "--now", "2024-05-01")
    assert code == 2, err

    def broken(args):
        raise InvariantViolation("boom")

    monkeypatch.setattr(cli, "cmd_ingest", broken)
    code, _, err = run_cli(capsys, "ingest", "--corpus", str(corpus))
    assert code == 3 and "boom" in err

    def crash(args):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(cli, "cmd_ingest", crash)
    assert run_cli(capsys, "ingest", "--corpus", str(corpus))[0] == 3


def test_ingest_and_haystack_commands(tmp_path, capsys):
    corpus = tmp_path / "c.jsonl"
    write_jsonl(corpus, [note(i, "Walked the dog.", at=T0).to_record() for i in range(1, 4)])
    code, out, _ = run_cli(capsys, "ingest", "--corpus", str(corpus))
    summary = dict(csv.reader(io.StringIO(out)))
    assert code == 0 and summary["items"] == "3" and summary["notes"] == "3"
    code, out, _ = run_cli(capsys, "haystack", "--corpus", str(corpus), "--tokens", "20",
                           "--out", str(tmp_path / "h.txt"))
    rows = list(csv.reader(io.StringIO(out)))
    assert code == 0 and rows[1][-1] == "n3"
    assert (tmp_path / "h.txt").read_text()


def _memory_rag_config(tmp_path):
    providers = {
        "gen": {"kind": "mock", "model": "m", "mock": {"rules": [
            {"match": "Summarize", "response": "User walked the dog."},
            {"match": "List the specific", "response": "dog walking"},
            {"match": "Extract preferences", "response": "user | like | dogs"},
            {"match": "List the people", "response": "none"},
            {"match": "broader category", "response": "pets"},
            {"match": "Rewrite", "response": "dog walk"},
        ], "default": "You walked the dog."}},
        "emb": {"kind": "mock", "model": "e"},
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({
        "providers": providers,
        "memory": {"provider": "gen", "store": "mem"},
        "rag": {"generator": "gen", "embedder": "emb", "final_k": 2},
        "lpm": {"generator": "gen"},
    }))
    return path


def test_memory_rag_lpm_commands(tmp_path, capsys):
    cfg = _memory_rag_config(tmp_path)
    corpus = tmp_path / "c.jsonl"
    write_jsonl(corpus, [note(i, f"Walked the dog {i} km.", at=T0.replace(day=1 + i)).to_record()
                         for i in range(1, 5)])
    code, out, err = run_cli(capsys, "memory", "extract", "-c", str(cfg), "--corpus", str(corpus))
    assert code == 0, err
    assert (tmp_path / "mem").is_dir()
    code, out, err = run_cli(capsys, "memory", "rollup", "-c", str(cfg), "--tag", "dog walking")
    assert code == 0, err
    assert "pets" in out
    code, out, err = run_cli(capsys, "memory", "trend", "-c", str(cfg), "--tag", "dog walking",
                             "--since", "2024-04-01")
    assert code == 0, err

    index = tmp_path / "index.json"
    assert run_cli(capsys, "rag", "index", "-c", str(cfg), "--corpus", str(corpus), "--out", str(index))[0] == 0
    code, out, _ = run_cli(capsys, "rag", "query", "-c", str(cfg), "--index", str(index), "--q", "dog?")
    assert code == 0 and out.rstrip().endswith("You walked the dog.")

    code, out, err = run_cli(capsys, "lpm", "gen-data", "-c", str(cfg), "--corpus", str(corpus),
                             "--out", str(tmp_path / "ds"), "--now", "2024-05-01")
    assert code == 0, err
    assert (tmp_path / "ds" / "dataset.jsonl").exists()
    code, out, _ = run_cli(capsys, "lpm", "manifest", "-c", str(cfg), "--dataset", str(tmp_path / "ds"))
    assert code == 0 and json.loads(out)["stats"]["examples"] > 0


def test_bench_run_and_report(tmp_path, capsys):
    corpus = tmp_path / "c.jsonl"
    write_jsonl(corpus, [note(i, "Walked the dog. " * 20, at=T0.replace(day=1 + i)).to_record()
                         for i in range(1, 10)])
    qs = tmp_path / "q.jsonl"
    write_jsonl(qs, [
        {"id": "old", "category": "Memory", "question": "What did I do first?", "reference_answer": "Walk",
         "required_source_dates": [T0.replace(day=2).date().isoformat()]},
        {"id": "new", "category": "Memory", "question": "And last?", "reference_answer": "Walk",
         "required_source_dates": [T0.replace(day=10).date().isoformat()]},
        {"id": "u", "category": "Understand", "question": "Who am I?", "reference_answer": "A walker"},
    ])
    cfg = tmp_path / "bench.yaml"
    cfg.write_text(yaml.safe_dump({
        "providers": {
            "small": {"kind": "mock", "model": "m", "max_context_tokens": 700, "mock": {"default": "Walking."}},
            "judge": {"kind": "mock", "model": "j", "mock": {"default": "4"}},
        },
        "bench": {"judge": "judge", "corpus": "c.jsonl", "methods": {
            "lc": {"type": "long_context", "generator": "small", "label": "Long context"},
            "rag": {"type": "ragpp", "generator": "small"},
        }},
    }))
    code, out, err = run_cli(capsys, "bench", "run", "-c", str(cfg), "--method", "lc", "--questions", str(qs))
    assert code == 0, err
    assert "4.00*" in out
    lc_dir = err.split("run_dir=")[1].split()[0]
    result = json.loads(open(f"{lc_dir}/result.json").read())
    assert result["excluded"] == ["old"]
    code, _, err = run_cli(capsys, "bench", "run", "-c", str(cfg), "--method", "rag", "--questions", str(qs))
    assert code == 0, err
    rag_dir = err.split("run_dir=")[1].split()[0]
    code, out, _ = run_cli(capsys, "bench", "report", "--results", lc_dir, rag_dir, "--out", str(tmp_path / "rep"))
    assert code == 0
    assert (tmp_path / "rep" / "bench.svg").exists()
    assert "over all questions it is 2.00" in (tmp_path / "rep" / "bench_notes.txt").read_text()
    code, _, err = run_cli(capsys, "bench", "run", "-c", str(cfg), "--method", "nope", "--questions", str(qs))
    assert code == 1 and "nope" in err
