import json
import subprocess
import sys

import pytest

from kinn.cli import main

N_DOCS = 60


def make_run(tmp_path, **overrides):
    assert main(["make-synthetic", "--kind", "binary", "--n", str(N_DOCS), "--seed", "0", "--out", str(tmp_path)]) == 0
    cfg_path = tmp_path / "config.json"
    cfg = json.loads(cfg_path.read_text())
    cfg.update({"dim": 32, "epochs": 4, **overrides})
    cfg_path.write_text(json.dumps(cfg))
    return cfg_path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = make_run(root)
    for cmd in (["tag"], ["train"], ["eval"]):
        assert main(cmd + ["--config", str(cfg)]) == 0
    return root, cfg


def test_make_synthetic_writes_inputs(trained):
    root, _ = trained
    assert len((root / "dataset.jsonl").read_text().splitlines()) == N_DOCS
    assert (root / "lexicon.jsonl").exists()


def test_pipeline_outputs(trained):
    root, _ = trained
    run = root / "run"
    for name in ("tagged.jsonl", "aspects.jsonl", "model.pt", "train_log.jsonl", "run.json", "metrics.json"):
        assert (run / name).exists(), name
    metrics = json.loads((run / "metrics.json").read_text())
    assert {"precision_macro", "recall_macro", "f1_macro", "mcc"} <= set(metrics)
    assert metrics["split"] == "TEST" and metrics["seed"] == 0
    log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert {e["split"] for e in log} == {"train", "dev"}
    assert json.loads((run / "run.json").read_text())["split_ratios"] == [0.7, 0.15, 0.15]


def test_explain_writes_reports(trained, capsys):
    root, cfg = trained
    assert main(["explain", "--config", str(cfg), "--doc-id", "bi0001"]) == 0
    out = root / "run" / "explanations"
    report = json.loads((out / "bi0001.json").read_text())
    assert report["doc_id"] == "bi0001"
    assert all(a["similarity"] >= 0.80 for a in report["attributions"])
    assert (out / "bi0001.html").read_text().startswith("<!DOCTYPE html>")


def test_explain_unknown_document(trained, capsys):
    _, cfg = trained
    assert main(["explain", "--config", str(cfg), "--doc-id", "nope"]) == 2
    assert "nope" in capsys.readouterr().err


def test_explain_requires_doc_id(trained):
    _, cfg = trained
    assert main(["explain", "--config", str(cfg)]) == 1


def test_echo_line_carries_seed_and_config(trained, capsys):
    _, cfg = trained
    main(["eval", "--config", str(cfg), "--split", "DEV"])
    first = json.loads(capsys.readouterr().out.splitlines()[0])
    assert first["command"] == "eval" and first["seed"] == 0 and first["config"]["dim"] == 32


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["bogus"]) == 1
    cfg = make_run(tmp_path, lexicon="absent.jsonl")
    assert main(["tag", "--config", str(cfg)]) == 1
    cfg.write_text(json.dumps({"dataset": "dataset.jsonl", "api_key": "x"}))
    assert main(["tag", "--config", str(cfg)]) == 1
    (tmp_path / "dataset.jsonl").write_text('{"doc_id": "a"}\n')
    cfg.write_text(json.dumps({"dataset": "dataset.jsonl"}))
    assert main(["tag", "--config", str(cfg)]) == 2
    assert "dataset.jsonl:1" in capsys.readouterr().err


def test_eval_without_checkpoint(tmp_path):
    cfg = make_run(tmp_path)
    assert main(["eval", "--config", str(cfg)]) == 2


def test_repeat_runs_are_byte_identical(tmp_path):
    runs = []
    for name in ("a", "b"):
        cfg = make_run(tmp_path / name)
        for cmd in (["tag"], ["train"], ["eval"], ["explain", "--doc-id", "bi0002"]):
            assert main(cmd + ["--config", str(cfg)]) == 0
        runs.append(tmp_path / name)
    for rel in ("run/tagged.jsonl", "run/train_log.jsonl", "run/metrics.json", "run/explanations/bi0002.json",
                "run/explanations/bi0002.html"):
        a, b = ((r / rel).read_text().replace(str(r), "<root>") for r in runs)
        assert a == b, rel


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "kinn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "make-synthetic" in proc.stdout
