import csv
import json
import subprocess
import sys

import pytest

from ptrchoice.cli import main
from ptrchoice.dcm import load_dcm


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("generate", "--sessions", 120, "--seed", 1, "--mode", "nonlinear", "--max-alternatives", 20, "-o", d / "all.jsonl") == 0
    assert run("split", "--data", d / "all.jsonl", "--seed", 2, "--out-dir", d) == 0
    return d


def test_generate_line_count_and_reproducibility(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("generate", "--sessions", 1000, "--seed", 1, "--mode", "linear", "-o", a) == 0
    assert run("generate", "--sessions", 1000, "--seed", 1, "--mode", "linear", "-o", b) == 0
    assert len(a.read_text().splitlines()) == 1000
    assert a.read_bytes() == b.read_bytes()
    meta = json.loads(a.with_suffix(".meta.json").read_text())
    assert meta["resolved_config"]["seed"] == 1
    assert meta["generator"]["n_sessions"] == 1000


def test_generate_zero_sessions_is_usage_error(tmp_path):
    assert run("generate", "--sessions", 0, "-o", tmp_path / "x.jsonl") == 2


def test_bad_flag_is_usage_error():
    assert run("generate", "--no-such-flag") == 2


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PTRCHOICE_SEED", "1")
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("generate", "--sessions", 20, "-o", a) == 0
    monkeypatch.delenv("PTRCHOICE_SEED")
    assert run("generate", "--sessions", 20, "--seed", 1, "-o", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sessions": 7, "seed": 4}))
    out = tmp_path / "g.jsonl"
    assert run("generate", "--config", cfg, "--sessions", 9, "-o", out) == 0
    meta = json.loads(out.with_suffix(".meta.json").read_text())
    assert len(out.read_text().splitlines()) == 9
    assert meta["resolved_config"]["seed"] == 4


def test_split_sizes(workdir):
    sizes = [len((workdir / f"{n}.jsonl").read_text().splitlines()) for n in ("train", "valid", "test")]
    assert sizes == [84, 18, 18]


def test_train_mnl(workdir):
    out = workdir / "m.json"
    assert run("train", "mnl", "--data", workdir / "train.jsonl", "--max-iters", 50, "-o", out) == 0
    doc = json.loads(out.read_text())
    assert doc["format"] == "mnl-v1"
    assert len(doc["theta"]) == len(doc["columns"])
    assert doc["config"]["resolved_config"]["max_iters"] == 50
    assert json.loads(out.with_suffix(".history.json").read_text())["ll_trace"]


def test_train_dcm_header_echoes_hyperparameters(workdir):
    out = workdir / "d.dcm"
    code = run(
        "train", "dcm", "--data", workdir / "train.jsonl", "--valid", workdir / "valid.jsonl",
        "--memory", 128, "--lr", 0.1, "--batch", 128, "--clip", 8, "--k", 5, "--max-epochs", 1, "-o", out,
    )
    assert code == 0
    _, _, config, header = load_dcm(out)
    assert (config.memory_size, config.lr, config.batch_size, config.clip_threshold, config.k) == (128, 0.1, 128, 8.0, 5.0)
    assert config.num_layers == 1
    assert header["extra"]["resolved_config"]["memory"] == 128
    hist = json.loads(out.with_suffix(".history.json").read_text())
    assert len(hist["train_loss"]) == 1


def test_train_missing_data(tmp_path):
    assert run("train", "mnl", "--data", tmp_path / "nope.jsonl", "-o", tmp_path / "m.json") == 2


def test_evaluate_cheapest(workdir):
    out, table = workdir / "e.json", workdir / "e.csv"
    assert run("evaluate", "--data", workdir / "test.jsonl", "--model", "cheapest", "-o", out, "--csv", table) == 0
    report = json.loads(out.read_text())
    assert report["page_miss_rate"] == 0.0
    assert report["config"]["resolved_config"]["model"] == "cheapest"
    rows = list(csv.DictReader(open(table)))
    assert len(rows) == 50 and rows[0].keys() == {"N", "accuracy", "method"}


def test_evaluate_schema_mismatch(workdir, tmp_path):
    model = tmp_path / "m.json"
    assert run("train", "mnl", "--data", workdir / "train.jsonl", "--max-iters", 5, "-o", model) == 0
    other = tmp_path / "other.jsonl"
    assert run("generate", "--sessions", 10, "--max-alternatives", 10, "-o", other) == 0
    assert run("evaluate", "--data", other, "--model", model) == 4


def test_compare_four_methods(workdir, capsys):
    mnl_path, dcm_path = workdir / "cm.json", workdir / "cd.dcm"
    assert run("train", "mnl", "--data", workdir / "train.jsonl", "--max-iters", 30, "-o", mnl_path) == 0
    assert run("train", "dcm", "--data", workdir / "train.jsonl", "--memory", 8, "--max-epochs", 2, "-o", dcm_path) == 0
    capsys.readouterr()
    out, table = workdir / "cmp.json", workdir / "cmp.csv"
    args = ["compare", "--data", workdir / "test.jsonl", "--models", dcm_path, mnl_path, "cheapest", "shortest", "-o", out, "--csv", table]
    assert run(*args) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == 2 + 4
    doc = json.loads(out.read_text())
    assert [m["method"] for m in doc["methods"]] == ["dcm:cd", "mnl:cm", "cheapest", "shortest"]
    assert len(list(csv.DictReader(open(table)))) == 200
    first = out.read_bytes()
    assert run(*args) == 0
    assert out.read_bytes() == first


def test_compare_needs_two(workdir):
    assert run("compare", "--data", workdir / "test.jsonl", "--models", "cheapest") == 2


def test_console_entry_point(tmp_path):
    out = tmp_path / "x.jsonl"
    proc = subprocess.run(
        [sys.executable, "-m", "ptrchoice.cli", "generate", "--sessions", "3", "-o", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert len(out.read_text().splitlines()) == 3
