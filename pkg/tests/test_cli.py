import json
import os
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gramevo import SyntheticLinearEvaluator, TensorShape, default_grammar
from gramevo.cli import main
from gramevo.dataset import read_dataset, sample_dataset, write_dataset

WORKER_SRC = str(Path(__file__).resolve().parents[1] / "worker" / "src")


def run_cli(args):
    return main([str(a) for a in args])


def search_config(tmp_path, **overrides):
    doc = {
        "grammar": "default",
        "input_shape": [3, 32, 32],
        "seed": 11,
        "evaluator": {"kind": "synthetic_linear", "oracle_seed": 5, "sigma": 0.02},
        "search": {
            "population_size": 16,
            "n_candidates": 6,
            "k": 2,
            "tournament_size": 3,
            "iterations": 10,
            "max_depth": 8,
        },
        "surrogate": {"kind": "forest", "n_trees": 20},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in doc:
            doc[key].update(value)
        else:
            doc[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def replay_file(tmp_path_factory):
    grammar = default_grammar()
    shape = TensorShape.im(3, 32, 32)
    oracle = SyntheticLinearEvaluator(grammar, shape, oracle_seed=7, sigma=0.0)
    rows = sample_dataset(grammar, shape, oracle, 260, seed=3, dataset="synth")
    path = tmp_path_factory.mktemp("data") / "synth.jsonl"
    write_dataset(path, rows)
    return path


def test_search_writes_log_summary_manifest(tmp_path, capsys):
    cfg = search_config(tmp_path)
    code = run_cli(["search", cfg, "--out-dir", tmp_path / "run"])
    assert code == 0
    log_lines = (tmp_path / "run" / "run.jsonl").read_text().splitlines()
    assert len(log_lines) == 10
    first = json.loads(log_lines[0])
    assert first["iter"] == 1 and len(first["candidates"]) == 6
    assert len(first["accepted"]) == 2
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert 0.0 <= summary["best_fitness"] <= 1.0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["seed"] == 11
    assert manifest["evaluator"]["kind"] == "synthetic_linear"
    assert not list((tmp_path / "run").glob("*.partial"))


def test_search_reruns_are_byte_identical(tmp_path):
    cfg = search_config(tmp_path)
    run_cli(["search", cfg, "--out-dir", tmp_path / "a"])
    run_cli(["search", cfg, "--out-dir", tmp_path / "b"])
    for name in ("run.jsonl", "summary.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_search_rejects_bad_k(tmp_path, capsys):
    cfg = search_config(tmp_path, search={"k": 50})
    code = run_cli(["search", cfg])
    assert code == 2
    assert "k" in capsys.readouterr().err


def test_search_rejects_unknown_field(tmp_path, capsys):
    cfg = search_config(tmp_path, search={"mystery_knob": 1})
    assert run_cli(["search", cfg]) == 2
    assert "mystery_knob" in capsys.readouterr().err


def test_search_seed_override_changes_log(tmp_path):
    cfg = search_config(tmp_path)
    run_cli(["search", cfg, "--out-dir", tmp_path / "a", "--seed", "99"])
    run_cli(["search", cfg, "--out-dir", tmp_path / "b"])
    assert (tmp_path / "a" / "run.jsonl").read_text() != (tmp_path / "b" / "run.jsonl").read_text()


def test_encode_zero_count_is_empty(tmp_path, capsys):
    assert run_cli(["encode", "--count", 0]) == 0
    assert capsys.readouterr().out == ""


def test_encode_plain_is_deterministic(capsys):
    run_cli(["encode", "--count", 5, "--seed", 7])
    first = capsys.readouterr().out
    run_cli(["encode", "--count", 5, "--seed", 7])
    assert capsys.readouterr().out == first
    assert len(first.splitlines()) == 5


def test_encode_with_shapes_annotates_every_op(tmp_path, capsys):
    from gramevo import parse_arch
    from gramevo.encoder import strip_shape_annotations

    grammar = default_grammar()
    run_cli(["encode", "--count", 12, "--seed", 7, "--variant", "with-shapes"])
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert len(lines) == 12
    for line in lines:
        assert "out_feature_shape" in line
        tree = parse_arch(grammar, line)
        ops = sum(
            1
            for node in tree.iter_nodes()
            for sym in grammar.production(node.nonterminal, node.production).rhs
            if not isinstance(sym, str)
        )
        assert line.count("out_feature_shape") == ops
        assert strip_shape_annotations(line).count("{") == 0


def test_augment_keeps_originals(tmp_path, replay_file, capsys):
    out_path = tmp_path / "augmented.jsonl"
    code = run_cli(
        ["augment", "--in", replay_file, "--out", out_path, "--factor", "1", "--seed", "4"]
    )
    assert code == 0
    rows = read_dataset(out_path)
    originals = read_dataset(replay_file)
    assert len(rows) >= len(originals)
    original_encodings = {r.encoding for r in originals}
    assert original_encodings <= {r.encoding for r in rows}


def test_eval_correlation_memorizes_noiseless_replay(tmp_path, replay_file, capsys):
    code = run_cli(
        [
            "eval-correlation",
            "--train", replay_file,
            "--test", replay_file,
            "--surrogate", "forest",
            "--seed", "1",
        ]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["kendall"] >= 0.95
    assert report["n"] == 260


def test_eval_correlation_train_prefix_protocol(tmp_path, replay_file, capsys):
    code = run_cli(
        [
            "eval-correlation",
            "--test", replay_file,
            "--train-prefix", "200",
            "--eval-window", "60",
            "--surrogate", "forest",
        ]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n"] == 60
    assert report["kendall"] is not None


def test_eval_correlation_sliding_refit_windows(tmp_path, replay_file, capsys):
    code = run_cli(
        [
            "eval-correlation",
            "--test", replay_file,
            "--train-prefix", "140",
            "--refit-every", "40",
            "--surrogate", "forest",
        ]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert [w["start"] for w in report["windows"]] == [140, 180, 220]
    assert report["n"] == 120


def test_eval_correlation_empty_train_is_config_error(tmp_path, replay_file, capsys):
    assert run_cli(["eval-correlation", "--test", replay_file, "--surrogate", "forest"]) == 2


def test_transfer_eval_leave_one_out(tmp_path, capsys):
    grammar = default_grammar()
    shape = TensorShape.im(3, 32, 32)
    oracle = SyntheticLinearEvaluator(grammar, shape, oracle_seed=7, sigma=0.0)
    rows = []
    for i, tag in enumerate(["d0", "d1", "d2"]):
        rows.extend(sample_dataset(grammar, shape, oracle, 120, seed=20 + i, dataset=tag))
    path = tmp_path / "multi.jsonl"
    write_dataset(path, rows)
    code = run_cli(
        ["transfer-eval", "--data", path, "--surrogate", "forest",
         "--normalization", "percentile", "--seed", "2"]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"d0", "d1", "d2"}
    # datasets share one oracle, so transfer should be comfortably positive
    for tag, entry in report.items():
        assert entry["kendall"] > 0.5, (tag, entry)


def test_transfer_eval_requires_two_tags(tmp_path, replay_file, capsys):
    assert run_cli(["transfer-eval", "--data", replay_file, "--surrogate", "forest"]) == 2


def test_fit_surrogate_serializes_model(tmp_path, replay_file, capsys):
    out = tmp_path / "model.json"
    code = run_cli(
        ["fit-surrogate", "--train", replay_file, "--out", out, "--seed", "3",
         "--n-trees", "30"]
    )
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["format"] == "gramevo-forest"
    assert doc["seed"] == 3
    assert len(doc["trees"]) == 30
    assert any(name.startswith("linear_") for name in doc["schema"])


def test_missing_input_file_exits_nonzero(tmp_path, capsys):
    assert run_cli(["augment", "--in", tmp_path / "nope.jsonl", "--out", tmp_path / "x"]) == 3
    assert not (tmp_path / "x").exists()
    assert not (tmp_path / "x.partial").exists()


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "gramevo.cli", "--version"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0


def test_worker_env_var_is_honored(tmp_path, replay_file, capsys, monkeypatch):
    monkeypatch.setenv("GRAMEVO_WORKER_CMD", f"{sys.executable} -m bridge_worker")
    monkeypatch.setenv("PYTHONPATH", WORKER_SRC)
    code = run_cli(
        ["eval-correlation", "--train", replay_file, "--test", replay_file,
         "--surrogate", "external"]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["kendall"] is not None
