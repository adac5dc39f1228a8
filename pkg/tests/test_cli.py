"""End-to-end checks of the command-line interface."""

import filecmp
import json
from pathlib import Path

import pytest

from ktrace.cli import main


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def prepared(tmp_path_factory) -> Path:
    """A generated and prepared dataset shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    raw = root / "raw"
    assert run_cli(
        "generate", "--out", raw, "--seed", 11, "--students", 60,
        "--questions", 25, "--kcs", 4, "--responses", 30,
    ) == 0
    prep = root / "prep"
    assert run_cli(
        "prepare", "--input", raw / "events.csv", "--manifest", raw / "manifest.json",
        "--out", prep, "--folds", 4, "--seed", 3,
    ) == 0
    return prep


def test_generate_same_seed_is_byte_identical(tmp_path):
    args = ["generate", "--seed", 5, "--students", 20, "--responses", 15]
    assert run_cli(*args, "--out", tmp_path / "a") == 0
    assert run_cli(*args, "--out", tmp_path / "b") == 0
    for name in ("events.csv", "manifest.json", "ground_truth.json"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def test_prepare_rerun_identical_outputs(prepared, tmp_path):
    raw = prepared.parent / "raw"
    assert run_cli(
        "prepare", "--input", raw / "events.csv", "--manifest", raw / "manifest.json",
        "--out", tmp_path / "again", "--folds", 4, "--seed", 3,
    ) == 0
    for name in ("events.csv", "manifest.json", "folds.json", "prepare_meta.json"):
        assert filecmp.cmp(prepared / name, tmp_path / "again" / name, shallow=False)


def test_prepare_writes_run_manifest(prepared):
    obj = json.loads((prepared / "run_manifest.json").read_text())
    assert obj["subcommand"] == "prepare"
    assert obj["seed"] == 3
    assert len(obj["inputs"]) == 2
    assert all(len(d) == 64 for d in obj["inputs"].values())
    assert any(p.endswith("folds.json") for p in obj["outputs"])
    assert obj["versions"]["ktrace"]


def test_prepare_corrupt_row_fails_with_line_number(tmp_path, capsys):
    raw = tmp_path / "raw"
    assert run_cli("generate", "--out", raw, "--seed", 1, "--students", 12) == 0
    csv_path = raw / "events.csv"
    lines = csv_path.read_text().splitlines()
    correct_col = lines[0].split(",").index("correct")
    row = lines[3].split(",")
    row[correct_col] = "maybe"
    lines[3] = ",".join(row)
    csv_path.write_text("\n".join(lines) + "\n")
    code = run_cli(
        "prepare", "--input", csv_path, "--manifest", raw / "manifest.json",
        "--out", tmp_path / "prep",
    )
    assert code == 1
    err = capsys.readouterr().err
    assert "error:" in err and "line 4" in err and "maybe" in err


def test_train_eval_report_schema(prepared, tmp_path):
    report_path = tmp_path / "report.json"
    assert run_cli(
        "train-eval", "--data", prepared, "--recipe", "irt", "--report", report_path,
    ) == 0
    obj = json.loads(report_path.read_text())
    assert obj["spec"] == "irt"
    assert obj["k"] == 4 and obj["seed"] == 3
    assert len(obj["per_fold"]) == 4
    assert {"fold", "n", "positives", "acc", "auc"} <= set(obj["per_fold"][0])
    assert 0.0 < obj["auc_mean"] < 1.0
    assert [b["bucket"] for b in obj["buckets"]][:2] == ["0-10", "10-50"]


def test_train_eval_jobs_do_not_change_report(prepared, tmp_path):
    for jobs, name in ((1, "a.json"), (3, "b.json")):
        assert run_cli(
            "train-eval", "--data", prepared, "--recipe", "pfa",
            "--jobs", jobs, "--report", tmp_path / name,
        ) == 0
    assert filecmp.cmp(tmp_path / "a.json", tmp_path / "b.json", shallow=False)


def test_train_eval_persists_models_and_manifest(prepared, tmp_path):
    out = tmp_path / "run"
    assert run_cli(
        "train-eval", "--data", prepared, "--recipe", "irt", "--out", out,
    ) == 0
    for fold in range(4):
        assert (out / "models" / f"fold-{fold}" / "model.json").exists()
        assert (out / "models" / f"fold-{fold}" / "encoder.json").exists()
    assert (out / "report.json").exists()
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["effective_config"]["spec"] == "irt"
    assert run["duration_s"] >= 0


def test_option_precedence_flag_env_config(prepared, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"jobs": 4, "l2": 0.5}))

    def effective_jobs(*extra):
        out = tmp_path / "out"
        assert run_cli(
            "train-eval", "--data", prepared, "--recipe", "irt",
            "--config", cfg, "--out", out, *extra,
        ) == 0
        return json.loads((out / "run_manifest.json").read_text())["effective_config"]

    monkeypatch.delenv("KTRACE_JOBS", raising=False)
    got = effective_jobs()
    assert got["jobs"] == 4 and got["l2"] == 0.5

    monkeypatch.setenv("KTRACE_JOBS", "2")
    assert effective_jobs()["jobs"] == 2

    assert effective_jobs("--jobs", 1)["jobs"] == 1


def test_train_eval_partitioned_label(prepared, tmp_path):
    report_path = tmp_path / "part.json"
    assert run_cli(
        "train-eval", "--data", prepared, "--recipe", "irt",
        "--partition", "response-index", "--report", report_path,
    ) == 0
    assert json.loads(report_path.read_text())["spec"] == "irt@response-index"


def test_train_eval_combine_and_select(prepared, tmp_path, capsys):
    report_path = tmp_path / "combo.json"
    assert run_cli(
        "train-eval", "--data", prepared, "--recipe", "irt",
        "--combine", "irt+pfa", "--select-bases", "--report", report_path,
    ) == 0
    out = capsys.readouterr().out
    assert "selected bases:" in out
    obj = json.loads(report_path.read_text())
    sel = obj["extra"]["selection"]
    assert sel["chosen"] and 0 < sel["fold1_auc"] <= 1
    assert len(sel["table"]) == 3


def test_train_eval_unknown_recipe_fails(prepared, capsys):
    assert run_cli("train-eval", "--data", prepared, "--recipe", "mystery") == 1
    assert "error:" in capsys.readouterr().err


def test_train_eval_bad_partition_fails(prepared, capsys):
    assert run_cli(
        "train-eval", "--data", prepared, "--recipe", "irt", "--partition", "sideways",
    ) == 1
    assert "sideways" in capsys.readouterr().err


def test_roc_csv_output(prepared, tmp_path):
    roc_path = tmp_path / "roc.csv"
    assert run_cli(
        "train-eval", "--data", prepared, "--recipe", "irt", "--roc-csv", roc_path,
    ) == 0
    lines = roc_path.read_text().splitlines()
    assert lines[0] == "fpr,tpr"
    assert lines[1] == "0.0,0.0"
    last = [float(x) for x in lines[-1].split(",")]
    assert last == [1.0, 1.0]


def test_stats_outputs_json(prepared, capsys):
    assert run_cli("stats", "--data", prepared) == 0
    obj = json.loads(capsys.readouterr().out)
    assert obj["n_students"] == 60
    assert obj["n_responses"] == 60 * 30
    assert 0 < obj["overall_correct_rate"] < 1
    assert "next_question_predictability" in obj


def test_stats_needs_an_input(capsys):
    assert run_cli("stats") == 1
    assert "error:" in capsys.readouterr().err


def test_stats_raw_input_matches_prepared(prepared, tmp_path, capsys):
    raw = prepared.parent / "raw"
    assert run_cli("stats", "--input", raw / "events.csv", "--manifest", raw / "manifest.json") == 0
    from_raw = json.loads(capsys.readouterr().out)
    assert run_cli("stats", "--data", prepared) == 0
    from_prep = json.loads(capsys.readouterr().out)
    # quality counters are recorded by the prepare pipeline, not by raw loads
    assert from_prep.pop("quality") == {"negative_lag_clamped": 0, "students_filtered": 0}
    from_raw.pop("quality")
    assert from_raw == from_prep
