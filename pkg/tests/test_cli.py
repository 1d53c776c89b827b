import json

import numpy as np
import pytest

from datasetclone.cli import main
from datasetclone.evaluation import FeatureMatrix, write_features
from tests.conftest import DATA


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """catalog -> plan -> generate -> train, shared by command tests."""
    root = tmp_path_factory.mktemp("cli")
    classes = root / "classes.txt"
    classes.write_text("n91000001\nn91000009\n")

    assert main(["catalog", "--wordnet-meta", f"{DATA}/wordnet_meta.json",
                 "--classes", str(classes), "--out", str(root / "catalog.json")]) == 0
    assert main(["plan", "--catalog", str(root / "catalog.json"),
                 "--templates", "name,name_hyper,name_def,multi,multi_diff,hyper_bg",
                 "--per-class", "12", "--backgrounds", f"{DATA}/backgrounds.txt",
                 "--seed", "5", "--width", "64", "--height", "48",
                 "--out", str(root / "plan.jsonl")]) == 0
    assert main(["generate", "--plan", str(root / "plan.jsonl"), "--backend", "mock",
                 "--workers", "4", "--out-dir", str(root / "data")]) == 0

    config = root / "train.yaml"
    config.write_text(
        "epochs: 2\nbatch_size: 8\nbase_lr: 0.05\n"
        "multicrop:\n  num_global: 1\n  num_local: 2\n  global_size: 24\n  local_size: 12\n"
    )
    assert main(["train", "--manifest", str(root / "data"), "--config", str(config),
                 "--out", str(root / "ckpt")]) == 0
    return root


def test_plan_files_are_byte_identical_across_runs(workspace, tmp_path):
    out = tmp_path / "replay.jsonl"
    args = ["plan", "--catalog", str(workspace / "catalog.json"),
            "--templates", "name,name_hyper,name_def,multi,multi_diff,hyper_bg",
            "--per-class", "12", "--backgrounds", f"{DATA}/backgrounds.txt",
            "--seed", "5", "--width", "64", "--height", "48", "--out", str(out)]
    assert main(args) == 0
    assert out.read_bytes() == (workspace / "plan.jsonl").read_bytes()


def test_catalog_output_contents(workspace):
    payload = json.loads((workspace / "catalog.json").read_text())
    assert [e["wnid"] for e in payload["entries"]] == ["n91000001", "n91000009"]
    assert payload["entries"][0]["class_index"] == 0


def test_unknown_template_exits_with_error_code(workspace, capsys):
    rc = main(["plan", "--catalog", str(workspace / "catalog.json"),
               "--templates", "photo_of", "--per-class", "1",
               "--out", str(workspace / "nope.jsonl")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "unknown_template"


def test_background_template_requires_backgrounds(workspace, capsys):
    rc = main(["plan", "--catalog", str(workspace / "catalog.json"),
               "--templates", "hyper_bg", "--per-class", "1",
               "--out", str(workspace / "nope.jsonl")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "missing_backgrounds"


def test_plan_counts_file_preserves_imbalance(workspace, tmp_path):
    counts = tmp_path / "counts.json"
    counts.write_text(json.dumps({"n91000001": 7, "n91000009": 3}))
    out = tmp_path / "imbalanced.jsonl"
    rc = main(["plan", "--catalog", str(workspace / "catalog.json"),
               "--templates", "name,name_hyper", "--counts", str(counts),
               "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()[1:]
    per_class = {}
    for line in lines:
        wnid = json.loads(line)["wnid"]
        per_class[wnid] = per_class.get(wnid, 0) + 1
    assert per_class == {"n91000001": 7, "n91000009": 3}


def test_plan_requires_some_count_source(workspace, capsys):
    rc = main(["plan", "--catalog", str(workspace / "catalog.json"),
               "--templates", "name", "--out", str(workspace / "nope.jsonl")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "bad_counts"


def test_generate_refuses_rerun_without_resume(workspace, capsys):
    rc = main(["generate", "--plan", str(workspace / "plan.jsonl"), "--backend", "mock",
               "--workers", "2", "--out-dir", str(workspace / "data")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "store_error"


def test_generate_resume_skips(workspace, capsys):
    rc = main(["generate", "--plan", str(workspace / "plan.jsonl"), "--backend", "mock",
               "--workers", "2", "--out-dir", str(workspace / "data"), "--resume"])
    assert rc == 0
    assert "skipped=24" in capsys.readouterr().out


def test_eval_writes_topk_report(workspace):
    out = workspace / "eval.json"
    rc = main(["eval", "--checkpoint", str(workspace / "ckpt"),
               "--dataset", str(workspace / "data"), "--topk", "1,5",
               "--out", str(out)])
    assert rc == 0
    report = json.loads(out.read_text())
    assert set(report) >= {"top1", "top5", "n_samples"}
    assert 0.0 <= report["top1"] <= report["top5"] <= 1.0


def test_eval_mask_mismatch_error(workspace, tmp_path, capsys):
    mask = tmp_path / "mask.json"
    mask.write_text("[0]")  # dataset also contains label 1
    rc = main(["eval", "--checkpoint", str(workspace / "ckpt"),
               "--dataset", str(workspace / "data"), "--topk", "1",
               "--class-mask", str(mask), "--out", str(tmp_path / "r.json")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "mask_mismatch"


def test_features_probe_analyze_chain(workspace, tmp_path):
    feats = workspace / "feats.bin"
    rc = main(["features", "--checkpoint", str(workspace / "ckpt"),
               "--dataset", str(workspace / "data"), "--resolution", "24",
               "--out", str(feats)])
    assert rc == 0

    probe_out = tmp_path / "probe.json"
    rc = main(["probe", "--train-feats", str(feats), "--test-feats", str(feats),
               "--trials", "25", "--out", str(probe_out)])
    assert rc == 0
    probe_report = json.loads(probe_out.read_text())
    assert probe_report["n_trials"] >= 25
    assert "accuracy" in probe_report

    metrics_out = tmp_path / "metrics.json"
    rc = main(["analyze", "--feats", str(feats),
               "--metrics", "sparsity,intra,redundancy,coding",
               "--out", str(metrics_out)])
    assert rc == 0
    metrics = json.loads(metrics_out.read_text())
    assert set(metrics) >= {"sparsity", "intra", "redundancy", "coding", "params"}


def test_analyze_rejects_unknown_metric(workspace, tmp_path, capsys):
    rc = main(["analyze", "--feats", str(workspace / "feats.bin"),
               "--metrics", "sparsity,entropy", "--out", str(tmp_path / "m.json")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "unknown_metric"


def _fake_report(path, top5):
    path.write_text(json.dumps({"top1": top5 - 0.2, "top5": top5}))


def test_report_spider_has_axis_per_input(tmp_path):
    inputs = []
    for i in range(5):
        path = tmp_path / f"bench{i}.json"
        _fake_report(path, 0.5 + i * 0.1)
        inputs.append(str(path))
    out = tmp_path / "spider.svg"
    rc = main(["report", "--inputs", ",".join(inputs), "--style", "spider",
               "--out", str(out)])
    assert rc == 0
    svg = out.read_text()
    assert svg.count("<line ") == 5
    assert svg.count("<text ") == 5
    for i in range(5):
        assert f"bench{i}" in svg


def test_report_table_lists_all_inputs(tmp_path):
    paths = []
    for i in range(3):
        path = tmp_path / f"run{i}.json"
        _fake_report(path, 0.6 + 0.1 * i)
        paths.append(str(path))
    out = tmp_path / "table.md"
    rc = main(["report", "--inputs", ",".join(paths), "--style", "table",
               "--out", str(out)])
    assert rc == 0
    table = out.read_text().splitlines()
    assert table[0].startswith("| report |")
    assert len(table) == 5  # header, separator, 3 rows


def test_run_manifests_written_with_stable_input_hashes(workspace, tmp_path):
    manifest_path = workspace / "plan.jsonl.run.json"
    assert manifest_path.exists()
    first = json.loads(manifest_path.read_text())
    assert first["command"] == "plan"
    assert first["tool_version"]
    assert str(workspace / "catalog.json") in first["input_hashes"]

    out = tmp_path / "replay.jsonl"
    main(["plan", "--catalog", str(workspace / "catalog.json"),
          "--templates", "name", "--per-class", "2", "--out", str(out)])
    second = json.loads((tmp_path / "replay.jsonl.run.json").read_text())
    key = str(workspace / "catalog.json")
    assert second["input_hashes"][key] == first["input_hashes"][key]


def test_missing_input_reports_clean_error(tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(tmp_path / "nothing"),
               "--dataset", str(tmp_path / "nothing"), "--topk", "1",
               "--out", str(tmp_path / "r.json")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "missing_input"


def test_probe_rejects_mismatched_dims(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a = tmp_path / "a.bin"
    b = tmp_path / "b.bin"
    write_features(FeatureMatrix(X=rng.normal(size=(20, 3)).astype(np.float32),
                                 labels=(np.arange(20) % 2).astype(np.int32)), a)
    write_features(FeatureMatrix(X=rng.normal(size=(20, 4)).astype(np.float32),
                                 labels=(np.arange(20) % 2).astype(np.int32)), b)
    rc = main(["probe", "--train-feats", str(a), "--test-feats", str(b),
               "--trials", "25", "--out", str(tmp_path / "r.json")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "probe_error"
