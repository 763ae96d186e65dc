import json

import pytest
import yaml

from clipdg.cli import DATA_ROOT_ENV, main
from helpers import raw_config


def _write_config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


@pytest.fixture
def toy_config(tmp_path):
    return _write_config(tmp_path / "toy.yaml", raw_config(n_domains=3, steps=4, eval_interval=2, spc=6))


def _run_metrics(out):
    return {f.name: json.loads(f.read_text())["metrics"] for f in sorted((out / "runs").glob("*.json"))}


def test_multi_source_writes_runs_and_report(tmp_path, toy_config, capsys):
    out = tmp_path / "ms"
    assert main(["multi-source", "--config", toy_config, "--out", str(out)]) == 0
    assert sorted(f.name for f in (out / "runs").iterdir()) == [
        "erm__synth0__seed0.json", "erm__synth1__seed0.json", "erm__synth2__seed0.json"]
    report = json.loads((out / "report.json").read_text())
    assert report["provenance"]["argv"][0] == "multi-source"
    assert (out / "report.csv").read_text().splitlines()[0] == "strategy,synth0,synth1,synth2,Avg"
    assert "Avg" in capsys.readouterr().out


def test_existing_results_need_overwrite(tmp_path, toy_config, capsys):
    out = tmp_path / "ms"
    args = ["multi-source", "--config", toy_config, "--out", str(out), "--target", "synth1"]
    assert main(args) == 0
    assert main(args) == 2
    assert "--overwrite" in capsys.readouterr().err
    assert main(args + ["--overwrite"]) == 0


def test_missing_config(tmp_path, capsys):
    ghost = tmp_path / "nope.yaml"
    assert main(["multi-source", "--config", str(ghost)]) == 2
    assert str(ghost) in capsys.readouterr().err


def test_invalid_config_reports_field(tmp_path, capsys):
    doc = raw_config()
    doc["data"]["synth"]["n_classes"] = 1
    cfg = _write_config(tmp_path / "bad.yaml", doc)
    assert main(["synth-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 2
    assert "n_classes" in capsys.readouterr().err


def test_flag_overrides_reach_the_run(tmp_path, toy_config):
    out = tmp_path / "o"
    assert main(["multi-source", "--config", toy_config, "--out", str(out), "--target", "synth0",
                 "--strategy", "cooplvt", "--np", "2", "--steps", "2", "--seeds", "4", "--b", "3"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["strategy"]["n_p"] == 2 and report["config"]["experiment"]["seeds"] == [4]
    assert (out / "runs" / "cooplvt__synth0__seed4.json").exists()


def test_zero_shot_families(tmp_path, toy_config, capsys):
    out = tmp_path / "zs"
    assert main(["zero-shot", "--config", toy_config, "--out", str(out), "--families", "I,II"]) == 0
    first = json.loads((out / "zero_shot.json").read_text())["families"]
    assert set(first) == {"I", "II"}
    printed = capsys.readouterr().out
    assert "prompt I synth0" in printed and "prompt II synth0" in printed
    assert main(["zero-shot", "--config", toy_config, "--out", str(out), "--families", "I,II", "--overwrite"]) == 0
    assert json.loads((out / "zero_shot.json").read_text())["families"] == first


def test_zero_shot_unknown_family(tmp_path, toy_config, capsys):
    assert main(["zero-shot", "--config", toy_config, "--out", str(tmp_path), "--families", "III"]) == 2
    assert "unknown prompt family" in capsys.readouterr().err


def _write_run(path, target, seed, f1, K=5, strategy="erm"):
    path.mkdir(parents=True, exist_ok=True)
    rec = {"mode": "multi_source", "strategy": strategy, "config_hash": "h", "sources": ["x"], "target": target,
           "seed": seed, "selected_step": 1, "n_classes": K,
           "metrics": {"macro_f1": f1, "accuracy": f1, "weighted_f1": f1}, "val_history": []}
    (path / f"{strategy}__{target}__seed{seed}.json").write_text(json.dumps(rec))


def test_report_aggregates_runs(tmp_path, capsys):
    runs = tmp_path / "runs"
    for seed, f1 in enumerate([0.40, 0.41, 0.405]):
        _write_run(runs, "A", seed, f1)
        _write_run(runs, "B", seed, 0.40)
    _write_run(runs, "A", 0, 0.30, strategy="zero_shot")
    assert main(["report", str(runs)]) == 0
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "strategy,A,B,Avg"
    assert "erm,40.5 (0.4),40.0 (0.0)" in lines[1]
    meta = json.loads((tmp_path / "report.meta.json").read_text())
    assert meta["bold"]["A"] == ["erm"] and meta["n_runs"] == 7


def test_report_without_runs(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    assert "no runs found" in capsys.readouterr().err


def test_report_with_inconsistent_class_counts(tmp_path, capsys):
    _write_run(tmp_path / "runs", "A", 0, 0.5, K=5)
    _write_run(tmp_path / "runs", "B", 0, 0.5, K=3)
    assert main(["report", str(tmp_path / "runs")]) == 1
    assert "class" in capsys.readouterr().err


def test_synth_data_layout_is_reproducible(tmp_path, toy_config):
    out = tmp_path / "data"
    assert main(["synth-data", "--config", toy_config, "--out", str(out)]) == 0
    manifests = {d: (out / d / "labels.csv").read_bytes() for d in ("synth0", "synth1", "synth2")}
    assert all(m.startswith(b"path,label\n") for m in manifests.values())
    assert main(["synth-data", "--config", toy_config, "--out", str(out), "--overwrite"]) == 0
    assert {d: (out / d / "labels.csv").read_bytes() for d in manifests} == manifests


def test_data_root_from_environment(tmp_path, toy_config, monkeypatch):
    data = tmp_path / "data"
    assert main(["synth-data", "--config", toy_config, "--out", str(data)]) == 0
    doc = raw_config(n_domains=3, steps=2, eval_interval=1)
    doc["data"] = {"root": str(tmp_path / "missing"), "domains": ["synth0", "synth1", "synth2"],
                   "class_names": [f"class_{k}" for k in range(5)], "image_side": 8}
    cfg = _write_config(tmp_path / "real.yaml", doc)
    out = tmp_path / "r"
    assert main(["multi-source", "--config", cfg, "--out", str(out), "--target", "synth2"]) == 1
    monkeypatch.setenv(DATA_ROOT_ENV, str(data))
    assert main(["multi-source", "--config", cfg, "--out", str(out), "--target", "synth2", "--overwrite"]) == 0


def test_train_then_eval(tmp_path, capsys):
    doc = raw_config(n_domains=3, shift=0.0, spc=20, steps=60, eval_interval=20, b=8, lr=1e-2)
    cfg = _write_config(tmp_path / "c.yaml", doc)
    out = tmp_path / "t"
    assert main(["train", "--config", cfg, "--out", str(out), "--target", "synth2"]) == 0
    train = json.loads((out / "train.json").read_text())
    assert train["sources"] == ["synth0", "synth1"] and train["target"] == "synth2"
    ckpt = out / "checkpoints" / "seed0.pt"
    assert main(["eval", "--checkpoint", str(ckpt), "--target", "synth2", "--out", str(out)]) == 0
    metrics = json.loads((out / "eval.json").read_text())["metrics"]["synth2"]
    assert metrics["accuracy"] >= 0.95


def test_runs_are_reproducible(tmp_path, toy_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["multi-source", "--config", toy_config, "--out", str(a)]) == 0
    assert main(["multi-source", "--config", toy_config, "--out", str(b)]) == 0
    assert _run_metrics(a) == _run_metrics(b)
