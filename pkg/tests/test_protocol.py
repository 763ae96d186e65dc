import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import clipdg.protocol as protocol
from clipdg.core import validate_config
from clipdg.data import AccessLog
from clipdg.metrics import compute_metrics, confusion_matrix
from clipdg.protocol import (
    ConfusionMatrix,
    RunRecord,
    ValPoint,
    aggregate_runs,
    column_maxima,
    evaluate_checkpoint,
    format_cell,
    load_checkpoint,
    make_registry,
    mean_std,
    render_table,
    run_multi_source,
    run_single_source,
    run_single_trial,
    save_checkpoint,
    select_model,
)
from clipdg.transforms import NormalizeParams
from helpers import raw_config


def _config(**kw):
    return validate_config(raw_config(**kw))


# ---------------------------------------------------------------- metrics

def test_perfect_predictions():
    m = compute_metrics([0, 1, 2, 3, 4], [0, 1, 2, 3, 4], 5)
    assert m["accuracy"] == m["macro_f1"] == 1.0


def test_metrics_worked_example():
    # class 0: tp 1, fp 1, fn 1 -> F1 0.5; class 1: tp 1, fp 1, fn 1 -> 0.5; class 2 absent but predicted.
    m = compute_metrics([0, 1, 1, 2], [0, 0, 1, 1], 3)
    assert m["accuracy"] == 0.5
    assert m["present_classes"] == [0, 1]
    assert m["macro_f1"] == pytest.approx((2 / 3 + 0.5) / 2)
    assert m["per_class_f1"][2] == 0.0


def test_missing_class_excluded_from_macro_average():
    m = compute_metrics([0, 1, 2, 3, 0], [0, 1, 2, 3, 0], 5)
    assert m["macro_f1"] == 1.0 and 4 not in m["present_classes"]


@pytest.mark.parametrize("preds, labels", [([0, 1], [0]), ([], []), ([0, 5], [0, 1]), ([[0]], [[0]])])
def test_metric_input_errors(preds, labels):
    with pytest.raises(ValueError):
        compute_metrics(preds, labels, 5)


def test_confusion_matrix_type():
    cm = ConfusionMatrix.from_predictions([0, 1, 1], [0, 1, 0], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 1]] and cm.total == 3
    with pytest.raises(ValueError):
        ConfusionMatrix(np.array([[1, -1], [0, 0]]))
    assert np.array_equal(confusion_matrix([0, 1, 1], [0, 1, 0], 2), cm.counts)


# ---------------------------------------------------------------- selection

def test_select_model_examples():
    assert select_model([0.3, 0.5, 0.5, 0.4]) == 1
    assert select_model([ValPoint(10, 0.9, 0.2), ValPoint(20, 0.1, 0.7)]) == 1
    with pytest.raises(ValueError):
        select_model([])


@given(st.lists(st.integers(0, 5).map(lambda v: v / 5), min_size=1, max_size=30))
def test_select_model_is_first_argmax(scores):
    assert select_model(scores) == scores.index(max(scores))


# ---------------------------------------------------------------- one trial

def test_trial_never_reads_the_target():
    cfg = _config(steps=20, eval_interval=5, data__target="synth3")
    log = AccessLog()
    trial = run_single_trial(cfg, 0, make_registry(cfg, log))
    assert log.domains_read(["train", "select"]) == {"synth0", "synth1", "synth2"}
    assert log.reads("synth3") == 0
    assert [h.step for h in trial.history] == [5, 10, 15, 20]
    assert trial.selected_step == trial.history[trial.selected_index].step


def test_trial_is_deterministic():
    cfg = _config(steps=10, eval_interval=5, data__target="synth3", augment=True)
    a = run_single_trial(cfg, 3, make_registry(cfg))
    b = run_single_trial(cfg, 3, make_registry(cfg))
    assert a.history == b.history
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(np.array_equal(sa[k].numpy(), sb[k].numpy()) for k in sa)


def test_zero_shot_trial_has_one_history_point():
    cfg = _config(strategy="zero_shot", data__target="synth3")
    trial = run_single_trial(cfg, 0, make_registry(cfg))
    assert len(trial.history) == 1 and trial.selected_step == 0


def test_trial_with_fewer_steps_than_interval_still_selects():
    cfg = _config(steps=3, eval_interval=10, data__target="synth3")
    trial = run_single_trial(cfg, 0, make_registry(cfg))
    assert [h.step for h in trial.history] == [3]


# ---------------------------------------------------------------- runners

def _count_trials(monkeypatch):
    calls = []
    real = protocol.run_single_trial

    def counting(config, seed, registry, sources=None):
        calls.append((tuple(config.source_domains), seed))
        return real(config, seed, registry, sources)

    monkeypatch.setattr(protocol, "run_single_trial", counting)
    return calls


def test_multi_source_runs_once_per_target_and_seed(monkeypatch):
    calls = _count_trials(monkeypatch)
    cfg = _config(steps=4, eval_interval=2, seeds=(0, 1))
    report = run_multi_source(cfg)
    assert len(calls) == report.training_runs == 4 * 2
    assert len(report.runs) == 8
    assert {r.target for r in report.runs} == {"synth0", "synth1", "synth2", "synth3"}
    assert all(r.target not in r.sources for r in report.runs)


def test_two_domain_table_shape():
    cfg = _config(n_domains=2, steps=2, eval_interval=1)
    report = run_multi_source(cfg)
    table = report.table()
    assert table[0] == ["strategy", "synth0", "synth1", "Avg"]
    assert len(table) == 2
    assert report.config_hash == validate_config(report.config).config_hash()


def test_single_source_rows_and_cells(monkeypatch):
    calls = _count_trials(monkeypatch)
    cfg = _config(n_domains=3, steps=2, eval_interval=1, seeds=(0, 1))
    report = run_single_source(cfg)
    assert len(calls) == 3 * 2
    assert len(report.runs) == 3 * 2 * 2
    table = report.table()
    assert table[0] == ["strategy", "source", "synth0", "synth1", "synth2", "Avg"]
    assert len(table) == 1 + 3
    for row in table[1:]:
        assert row[2:5].count("-") == 1 and row[2 + int(row[1][-1])] == "-"


def test_mean_std_population():
    m, s = mean_std([40, 41, 40.5])
    assert m == pytest.approx(40.5) and s == pytest.approx(0.408, abs=1e-3)
    assert format_cell([0.40, 0.41, 0.405]) == "40.5 (0.4)"


def _rec(target, seed, f1, strategy="erm", mode="multi_source", source=None, K=5):
    sources = [source] if source else ["x"]
    return RunRecord(mode, strategy, "h", sources, target, seed, 1, K,
                     {"macro_f1": f1, "accuracy": f1, "weighted_f1": f1}, [])


def test_avg_column_averages_targets_within_seed():
    recs = [_rec("a", 0, 0.2), _rec("b", 0, 0.6), _rec("a", 1, 0.4), _rec("b", 1, 0.4)]
    rows = aggregate_runs(recs)
    avg = rows["erm"]["avg"]["macro_f1"]
    assert avg["values"] == pytest.approx([0.4, 0.4])
    assert avg["std"] == pytest.approx(0.0)
    assert render_table(rows, ["a", "b"])[1] == ["erm", "30.0 (10.0)", "50.0 (10.0)", "40.0 (0.0)"]


def test_bold_marks_column_maxima():
    rows = aggregate_runs([_rec("a", 0, 0.5), _rec("a", 0, 0.7, strategy="cooplvt")])
    assert column_maxima(rows, ["a"]) == {"a": ["cooplvt"], "Avg": ["cooplvt"]}


def test_aggregate_rejects_mixed_class_counts():
    with pytest.raises(ValueError):
        aggregate_runs([_rec("a", 0, 0.5), _rec("b", 0, 0.5, K=3)])


def test_run_record_round_trip():
    r = _rec("a", 2, 0.3)
    assert RunRecord.from_dict(r.to_dict()) == r


# ---------------------------------------------------------------- evaluation and checkpoints

def _trained(strategy="erm", **kw):
    cfg = _config(strategy=strategy, shift=0.0, spc=20, steps=60, eval_interval=20, b=8, lr=1e-2,
                  data__target="synth3", **kw)
    reg = make_registry(cfg)
    return cfg, reg, run_single_trial(cfg, 0, reg)


def test_evaluate_checkpoint_deterministic_and_accurate():
    cfg, reg, trial = _trained()
    target = reg.view("test").get("synth3")
    a = evaluate_checkpoint(trial.model, target, cfg.normalize)
    b = evaluate_checkpoint(trial.model, target, cfg.normalize)
    assert np.array_equal(a.predictions, b.predictions)
    assert a.metrics["accuracy"] >= 0.95


def test_evaluation_ignores_augmentation_settings():
    cfg, reg, trial = _trained()
    target = reg.view("test").get("synth3")
    base = evaluate_checkpoint(trial.model, target, cfg.normalize).predictions
    again = evaluate_checkpoint(trial.model, target, NormalizeParams(cfg.normalize.side, cfg.normalize.mean,
                                                                     cfg.normalize.std)).predictions
    assert np.array_equal(base, again)


def test_evaluate_rejects_unknown_labels():
    cfg, reg, trial = _trained()
    target = reg.view("test").get("synth3")
    trial.model.n_classes_ = 3
    with pytest.raises(ValueError, match="trained for 3 classes"):
        evaluate_checkpoint(trial.model, target, cfg.normalize)


@pytest.mark.parametrize("strategy", ["erm", "cooplvt"])
def test_checkpoint_round_trip(tmp_path, strategy):
    cfg, reg, trial = _trained(strategy)
    path = save_checkpoint(tmp_path / "ck.pt", trial.model, cfg, trial.selected_step)
    model, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    target = reg.view("test").get("synth3")
    assert np.array_equal(evaluate_checkpoint(model, target, cfg.normalize).predictions,
                          evaluate_checkpoint(trial.model, target, cfg.normalize).predictions)
