import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipdg.core import (
    ClassLabel,
    ConfigError,
    apply_overrides,
    class_labels,
    derive_rng,
    derive_seed,
    total_batch_size,
    validate_config,
)
from clipdg.rng import RngState
from helpers import raw_config


# ---------------------------------------------------------------- batch-size law

@pytest.mark.parametrize("b, d_tr, expected", [(32, 3, 96), (1, 1, 1), (8, 2, 16)])
def test_total_batch_size_examples(b, d_tr, expected):
    assert total_batch_size(b, d_tr) == expected


@given(st.integers(1, 10_000), st.integers(1, 64))
def test_total_batch_size_is_multiplication(b, d_tr):
    assert total_batch_size(b, d_tr) == b * d_tr


@pytest.mark.parametrize("b, d_tr", [(0, 3), (32, 0), (-1, 2), (1.5, 2), (True, 3), ("4", 2)])
def test_total_batch_size_rejects_non_positive_or_non_integer(b, d_tr):
    with pytest.raises(ValueError):
        total_batch_size(b, d_tr)


# ---------------------------------------------------------------- labels

def test_class_labels_unique_and_indexed():
    labels = class_labels(["No DR", "mild DR"])
    assert [(c.index, c.name) for c in labels] == [(0, "No DR"), (1, "mild DR")]
    with pytest.raises(ValueError):
        class_labels(["a", "a"])
    with pytest.raises(ValueError):
        ClassLabel(-1, "x")


# ---------------------------------------------------------------- config validation

def test_target_in_sources_rejected():
    raw = raw_config()
    raw["data"]["target"] = "synth0"
    raw["data"]["sources"] = ["synth0", "synth1"]
    with pytest.raises(ConfigError, match="target_domain must not appear in source_domains") as exc:
        validate_config(raw)
    assert any(path == "data.target" for path, _ in exc.value.problems)


def test_cooplvt_defaults_filled():
    raw = raw_config("cooplvt")
    cfg = validate_config(raw)
    assert cfg.n_p == 4 and cfg.mlp_layers == 2
    again = validate_config(cfg.to_dict())
    assert again == cfg


def test_valid_erm_config_echoes_inputs():
    raw = raw_config("erm", steps=123, b=7, lr=2e-4, seeds=(3, 4))
    raw["data"]["target"] = "synth3"
    cfg = validate_config(raw)
    assert cfg.strategy == "erm" and cfg.steps == 123 and cfg.b == 7 and cfg.lr == 2e-4
    assert cfg.trial_seeds == (3, 4)
    assert cfg.target_domain == "synth3"
    assert cfg.source_domains == ("synth0", "synth1", "synth2")
    assert validate_config(cfg.to_dict()) == cfg


def test_published_training_defaults():
    raw = raw_config()
    raw["strategy"] = {}
    del raw["experiment"]["seeds"]
    cfg = validate_config(raw)
    assert (cfg.b, cfg.lr, cfg.weight_decay, cfg.optimizer) == (32, 5e-6, 0.0, "adamw")
    assert cfg.val_fraction == 0.2
    assert cfg.trial_seeds == (0, 1, 2)


@pytest.mark.parametrize("mutate, path", [
    (lambda r: r["experiment"].update(strategy="sgd_magic"), "experiment.strategy"),
    (lambda r: r.pop("encoder"), "encoder"),
    (lambda r: r["strategy"].update(b=0), "strategy.b"),
    (lambda r: r["data"].update(val_fraction=1.0), "data.val_fraction"),
    (lambda r: r["strategy"].update(n_p=0) or r["experiment"].update(strategy="cooplvt"), "strategy.n_p"),
    (lambda r: r["data"].update(domains=["nowhere"]), "data.domains"),
])
def test_validation_reports_field_path(mutate, path):
    raw = raw_config()
    mutate(raw)
    with pytest.raises(ConfigError) as exc:
        validate_config(raw)
    assert any(p == path for p, _ in exc.value.problems), exc.value.problems


def test_all_problems_reported_together():
    raw = raw_config()
    raw["strategy"]["b"] = -3
    raw["strategy"]["lr"] = "fast"
    raw["experiment"]["strategy"] = "nope"
    with pytest.raises(ConfigError) as exc:
        validate_config(raw)
    paths = {p for p, _ in exc.value.problems}
    assert {"strategy.b", "strategy.lr", "experiment.strategy"} <= paths


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-5, 5) | st.floats(allow_nan=True) | st.text(max_size=6),
    lambda kids: st.lists(kids, max_size=3) | st.dictionaries(st.text(max_size=8), kids, max_size=4),
    max_leaves=12,
)


@settings(max_examples=300, deadline=None)
@given(json_values)
def test_validation_is_total_on_arbitrary_documents(doc):
    try:
        validate_config(doc)
    except ConfigError:
        pass


_PATHS = ["experiment.strategy", "experiment.seeds", "experiment.steps", "data.synth", "data.synth.n_classes",
          "data.domains", "data.target", "data.augment", "data.mean", "encoder", "encoder.kind", "encoder.d_i",
          "strategy.b", "strategy.lr", "strategy.n_p", "strategy.prompt_set", "output.dir"]


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(_PATHS), json_values)
def test_validation_is_total_on_mutated_configs(path, value):
    doc = apply_overrides(raw_config(), {path: value})
    try:
        cfg = validate_config(doc)
    except ConfigError:
        return
    assert validate_config(cfg.to_dict()) == cfg


def test_config_hash_ignores_output_and_workers():
    a = validate_config(raw_config())
    b = validate_config(apply_overrides(raw_config(), {"output.dir": "elsewhere", "experiment.workers": 4}))
    c = validate_config(apply_overrides(raw_config(), {"strategy.lr": 0.5}))
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_apply_overrides_does_not_mutate_input():
    raw = raw_config()
    out = apply_overrides(raw, {"strategy.b": 9, "strategy.lr": None, "new.section.key": 1})
    assert out["strategy"]["b"] == 9 and raw["strategy"]["b"] == 4
    assert out["strategy"]["lr"] == raw["strategy"]["lr"]
    assert out["new"]["section"]["key"] == 1


# ---------------------------------------------------------------- rng

def test_derive_rng_same_inputs_same_stream():
    assert np.array_equal(derive_rng(7, "sampler").random(100), derive_rng(7, "sampler").random(100))


def test_derive_rng_consumers_differ():
    assert not np.array_equal(derive_rng(7, "sampler").random(100), derive_rng(7, "augmenter").random(100))


def test_derive_rng_seeds_differ():
    assert not np.array_equal(derive_rng(7, "sampler").random(100), derive_rng(8, "sampler").random(100))


def test_rng_state_is_pure():
    s = RngState(3, "initializer")
    assert s.int_seed() == RngState(3, "initializer").int_seed() == derive_seed(3, "initializer")
    assert s.child("head") == RngState(3, "initializer/head")
    g1, g2 = s.torch_generator(), RngState(3, "initializer").torch_generator()
    import torch
    assert torch.equal(torch.rand(5, generator=g1), torch.rand(5, generator=g2))
    with pytest.raises(ValueError):
        RngState(3, "")
