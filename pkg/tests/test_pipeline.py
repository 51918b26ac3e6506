from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from temprec import model as M
from temprec.evaluation import MetricReport
from temprec.pipeline import (
    VARIANTS,
    ConfigError,
    ExperimentConfig,
    compare,
    evaluate_checkpoint,
    explain,
    prepare,
    ratio_summary,
    relative_gain,
    run_matrix,
    run_seeds,
    run_variant,
)


@pytest.fixture
def prep(small_config):
    return prepare(small_config, ("short", "long", "general"))


def test_config_toml_roundtrip(small_config, tmp_path):
    small_config.dump(tmp_path / "c.toml")
    again = ExperimentConfig.load(tmp_path / "c.toml")
    assert again == small_config


def test_config_rejects_unknown_keys_and_variants():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"train": {"learning_rat": 0.1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"colour": "red"})
    with pytest.raises(ConfigError):
        ExperimentConfig(variant="bpr")


def test_config_seed_propagates():
    cfg = ExperimentConfig.from_dict({"seed": 7, "synth": {"n_users": 10}})
    assert cfg.train.seed == 7 and cfg.synth.seed == 7
    assert cfg.with_seed(3).synth.seed == 3


def test_popularity_has_no_training_phase(small_config, prep, tmp_path):
    res = run_variant(small_config.with_variant("popularity"), prep, tmp_path)
    assert res.train_report is None and res.params is None
    assert (tmp_path / "metrics.json").exists()
    assert not (tmp_path / "checkpoint.bin").exists()


def test_proposed_writes_all_artifacts_deterministically(small_config, prep, tmp_path):
    a = run_variant(small_config, prep, tmp_path / "a")
    run_variant(small_config, prep, tmp_path / "b")
    for name in ("config.snapshot", "checkpoint.bin", "train_report.json", "metrics.json", "per_user.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.train_report.epochs_run >= 1


def test_st_only_checkpoint_has_no_attention(small_config, prep, tmp_path):
    run_variant(small_config.with_variant("st_only"), prep, tmp_path)
    params, header = M.load_checkpoint(tmp_path / "checkpoint.bin")
    assert "W_a" not in params.tensors and "W1" in params.tensors
    assert header["variant"] == "st_only"


@pytest.mark.parametrize("variant", ["mf", "tempfusion", "dot", "nots", "lt_only"])
def test_every_variant_runs(small_config, prep, variant):
    res = run_variant(small_config.with_variant(variant), prep)
    assert res.metrics.n_users > 0
    assert all(0.0 <= x <= 1.0 for x in res.metrics.aggregate.values())


def test_saved_checkpoint_reproduces_test_metrics(small_config, prep, tmp_path):
    for variant in ("proposed", "mf"):
        res = run_variant(small_config.with_variant(variant), prep, tmp_path / variant)
        again = evaluate_checkpoint(tmp_path / variant / "checkpoint.bin", prep, small_config)
        assert again.aggregate == pytest.approx(res.metrics.aggregate, abs=1e-6)


def test_checkpoint_from_other_dataset_is_rejected(small_config, prep, tmp_path):
    run_variant(small_config, prep, tmp_path)
    other = prepare(small_config.with_seed(99), ("short", "long"))
    with pytest.raises(ConfigError):
        evaluate_checkpoint(tmp_path / "checkpoint.bin", other, small_config)


def test_gain_rounds_to_seventeen_percent():
    assert round(100 * relative_gain(0.0132, 0.0113)) == 17


def report(system, values, fingerprint="x"):
    per_user = {f"u{k}": {"recall@10": v, "ndcg@10": v} for k, v in enumerate(values)}
    return MetricReport(system, (10,), per_user, extra={"dataset_fingerprint": fingerprint})


def test_variant_against_itself():
    rep = report("centric", [0.1, 0.5, 0.2])
    res = compare({"centric": rep, "proposed": report("proposed", [0.1, 0.5, 0.2])})
    assert res.gains["proposed"]["recall@10"] == 0.0
    assert res.pvalues["proposed"]["recall@10"] == 1.0


def test_compare_rejects_mismatched_fingerprints():
    with pytest.raises(ConfigError):
        compare({"centric": report("centric", [0.1, 0.2]), "proposed": report("proposed", [0.1, 0.2], "y")})


def test_full_matrix_shape(small_config, tmp_path):
    res = run_matrix(small_config, VARIANTS, tmp_path)
    assert len(res.reports) == 9
    assert len(res.pvalues) == 8 and "centric" not in res.pvalues
    data = json.loads((tmp_path / "matrix.json").read_text())
    assert set(data["runs"]) == set(VARIANTS)


def test_seed_matrix_pools_users(small_config, tmp_path):
    res = run_seeds(small_config, [0, 1], ["proposed", "centric"], tmp_path)
    data = json.loads((tmp_path / "matrix.json").read_text())
    assert data["seeds"] == [0, 1]
    means = [res.per_seed[s].reports["proposed"].aggregate["ndcg@10"] for s in (0, 1)]
    assert data["aggregate"]["proposed"]["ndcg@10"] == pytest.approx(np.mean(means))
    assert res.pooled("proposed").n_users == sum(res.per_seed[s].reports["proposed"].n_users for s in (0, 1))
    assert (tmp_path / "seed-1" / "proposed" / "metrics.json").exists()


def test_ratio_summary():
    assert ratio_summary(0.5, 0.5) == "50% recent tastes, 50% long-standing preferences"
    assert ratio_summary(0.734, 0.266) == "73% recent tastes, 27% long-standing preferences"


def zero_attention_checkpoint(small_config, prep, path):
    res = run_variant(small_config, prep)
    res.params.tensors["W_a"][:] = 0.0
    M.save_checkpoint(path, res.params, prep.encoder.fingerprint, variant="proposed")


def test_explain_with_zero_attention(small_config, prep, tmp_path):
    zero_attention_checkpoint(small_config, prep, tmp_path / "c.bin")
    user = prep.dataset.users[0]
    rec = explain(tmp_path / "c.bin", prep, user, k=5)
    assert rec.summary == "50% recent tastes, 50% long-standing preferences"
    assert rec.alpha_short + rec.alpha_long == 1.0
    scores = [t["score"] for t in rec.top_items]
    assert len(scores) == 5 and scores == sorted(scores, reverse=True)
    assert rec.short_profile == prep.profiles.text(user, "short")


def test_explain_equal_profiles_split_evenly(small_config, prep, tmp_path):
    run_variant(small_config, prep, tmp_path)
    user = prep.dataset.users[1]
    row = prep.dataset.users.index(user)
    prep.profile_vectors["long"][row] = prep.profile_vectors["short"][row]
    rec = explain(tmp_path / "checkpoint.bin", prep, user)
    assert rec.alpha_short == rec.alpha_long == 0.5


def test_explain_refuses_models_without_attention(small_config, prep, tmp_path):
    run_variant(small_config.with_variant("st_only"), prep, tmp_path)
    with pytest.raises(ConfigError, match="proposed, tempfusion, dot"):
        explain(tmp_path / "checkpoint.bin", prep, prep.dataset.users[0])


def test_explain_unknown_user(small_config, prep, tmp_path):
    zero_attention_checkpoint(small_config, prep, tmp_path / "c.bin")
    with pytest.raises(ConfigError):
        explain(tmp_path / "c.bin", prep, "nobody")


def test_runs_hold_hyperparameters_across_variants(small_config):
    a = small_config.with_variant("dot")
    assert dataclasses.replace(a, variant="proposed") == small_config


def test_invalid_section_values_become_config_errors():
    with pytest.raises(ConfigError, match=r"\[train\]"):
        ExperimentConfig.from_dict({"train": {"learning_rate": -1.0}})
