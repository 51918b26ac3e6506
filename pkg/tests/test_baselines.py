from __future__ import annotations

import numpy as np
import pytest

from temprec.baselines import (
    MfParams,
    MfScorer,
    PopularityScorer,
    centric_profile,
    mf_score,
    mf_train,
    popularity_rank,
    tempfusion_profiles,
)
from temprec.ingest import Interaction, ItemRecord, SplitDataset
from temprec.model import attention_weights, fuse
from temprec.trainer import TrainConfig

SIG_2 = 0.8807970779778823


def test_centric_examples():
    e = np.array([0.2, -0.7, 1.5])
    assert np.array_equal(centric_profile([e]), e)
    assert not centric_profile([e, -e]).any()
    assert centric_profile([[1.0, 0.0], [0.0, 1.0]]).tolist() == [0.5, 0.5]
    with pytest.raises(ValueError):
        centric_profile([])


def history(n: int) -> list[Interaction]:
    return [Interaction("u", f"i{k}", k) for k in range(n)]


def test_tempfusion_single_event():
    v = np.array([0.3, 0.4])
    rs, rl = tempfusion_profiles(history(1), {"i0": v})
    assert np.array_equal(rs, v) and np.array_equal(rl, v)


def test_tempfusion_uses_last_three_of_ten():
    embeds = {f"i{k}": np.array([float(k), 1.0]) for k in range(10)}
    rs, rl = tempfusion_profiles(history(10), embeds, 0.3)
    assert rs.tolist() == [8.0, 1.0]
    assert rl.tolist() == [4.5, 1.0]


def test_tempfusion_short_follows_topic_shift():
    old, new = np.array([1.0, 0.0, 0.1]), np.array([0.0, 1.0, 0.1])
    embeds = {f"i{k}": (old if k < 7 else new) for k in range(10)}
    rs, rl = tempfusion_profiles(history(10), embeds, 0.3)
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)  # noqa: E731
    assert cos(rs, new) > cos(rl, new)


def test_tempfusion_full_fraction_equals_centric_for_any_attention():
    rng = np.random.default_rng(0)
    embeds = {f"i{k}": rng.normal(size=4) for k in range(6)}
    rs, rl = tempfusion_profiles(history(6), embeds, 1.0)
    centric = centric_profile(list(embeds.values()))
    assert np.allclose(rs, centric, atol=1e-15) and np.allclose(rl, centric, atol=1e-15)
    for _ in range(5):
        fused = fuse(rs, rl, attention_weights(rs, rl, rng.normal(size=4)))[0]
        assert np.allclose(fused, centric, atol=1e-12)


def test_popularity_examples():
    log = [Interaction("u", i, t) for t, i in enumerate("aaabcc")]
    assert popularity_rank(log) == ["a", "c", "b"]
    assert popularity_rank([Interaction("u", i, 0) for i in "cab"]) == ["a", "b", "c"]
    assert popularity_rank([]) == []


def test_popularity_is_user_independent():
    log = [Interaction("u", i, t) for t, i in enumerate("aaabcc")]
    scorer = PopularityScorer(log, ["a", "b", "c", "d"])
    scores = scorer.score_users(["x", "y"])
    assert np.array_equal(scores[0], scores[1])
    assert scores[0].tolist() == [3.0, 1.0, 2.0, 0.0]


def zero_mf(users=("u1", "u2"), items=("a", "b")) -> MfParams:
    return MfParams(list(users), list(items), np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(2), np.zeros(2), 0.0)


def test_mf_zero_parameters_score_one_half():
    p = zero_mf()
    assert all(mf_score(p, u, i) == 0.5 for u in ("u1", "u2") for i in ("a", "b"))
    assert np.all(MfScorer(p, ["a", "b"]).score_users(["u1"]) == 0.5)


def test_mf_fallbacks_and_closed_form():
    p = zero_mf()
    p.global_bias, p.item_bias[1], p.user_bias[0] = 0.5, 0.25, 1.0
    assert mf_score(p, "stranger", "b") == pytest.approx(1 / (1 + np.exp(-0.75)), abs=1e-15)
    assert mf_score(p, "u1", "b") == pytest.approx(1 / (1 + np.exp(-1.75)), abs=1e-15)
    assert mf_score(p, "u1", "new-item") == pytest.approx(1 / (1 + np.exp(-1.5)), abs=1e-15)
    q = zero_mf()
    q.P[0] = [1.0, 1.0, 0.0]
    q.Q[0] = [1.0, 1.0, 5.0]
    assert mf_score(q, "u1", "a") == pytest.approx(SIG_2, abs=1e-15)
    assert MfScorer(q, ["a", "b", "c"]).score_users(["u1"])[0, 0] == pytest.approx(SIG_2, abs=1e-15)


def block_dataset() -> SplitDataset:
    cat = {i: ItemRecord(i, i, i) for i in ("i1", "i2")}
    train = {"u1": (Interaction("u1", "i1", 0),), "u2": (Interaction("u2", "i2", 0),)}
    return SplitDataset(train, {}, {}, cat)


def test_mf_learns_block_diagonal():
    cfg = TrainConfig(max_epochs=200, patience=200, batch_size=4, learning_rate=1e-2, negatives_per_positive=1)
    params, report = mf_train(block_dataset(), cfg, factors=4)
    assert report.epochs_run == 200
    assert mf_score(params, "u1", "i1") > mf_score(params, "u1", "i2")
    assert mf_score(params, "u2", "i2") > mf_score(params, "u2", "i1")


@pytest.mark.filterwarnings("ignore:some users have fewer")
def test_mf_is_deterministic_and_roundtrips(tmp_path):
    cfg = TrainConfig(max_epochs=5, patience=5, seed=3)
    a, _ = mf_train(block_dataset(), cfg, factors=4)
    b, _ = mf_train(block_dataset(), cfg, factors=4)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])
    a.save(tmp_path / "mf.bin")
    c = MfParams.load(tmp_path / "mf.bin")
    assert c.user_ids == a.user_ids
    assert np.array_equal(c.P, a.P.astype(np.float32))
