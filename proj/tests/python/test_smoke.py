import math

import numpy as np
import pytest

import mope


@pytest.fixture(scope="module")
def corpus():
    return mope.generate_corpus(seed=3, dialogues=20)


def test_held_out_domain_only_in_test(corpus):
    train, test = corpus
    train_domains = {d for dlg in train["dialogues"] for d in dlg["domains"]}
    test_domains = {d for dlg in test["dialogues"] for d in dlg["domains"]}
    assert "flight" not in train_domains
    assert "flight" in test_domains


def test_generation_is_deterministic(corpus):
    assert mope.generate_corpus(seed=3, dialogues=20) == corpus


def test_validate_rejects_unknown_slot(corpus):
    train, _ = corpus
    assert mope.validate_corpus(train) == train
    bad = dict(train)
    bad["dialogues"] = [dict(train["dialogues"][0])]
    turn = dict(bad["dialogues"][0]["turns"][0])
    turn["state"] = [{"domain": bad["dialogues"][0]["domains"][0], "slot": "no-such-slot", "value": "x"}]
    bad["dialogues"][0]["turns"] = [turn]
    with pytest.raises(mope.ValidationError):
        mope.validate_corpus(bad)


def test_evaluate_counts():
    gold = {("d1", 0, "hotel", "area"): "north", ("d1", 0, "hotel", "stars"): "none",
            ("d1", 1, "hotel", "area"): "north", ("d1", 1, "hotel", "stars"): "4"}
    pred = dict(gold)
    pred[("d1", 1, "hotel", "stars")] = "none"
    report = mope.evaluate(pred, gold)
    overall = report["overall"]
    assert overall["sa_with_none"]["correct"] == 3 and overall["sa_with_none"]["total"] == 4
    assert overall["jga"]["correct"] == 1 and overall["jga"]["total"] == 2
    assert overall["errors"]["partial"] == 1


def test_evaluate_coverage_error():
    with pytest.raises(mope.ContractError):
        mope.evaluate({}, {("d1", 0, "hotel", "area"): "north"})


def test_kmeans_separates_blobs():
    pts = [[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]]
    labels, centroids, trace = mope.fit_kmeans(pts, 2, 1)
    assert labels[0] == labels[1] != labels[2] == labels[3]
    assert len(centroids) == 2
    assert all(a >= b for a, b in zip(trace, trace[1:]))


def test_spearman():
    assert mope.spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert math.isnan(mope.spearman([1, 1, 1], [1, 2, 3]))


def test_backbone_and_pool_round_trip(tmp_path, corpus):
    train, _ = corpus
    words = mope.training_words(train)
    cfg = {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32, "max_context": 32, "prefix_len": 4}
    bb = mope.init_backbone(words, cfg, seed=2)
    assert mope.backbone_config(bb)["vocab_size"] == len(words)
    tokens = bb.encode("i need a taxi")
    logits = bb.logits(tokens)
    assert logits.shape == (len(tokens), len(words))
    bb.save(tmp_path / "bb")
    again = mope.Backbone.load(tmp_path / "bb")
    np.testing.assert_array_equal(again.logits(tokens), logits)

    pool = mope.ExpertPool.init(bb, k=3, seed=1)
    assert len(pool) == 3
    key, value = pool.prefix(2, 1)
    assert key.shape == value.shape == (4, 16)
    pool.save(tmp_path / "experts")
    loaded = mope.ExpertPool.load(tmp_path / "experts")
    np.testing.assert_array_equal(loaded.prefix(2, 1)[0], key)
    assert not np.array_equal(bb.logits(tokens, pool, 0), logits)
    with pytest.raises(mope.OutOfRangeError):
        pool.prefix(0, 5)
    with pytest.raises(mope.CapacityError):
        bb.logits([4] * 33)
    assert len(bb.slot_feature("hotel", "area", "embedding")) == 16


def test_missing_checkpoint_is_format_error(tmp_path):
    with pytest.raises(mope.FormatError):
        mope.ExpertPool.load(tmp_path / "nothing")
