import json
import math

import numpy as np
import pytest

from siamese_lstm.dataset import FeatureSet, Standardizer, generate_synthetic, make_split
from siamese_lstm.errors import ConfigError, DataError, ShapeError, TrainingDivergedError
from siamese_lstm.evaluation import evaluate_model
from siamese_lstm.model import DISSIMILAR, SIMILAR, SiameseParams, pair_loss
from siamese_lstm.numerics import SeededRng
from siamese_lstm.training import (PairSet, RmspropState, TrainConfig, clip_gradients, mine_pairs, rmsprop_step,
                                   train)


def test_config_defaults_follow_recipe():
    c = TrainConfig(lr=0.01, lr_decay_per_epoch=0.9, hidden_dim=4)
    assert (c.margin, c.batch_size, c.rmsprop_decay, c.clip, c.max_epochs) == (0.5, 100, 0.95, 5.0, 20)


@pytest.mark.parametrize("key, value", [("margin", 0.0), ("batch_size", 0), ("rmsprop_decay", 1.0),
                                        ("clip", -1.0), ("lr", 0.0), ("patience", -1)])
def test_config_validation_names_key(key, value):
    with pytest.raises(ConfigError, match=key):
        TrainConfig(**{"lr": 0.01, "lr_decay_per_epoch": 0.9, "hidden_dim": 4, key: value})


def toy_set(vectors, identities, cameras):
    data = np.asarray(vectors, dtype=float)[:, None, :]
    return FeatureSet.build("toy", [f"i{k}" for k in range(len(data))], identities, cameras, data)


def test_single_positive_gets_two_hard_negatives():
    fs = toy_set([[0, 0], [0, 1], [5, 0], [6, 0], [9, 9], [9, 8]], [0, 0, 1, 1, 2, 2], [0, 1, 0, 1, 0, 1])
    pairs = mine_pairs(fs, seed=0)
    for a in range(6):
        negatives = [(p, q) for p, q, y in zip(pairs.p, pairs.q, pairs.labels) if p == a and y == DISSIMILAR]
        assert len(negatives) == 2
    assert pairs.positives == 3


def test_two_orthogonal_identities():
    fs = toy_set([[1, 0], [1, 0], [0, 1], [0, 1]], [0, 0, 1, 1], [0, 1, 0, 1])
    pairs = mine_pairs(fs, seed=3)
    got = sorted(zip(pairs.p.tolist(), pairs.q.tolist(), pairs.labels.tolist()))
    expected = sorted([(0, 1, SIMILAR), (2, 3, SIMILAR),
                       (0, 2, DISSIMILAR), (0, 3, DISSIMILAR), (1, 2, DISSIMILAR), (1, 3, DISSIMILAR),
                       (2, 0, DISSIMILAR), (2, 1, DISSIMILAR), (3, 0, DISSIMILAR), (3, 1, DISSIMILAR)])
    assert got == expected


def test_mined_negatives_are_nearest_by_brute_force():
    fs = generate_synthetic(identities=8, images_per_camera=2, rows=3, dim=4, seed=1)
    pairs = mine_pairs(fs, seed=0)
    flat = fs.data.reshape(len(fs), -1).tolist()
    for a in range(len(fs)):
        positives = sum(1 for b in range(len(fs))
                        if fs.identities[b] == fs.identities[a] and fs.cameras[b] != fs.cameras[a])
        wrong = [b for b in range(len(fs)) if fs.identities[b] != fs.identities[a]]
        by_distance = sorted(wrong, key=lambda b: (sum((x - y) ** 2 for x, y in zip(flat[a], flat[b])), b))
        mined = sorted(q for p, q, y in zip(pairs.p, pairs.q, pairs.labels) if p == a and y == DISSIMILAR)
        assert mined == sorted(by_distance[:2 * positives])


def test_mining_deterministic_and_skips_single_camera_identities():
    fs = toy_set([[0, 0], [0, 1], [3, 3], [4, 4]], [0, 0, 1, 1], [0, 1, 0, 0])
    a, b = mine_pairs(fs, seed=5), mine_pairs(fs, seed=5)
    assert a.p.tolist() == b.p.tolist() and a.q.tolist() == b.q.tolist()
    assert a.skipped_identities == 1
    with pytest.raises(DataError):
        mine_pairs(toy_set([[0, 0], [1, 1]], [0, 0], [0, 1]))


def test_clip_values():
    out = clip_gradients([np.array([7.3, -12.0, 3.2])], 5.0)[0]
    assert out.tolist() == [5.0, -5.0, 3.2]


def test_clip_bound_property():
    r = SeededRng(0)
    for _ in range(20):
        grads = [r.normal(50.0, (3, 4)), r.normal(0.1, 5)]
        assert max(np.abs(g).max() for g in clip_gradients(grads, 5.0)) <= 5.0


def test_rmsprop_scalar_step():
    params, state = rmsprop_step([np.array([0.0])], [np.array([1.0])], RmspropState([np.array([0.0])]), 0.01)
    assert state.cache[0][0] == pytest.approx(0.05, abs=1e-15)
    assert -params[0][0] == pytest.approx(0.01 / (math.sqrt(0.05) + 1e-8), rel=1e-12)
    assert -params[0][0] == pytest.approx(0.0447214, abs=1e-7)


def test_rmsprop_zero_gradient_decays_cache():
    params, state = rmsprop_step([np.array([2.0])], [np.array([0.0])], RmspropState([np.array([4.0])]), 0.1)
    assert params[0][0] == 2.0
    assert state.cache[0][0] == pytest.approx(0.95 * 4.0)


@pytest.mark.parametrize("g", [0.3, -2.5])
def test_rmsprop_converges_to_sign_step(g):
    p, state = [np.array([0.0])], RmspropState([np.array([0.0])])
    for _ in range(500):
        before = p[0][0]
        p, state = rmsprop_step(p, [np.array([g])], state, 0.01)
    assert p[0][0] - before == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-6)


def test_rmsprop_shape_mismatch():
    with pytest.raises(ShapeError):
        rmsprop_step([np.zeros(2)], [np.zeros(3)], RmspropState([np.zeros(2)]), 0.1)


@pytest.fixture(scope="module")
def prepared():
    fs = generate_synthetic(identities=24, rows=6, dim=8, seed=2)
    split = make_split(fs, 0.5, seed=2, val_fraction=0.2)
    fs = Standardizer.fit(fs.subset(split.train_items)).apply(fs)
    train_fs = fs.subset(split.train_items)
    return train_fs, mine_pairs(train_fs, 2), (fs.subset(split.val_query), fs.subset(split.val_gallery))


def config(**kw):
    return TrainConfig(**{"lr": 5e-3, "lr_decay_per_epoch": 0.9, "hidden_dim": 4, "batch_size": 20, **kw})


def test_patience_zero_runs_one_epoch(prepared):
    fs, pairs, val = prepared
    result = train(SiameseParams.init(SeededRng(0), 6, 8, 4), fs, pairs, config(patience=0), val)
    assert len(result.log) == 1


def test_overfits_single_similar_pair():
    r = SeededRng(3)
    fs = FeatureSet.build("one", ["a", "b"], [0, 0], [0, 1], r.normal(1.0, (2, 4, 3)))
    pairs = PairSet(np.array([0]), np.array([1]), np.array([SIMILAR]))
    model = SiameseParams.init(SeededRng(1), 4, 3, 3)
    result = train(model, fs, pairs, TrainConfig(lr=1e-3, lr_decay_per_epoch=0.99, hidden_dim=3, max_epochs=200))
    pair = pairs.examples(fs)[0]
    assert pair_loss(model, pair, 0.5) > 1e-3
    assert min(e.mean_loss for e in result.log) < 1e-4


def test_training_reduces_loss_and_logs(prepared):
    fs, pairs, val = prepared
    result = train(SiameseParams.init(SeededRng(0), 6, 8, 4), fs, pairs, config(max_epochs=5, patience=10), val)
    assert len(result.log) == 5
    assert result.log[0].mean_loss > result.log[4].mean_loss
    assert [e.lr for e in result.log] == pytest.approx([5e-3 * 0.9 ** k for k in range(5)])
    lines = [json.loads(line) for line in result.log_lines().splitlines()]
    assert set(lines[0]) == {"epoch", "mean_loss", "val_rank1", "lr"}


def test_training_is_deterministic(prepared):
    fs, pairs, val = prepared
    runs = [train(SiameseParams.init(SeededRng(0), 6, 8, 4), fs, pairs, config(max_epochs=3), val) for _ in range(2)]
    assert runs[0].model.to_bytes() == runs[1].model.to_bytes()
    assert runs[0].log_lines() == runs[1].log_lines()


def test_returned_checkpoint_is_best_validation(prepared):
    fs, pairs, val = prepared
    result = train(SiameseParams.init(SeededRng(0), 6, 8, 4), fs, pairs, config(max_epochs=8, patience=8), val)
    best = max(e.val_rank1 for e in result.log)
    assert evaluate_model(result.model, *val).rank1 == best
    assert result.log[result.best_epoch - 1].val_rank1 == best


def test_nan_loss_aborts_with_batch_index(prepared):
    fs, pairs, _ = prepared
    model = SiameseParams.init(SeededRng(0), 6, 8, 4)
    bad = model.with_parameters([model.lstm.w, model.lstm.bias, np.full_like(model.w_m, np.nan)])
    with pytest.raises(TrainingDivergedError, match="batch index 0"):
        train(bad, fs, pairs, config())
