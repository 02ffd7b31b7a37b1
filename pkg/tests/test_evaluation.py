import json

import numpy as np
import pytest

from siamese_lstm.dataset import FeatureSet
from siamese_lstm.errors import ShapeError
from siamese_lstm.evaluation import (EvalReport, ScoreMatrix, cmc, evaluate, fuse_scores, mean_average_precision,
                                     multi_query_collapse, score_matrix)
from siamese_lstm.lstm import LstmParams
from siamese_lstm.model import SiameseParams, distance, embed
from siamese_lstm.numerics import SeededRng


def matrix(dist, q_ids, g_ids, q_cams=None, g_cams=None):
    dist = np.asarray(dist, dtype=float)
    q, g = dist.shape
    q_cams = np.zeros(q, int) if q_cams is None else np.asarray(q_cams)
    g_cams = np.ones(g, int) if g_cams is None else np.asarray(g_cams)
    return ScoreMatrix(dist, tuple(f"q{k}" for k in range(q)), np.asarray(q_ids), q_cams,
                       tuple(f"g{k}" for k in range(g)), np.asarray(g_ids), g_cams)


def oracle(m):
    """Per-query ranked relevance by explicit sorting, then CMC and AP."""
    q, g = m.distances.shape
    firsts, aps, excluded = [], [], 0
    for i in range(q):
        ranked = sorted(range(g), key=lambda j: (m.distances[i][j], j))
        rel = []
        for j in ranked:
            if m.gallery_identities[j] == m.query_identities[i] and m.gallery_cameras[j] == m.query_cameras[i]:
                continue
            rel.append(m.gallery_identities[j] == m.query_identities[i])
        if not any(rel):
            excluded += 1
            continue
        firsts.append(rel.index(True))
        hits, total = 0, 0.0
        for k, r in enumerate(rel):
            if r:
                hits += 1
                total += hits / (k + 1)
        aps.append(total / hits)
    curve = [sum(f <= k for f in firsts) / len(firsts) for k in range(g)]
    return curve, sum(aps) / len(aps), excluded


def random_matrix(r, q, g, ids=3, cams=2):
    return matrix(r.uniform(0, 1, (q, g)), r.integers(0, ids, q), r.integers(0, ids, g),
                  r.integers(0, cams, q), r.integers(0, cams, g))


def test_cmc_hand_enumerated():
    m = matrix([[0.1, 0.5, 0.9], [0.2, 0.4, 0.9]], [0, 2], [0, 1, 2])
    assert cmc(m).tolist() == [0.5, 0.5, 1.0]


def test_perfect_scorer():
    ids = np.array([0, 1, 2, 3])
    dist = np.where(ids[:, None] == ids[None, :], 0.0, 1.0)
    m = matrix(dist, ids, ids)
    assert cmc(m).tolist() == [1.0] * 4
    assert mean_average_precision(m) == 1.0


def test_average_precision_single_relevant_at_rank_two():
    m = matrix([[0.3, 0.5, 0.9]], [1], [0, 1, 2])
    assert mean_average_precision(m) == 0.5


def test_random_4x6_matches_oracle():
    r = SeededRng(11)
    m = random_matrix(r, 4, 6)
    curve, m_ap, excluded = oracle(m)
    report = evaluate(m)
    assert report.cmc.tolist() == curve
    assert report.map == m_ap
    assert report.excluded_queries == excluded


def test_same_camera_matches_are_filtered():
    # The only same-identity gallery item shares the query's camera.
    m = matrix([[0.0, 0.5]], [0], [0, 1], q_cams=[1], g_cams=[1, 0])
    report = evaluate(m)
    assert report.excluded_queries == 1
    m = matrix([[0.0, 0.5, 0.7]], [0], [0, 1, 0], q_cams=[1], g_cams=[1, 0, 0])
    assert cmc(m).tolist() == [0.0, 1.0, 1.0]


def test_ties_broken_by_gallery_index():
    m = matrix([[0.5, 0.5, 0.5]], [1], [0, 1, 2])
    assert cmc(m).tolist() == [0.0, 1.0, 1.0]


@pytest.mark.parametrize("seed", range(100))
def test_cmc_monotone_and_rank_invariant(seed):
    r = SeededRng(seed)
    m = random_matrix(r, int(r.integers(1, 8)), int(r.integers(2, 10)))
    base = evaluate(m)
    if base.excluded_queries == len(m.query_ids):
        return
    assert np.all(np.diff(base.cmc) >= 0)
    assert base.cmc[-1] == 1.0
    for transform in (np.exp, lambda x: x ** 3 + 2 * x, np.log1p):
        other = evaluate(m.with_distances(transform(m.distances)))
        assert other.rank1 == base.rank1
        assert other.map == base.map
        assert other.cmc.tolist() == base.cmc.tolist()


def test_fuse_single_row_min_max():
    m = matrix([[2.0, 4.0, 6.0]], [0], [0, 1, 2])
    assert fuse_scores([m]).distances.tolist() == [[0.0, 0.5, 1.0]]


def test_fuse_identical_matrices():
    r = SeededRng(0)
    m = random_matrix(r, 3, 5)
    assert fuse_scores([m, m]).distances.tolist() == fuse_scores([m]).distances.tolist()


def test_fuse_constant_row_maps_to_zero():
    m = matrix([[3.0, 3.0], [1.0, 2.0]], [0, 1], [0, 1])
    fused = fuse_scores([m])
    assert fused.distances.tolist() == [[0.0, 0.0], [0.0, 1.0]]
    assert fused.constant_rows == 1


@pytest.mark.parametrize("seed", range(50))
def test_fuse_preserves_argmin_when_features_agree(seed):
    r = SeededRng(seed)
    base = r.uniform(0, 1, (4, 6))
    m1 = matrix(base, [0] * 4, list(range(6)))
    m2 = m1.with_distances(np.exp(3 * base) + 1)
    fused = fuse_scores([m1, m2])
    assert fused.distances.argmin(axis=1).tolist() == base.argmin(axis=1).tolist()
    assert fused.distances.min() >= 0 and fused.distances.max() <= 1


@pytest.mark.parametrize("seed", range(20))
def test_single_feature_fusion_keeps_metrics(seed):
    m = random_matrix(SeededRng(seed), 5, 7)
    a, b = evaluate(m), evaluate(fuse_scores([m]))
    assert a.cmc.tolist() == b.cmc.tolist() and a.map == b.map


def test_fuse_requires_matching_ids():
    a = matrix([[1.0, 2.0]], [0], [0, 1])
    b = ScoreMatrix(a.distances, ("other",), a.query_identities, a.query_cameras, a.gallery_ids,
                    a.gallery_identities, a.gallery_cameras)
    with pytest.raises(ShapeError):
        fuse_scores([a, b])


def test_multi_query_single_query_per_identity_unchanged():
    m = random_matrix(SeededRng(2), 3, 4)
    m = ScoreMatrix(m.distances, m.query_ids, np.array([0, 1, 2]), np.zeros(3, int), m.gallery_ids,
                    m.gallery_identities, m.gallery_cameras)
    assert multi_query_collapse(m).distances.tolist() == m.distances.tolist()


def test_multi_query_averages_groups():
    rows = [[1.0, 4.0, 7.0], [2.0, 5.0, 9.0], [6.0, 0.0, 2.0], [3.0, 3.0, 3.0]]
    m = matrix(rows, [5, 5, 5, 8], [5, 8, 1])
    out = multi_query_collapse(m)
    assert out.distances.tolist() == [[3.0, 3.0, 6.0], [3.0, 3.0, 3.0]]
    assert out.query_identities.tolist() == [5, 8]
    assert out.query_ids[0] == "q0+q1+q2"
    same = matrix([[1.0, 2.0], [1.0, 2.0]], [0, 0], [0, 1])
    assert multi_query_collapse(same).distances.tolist() == [[1.0, 2.0]]


def test_score_matrix_matches_pairwise_distances():
    r = SeededRng(4)
    n, R, d = 2, 3, 4
    model = SiameseParams(LstmParams.create(r.normal(0.5, (4 * n, d + n)), r.normal(0.5, 4 * n), d, n),
                          r.normal(1.0, (R * n, R * n)), R)
    data = r.normal(1.0, (7, R, d))
    data[3] = data[0]
    fs = FeatureSet.build("f", [f"i{k}" for k in range(7)], [0, 1, 2, 0, 1, 2, 3], [0, 0, 0, 1, 1, 1, 1], data)
    queries, gallery = fs.subset([0, 1, 2]), fs.subset([3, 4, 5, 6])
    m = score_matrix(model, queries, gallery)
    assert m.distances.shape == (3, 4)
    assert m.distances[0, 0] == 0.0
    for i in range(3):
        for j in range(4):
            assert m.distances[i, j] == pytest.approx(distance(embed(model, queries.data[i]),
                                                               embed(model, gallery.data[j])), abs=1e-12)
    with pytest.raises(ShapeError):
        score_matrix(model, FeatureSet.build("g", ["a"], [0], [0], np.zeros((1, R, d + 1))), gallery)


def test_report_json_shape():
    report = evaluate(matrix([[0.1, 0.5, 0.9], [0.2, 0.4, 0.9]], [0, 2], [0, 1, 2]), "multi-query")
    payload = json.loads(report.dumps())
    assert set(payload) == {"cmc", "rank1", "map", "protocol", "excluded_queries"}
    assert payload["protocol"] == "multi-query"
    assert payload["rank1"] == 0.5
    assert isinstance(report, EvalReport)
