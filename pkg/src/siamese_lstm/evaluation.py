"""Query/gallery scoring, score fusion, CMC and mAP.

Gallery items that share both identity and camera with a query are removed
from that query's ranking. Ties in distance are broken by gallery index.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .model import embed_many

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreMatrix:
    distances: np.ndarray
    query_ids: tuple
    query_identities: np.ndarray
    query_cameras: np.ndarray
    gallery_ids: tuple
    gallery_identities: np.ndarray
    gallery_cameras: np.ndarray
    constant_rows: int = 0

    def __post_init__(self):
        q, g = self.distances.shape
        if len(self.query_ids) != q or len(self.query_identities) != q or len(self.query_cameras) != q:
            raise ShapeError(f"{q} distance rows but {len(self.query_ids)} query ids")
        if len(self.gallery_ids) != g or len(self.gallery_identities) != g or len(self.gallery_cameras) != g:
            raise ShapeError(f"{g} distance columns but {len(self.gallery_ids)} gallery ids")

    @classmethod
    def from_sets(cls, distances, queries, gallery):
        return cls(np.asarray(distances, dtype=float), queries.ids, queries.identities, queries.cameras,
                   gallery.ids, gallery.identities, gallery.cameras)

    def with_distances(self, distances, constant_rows=None):
        return ScoreMatrix(np.asarray(distances, dtype=float), self.query_ids, self.query_identities,
                           self.query_cameras, self.gallery_ids, self.gallery_identities,
                           self.gallery_cameras, self.constant_rows if constant_rows is None else constant_rows)


def pairwise_distances(a, b):
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def score_matrix(model, queries, gallery):
    """Euclidean distances between embedded queries and gallery images."""
    for fs in (queries, gallery):
        if (fs.R, fs.d) != (model.rows, model.input_dim):
            raise ShapeError(f"features are R={fs.R}, d={fs.d}; model expects R={model.rows}, d={model.input_dim}")
    s_q = embed_many(model, queries.data)
    s_g = embed_many(model, gallery.data)
    diff = s_q[:, None, :] - s_g[None, :, :]
    return ScoreMatrix.from_sets(np.sqrt((diff * diff).sum(-1)), queries, gallery)


def raw_score_matrix(queries, gallery):
    """Distances in the concatenated input-feature space (no model)."""
    a = queries.data.reshape(len(queries), -1)
    b = gallery.data.reshape(len(gallery), -1)
    return ScoreMatrix.from_sets(pairwise_distances(a, b), queries, gallery)


def _same_ids(a, b):
    return (a.query_ids == b.query_ids and a.gallery_ids == b.gallery_ids)


def fuse_scores(matrices):
    """Per query row and feature, min-max rescale to [0, 1], then average.

    A constant row has no spread to rescale and becomes all zeros; the count
    of such rows is kept on the result.
    """
    if not matrices:
        raise ValueError("need at least one score matrix")
    first = matrices[0]
    total = np.zeros_like(first.distances)
    constant = 0
    for m in matrices:
        if not _same_ids(m, first):
            raise ShapeError("score matrices disagree on query/gallery ids")
        lo = m.distances.min(axis=1, keepdims=True)
        span = m.distances.max(axis=1, keepdims=True) - lo
        flat = span[:, 0] == 0
        constant += int(flat.sum())
        total += np.where(flat[:, None], 0.0, (m.distances - lo) / np.where(flat[:, None], 1.0, span))
    if constant:
        log.warning("%d constant score rows mapped to zeros during fusion", constant)
    return first.with_distances(total / len(matrices), constant_rows=constant)


def multi_query_collapse(matrix):
    """Average the rows of all queries sharing an identity and camera."""
    groups = {}
    for k, (p, c) in enumerate(zip(matrix.query_identities, matrix.query_cameras)):
        groups.setdefault((p.item() if hasattr(p, "item") else p, c.item() if hasattr(c, "item") else c), []).append(k)
    keys = list(groups)
    rows = np.array([matrix.distances[groups[key]].mean(axis=0) for key in keys])
    ids = tuple("+".join(matrix.query_ids[k] for k in groups[key]) for key in keys)
    first = [groups[key][0] for key in keys]
    return ScoreMatrix(rows.reshape(len(keys), -1), ids, matrix.query_identities[first],
                       matrix.query_cameras[first], matrix.gallery_ids, matrix.gallery_identities,
                       matrix.gallery_cameras, matrix.constant_rows)


def _match_lists(matrix):
    """Yield one boolean relevance list per valid query, ranked by distance."""
    excluded = 0
    out = []
    order = np.argsort(matrix.distances, axis=1, kind="stable")
    for k in range(matrix.distances.shape[0]):
        idx = order[k]
        same_id = matrix.gallery_identities[idx] == matrix.query_identities[k]
        same_cam = matrix.gallery_cameras[idx] == matrix.query_cameras[k]
        keep = ~(same_id & same_cam)
        matches = same_id[keep]
        if not matches.any():
            excluded += 1
            continue
        out.append(matches)
    return out, excluded


def _cmc_from(match_lists, gallery_size):
    curve = np.zeros(gallery_size)
    if not match_lists:
        return curve
    for matches in match_lists:
        first = int(np.argmax(matches))
        curve[first:] += 1.0
    return curve / len(match_lists)


def _average_precision(matches):
    hits = np.flatnonzero(matches)
    return float(np.mean((np.arange(len(hits)) + 1) / (hits + 1)))


def cmc(matrix):
    lists, _ = _match_lists(matrix)
    return _cmc_from(lists, matrix.distances.shape[1])


def mean_average_precision(matrix):
    lists, _ = _match_lists(matrix)
    if not lists:
        return 0.0
    return float(np.mean([_average_precision(m) for m in lists]))


@dataclass(frozen=True)
class EvalReport:
    cmc: np.ndarray
    rank1: float
    map: float
    protocol: str = "single-query"
    excluded_queries: int = 0

    def to_json(self):
        return {"cmc": [float(v) for v in self.cmc], "rank1": float(self.rank1), "map": float(self.map),
                "protocol": self.protocol, "excluded_queries": int(self.excluded_queries)}

    def dumps(self):
        return json.dumps(self.to_json())


def evaluate(matrix, protocol="single-query"):
    lists, excluded = _match_lists(matrix)
    if excluded:
        log.warning("%d queries have no valid gallery match and were excluded", excluded)
    curve = _cmc_from(lists, matrix.distances.shape[1])
    m_ap = float(np.mean([_average_precision(m) for m in lists])) if lists else 0.0
    return EvalReport(curve, float(curve[0]) if len(curve) else 0.0, m_ap, protocol, excluded)


def evaluate_model(model, queries, gallery, multi_query=False):
    matrix = score_matrix(model, queries, gallery)
    if multi_query:
        return evaluate(multi_query_collapse(matrix), "multi-query")
    return evaluate(matrix, "single-query")
