"""Retrieval metrics: AP/mAP, precision@K, NDCG@k, and split protocols."""

from dataclasses import dataclass

import numpy as np

from .hashindex import HashIndex, pack_codes, stable_order


@dataclass
class RankedResult:
    ids: np.ndarray
    relevance: np.ndarray  # binary for AP, graded in [0, 1] for NDCG

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.relevance = np.asarray(self.relevance, dtype=np.float64)
        if len(self.ids) != len(self.relevance):
            raise ValueError("every ranked id needs a relevance value")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in ranking")


def _rel(result):
    return result.relevance if isinstance(result, RankedResult) else np.asarray(result, dtype=np.float64)


def average_precision(result, n_relevant=None):
    """Mean of precision@r over the ranks r holding a relevant item.

    Normalised by ``n_relevant`` (default: relevant items in the ranking).
    Zero when there is nothing relevant.
    """
    rel = _rel(result) > 0
    R = int(rel.sum()) if n_relevant is None else int(n_relevant)
    if R == 0:
        return 0.0
    ranks = np.flatnonzero(rel) + 1
    hits = np.arange(1, len(ranks) + 1)
    return float(np.sum(hits / ranks) / R)


def mean_average_precision(results):
    aps = [r if np.isscalar(r) else average_precision(r) for r in results]
    if not aps:
        raise ValueError("mAP over an empty query set")
    return float(np.mean(aps))


def precision_at_k(result, K):
    """Relevant count in the top K, divided by K even when the list is shorter."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return float(np.sum(_rel(result)[:K] > 0) / K)


def dcg(rel, k):
    rel = np.asarray(rel, dtype=np.float64)[:k]
    gain = np.expm1(rel * np.log(2.0))  # 2^rel - 1 without cancellation for tiny rel
    return float(np.sum(gain / np.log2(np.arange(2, len(rel) + 2))))


def ndcg(result, k):
    """(1/Z) sum_{j<=k} (2^rel(j) - 1) / log2(j + 1); Z is the ideal-order DCG.

    The logarithm is base 2. An all-zero relevance list scores 0.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    rel = _rel(result)
    if np.any(rel < 0) or np.any(rel > 1):
        raise ValueError("graded relevance must lie in [0, 1]")
    z = dcg(np.sort(rel)[::-1], k)
    return 0.0 if z == 0 else dcg(rel, k) / z


def attribute_relevance(query_attrs, item_attrs):
    query_attrs = set(query_attrs)
    if not query_attrs:
        raise ValueError("query attribute set is empty")
    return len(query_attrs & set(item_attrs)) / len(query_attrs)


def zero_shot_split(class_ids, ratio=0.5, seed=0):
    """Disjoint (seen, unseen) class partition; ``ratio`` is the seen fraction."""
    classes = np.unique(np.asarray(class_ids))
    if len(classes) < 2:
        raise ValueError("zero-shot split needs at least 2 classes")
    n_seen = int(np.clip(round(ratio * len(classes)), 1, len(classes) - 1))
    perm = np.random.default_rng(seed).permutation(classes)
    return sorted(perm[:n_seen].tolist()), sorted(perm[n_seen:].tolist())


def similarity_matrix(labels_q, labels_db, multi_label=False):
    """+1 where items share a class (or, multi-label, any label), else -1."""
    if multi_label:
        for s in list(labels_q) + list(labels_db):
            if len(s) == 0:
                raise ValueError("empty label set")
        q = [set(s) for s in labels_q]
        d = [set(s) for s in labels_db]
        return np.array([[1 if a & b else -1 for b in d] for a in q], dtype=np.int8).reshape(len(q), len(d))
    lq = np.asarray(labels_q).reshape(-1, 1)
    ld = np.asarray(labels_db).reshape(1, -1)
    return np.where(lq == ld, 1, -1).astype(np.int8)


def rankings(query_codes, db_codes, db_ids=None, query_ids=None, exclude_self=True):
    """Full Hamming rankings: for each query, database row order by (distance, id).

    With ``exclude_self`` a database row sharing the query's id is dropped.
    Returns a list of (rows, distances) pairs.
    """
    index = HashIndex.build(db_codes, ids=db_ids)
    dist = index.distance_matrix(pack_codes(query_codes))
    out = []
    for qi in range(dist.shape[0]):
        order = stable_order(dist[qi], index.ids)
        if exclude_self and query_ids is not None:
            order = order[index.ids[order] != np.uint64(query_ids[qi])]
        out.append((order, dist[qi][order]))
    return out


def retrieval_map(query_codes, db_codes, query_labels, db_labels, db_ids=None, query_ids=None,
                  exclude_self=True, multi_label=False, topk=None):
    """mAP over full Hamming rankings (or the first ``topk`` positions)."""
    S = similarity_matrix(query_labels, db_labels, multi_label) > 0
    aps = []
    for qi, (order, _) in enumerate(rankings(query_codes, db_codes, db_ids, query_ids, exclude_self)):
        rel = S[qi, order]
        if topk is not None:
            aps.append(average_precision(rel[:topk], n_relevant=rel[:topk].sum()))
        else:
            aps.append(average_precision(rel))
    return mean_average_precision(aps)


def retrieval_ndcg(query_codes, db_codes, query_attrs, db_attrs, k=20, db_ids=None, query_ids=None,
                   exclude_self=True):
    scores = []
    for qi, (order, _) in enumerate(rankings(query_codes, db_codes, db_ids, query_ids, exclude_self)):
        rel = np.array([attribute_relevance(query_attrs[qi], db_attrs[j]) for j in order])
        scores.append(ndcg(rel, k))
    return float(np.mean(scores))
