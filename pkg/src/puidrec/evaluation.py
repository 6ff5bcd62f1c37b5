"""Per-user ranking metrics on held-out interactions, plus bias against synthetic truth."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError
from .predictors import pair_error


@dataclass
class EvalReport:
    uauc: float
    ndcg_at_k: dict = field(default_factory=dict)
    users_evaluated: int = 0
    users_skipped: int = 0
    bias: float | None = None

    def to_dict(self):
        d = asdict(self)
        d["ndcg_at_k"] = {str(k): v for k, v in self.ndcg_at_k.items()}
        for k, v in self.ndcg_at_k.items():
            d[f"ndcg@{k}"] = v
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _groups(users):
    users = np.asarray(users)
    order = np.argsort(users, kind="stable")
    bounds = np.flatnonzero(np.diff(users[order])) + 1
    return np.split(order, bounds)


def auc(scores, labels):
    """Mann-Whitney AUC; tied scores earn half credit."""
    labels = np.asarray(labels, dtype=bool)
    npos = labels.sum()
    nneg = labels.size - npos
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def _uauc_parts(scores, users, ratings, threshold):
    scores = np.asarray(scores, dtype=float)
    rel = np.asarray(ratings, dtype=float) >= threshold
    values, skipped = [], 0
    for idx in _groups(users):
        r = rel[idx]
        if r.all() or not r.any():
            skipped += 1
            continue
        values.append(auc(scores[idx], r))
    return values, skipped


def uauc(scores, users, ratings, threshold=4.0):
    """Mean per-user AUC over users holding both relevant and irrelevant test items."""
    if len(scores) == 0:
        raise DataError("empty test set")
    values, _ = _uauc_parts(scores, users, ratings, threshold)
    if not values:
        raise DataError("no user has both relevant and irrelevant test items")
    return float(np.mean(values))


def dcg(gains, k):
    gains = np.asarray(gains, dtype=float)[:k]
    return float(np.sum(gains / np.log2(np.arange(2, gains.size + 2))))


def ndcg_at_k(scores, users, items, ratings, k=5, threshold=4.0):
    """Binary-gain NDCG@k averaged over users with at least one relevant test item.

    Tied scores are ordered by ascending item id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(scores) == 0:
        raise DataError("empty test set")
    scores = np.asarray(scores, dtype=float)
    items = np.asarray(items)
    rel = (np.asarray(ratings, dtype=float) >= threshold).astype(float)
    values = []
    for idx in _groups(users):
        r = rel[idx]
        if not r.any():
            continue
        order = np.lexsort((items[idx], -scores[idx]))
        ideal = dcg(np.sort(r)[::-1], k)
        values.append(dcg(r[order], k) / ideal)
    if not values:
        raise DataError("no user has a relevant test item")
    return float(np.mean(values))


def evaluate(model, dataset, flat_indices=None, ks=(5,), threshold=4.0):
    """Score the model on the observed pairs of ``dataset`` (optionally a subset)."""
    if flat_indices is None:
        flat_indices = dataset.observed_flat()
    users, items = dataset.unflatten(flat_indices)
    if users.size == 0:
        raise DataError("empty evaluation set")
    ratings = dataset.ratings[users, items]
    x = dataset.pair_features(users, items) if model.feature_dim else None
    scores = model.predict(users, items, x)
    values, skipped = _uauc_parts(scores, users, ratings, threshold)
    if not values:
        raise DataError("no user has both relevant and irrelevant test items")
    ndcg = {int(k): ndcg_at_k(scores, users, items, ratings, k, threshold) for k in ks}
    return EvalReport(float(np.mean(values)), ndcg, len(values), skipped)


def ideal_loss(model, truth, dataset, error_type="squared"):
    pred = model.predict_grid(dataset)
    return float(pair_error(pred, truth.ideal_ratings, error_type).mean())


def bias_report(estimator_value, truth, model, dataset, error_type="squared"):
    """Estimator value minus the full-matrix loss under the true ratings."""
    if truth is None:
        raise DataError("bias needs synthetic ground truth")
    return float(estimator_value) - ideal_loss(model, truth, dataset, error_type)
