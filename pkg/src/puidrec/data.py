"""Datasets: loading, synthetic confounded generation, pseudo-features, masking and splits.

All interaction data lives on the dense user x item grid.  ``ratings`` holds NaN
wherever no rating is recorded, ``observed`` is the exposure indicator o_{u,i}.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit
from sklearn.cluster import KMeans

from .errors import DataError

FORMATS = ("triple_tsv", "coat_matrix")


@dataclass
class Dataset:
    ratings: np.ndarray
    observed: np.ndarray
    user_features: np.ndarray = None
    item_features: np.ndarray = None
    rating_scale: tuple = (1.0, 5.0)
    user_ids: np.ndarray = None
    item_ids: np.ndarray = None

    def __post_init__(self):
        self.ratings = np.asarray(self.ratings, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        m, n = self.ratings.shape
        if self.observed.shape != (m, n):
            raise DataError(f"observed mask shape {self.observed.shape} != ratings shape {(m, n)}")
        if self.user_features is None:
            self.user_features = np.zeros((m, 0))
        if self.item_features is None:
            self.item_features = np.zeros((n, 0))
        if self.user_ids is None:
            self.user_ids = np.arange(m)
        if self.item_ids is None:
            self.item_ids = np.arange(n)
        if not np.isfinite(self.ratings[self.observed]).all():
            raise DataError("observed pair without a finite rating")

    @property
    def m(self):
        return self.ratings.shape[0]

    @property
    def n(self):
        return self.ratings.shape[1]

    @property
    def n_pairs(self):
        return self.m * self.n

    @property
    def n_observed(self):
        return int(self.observed.sum())

    def observed_pairs(self):
        """Row-major (users, items) of the observed set."""
        return np.nonzero(self.observed)

    def observed_flat(self):
        return np.flatnonzero(self.observed)

    def unflatten(self, flat):
        return np.divmod(np.asarray(flat, dtype=np.int64), self.n)

    def pair_features(self, users, items):
        """x_{u,i}: user features concatenated with item features."""
        return np.hstack([self.user_features[users], self.item_features[items]])

    @property
    def feature_dim(self):
        return self.user_features.shape[1] + self.item_features.shape[1]

    def with_observed(self, observed):
        observed = np.asarray(observed, dtype=bool)
        ratings = np.where(observed, self.ratings, np.nan)
        return replace(self, ratings=ratings, observed=observed)


@dataclass
class SyntheticGroundTruth:
    hidden_user: np.ndarray
    hidden_item: np.ndarray
    true_propensity: np.ndarray
    nominal_propensity: np.ndarray
    true_gamma: float
    ideal_ratings: np.ndarray
    seed: int = 0
    params: dict = field(default_factory=dict)


@dataclass
class SplitSpec:
    """Disjoint index sets (row-major flat pair indices) over an evaluation pool."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int = 0


# ---------------------------------------------------------------------------
# file formats


def _reindex(raw):
    uniq, dense = np.unique(raw, return_inverse=True)
    return uniq, dense


def load_triples(path, format="triple_tsv", rating_scale=(1.0, 5.0), reference=None):
    """Load interactions from ``path``.

    ``triple_tsv`` holds one ``user item rating`` line per interaction (whitespace or
    tab separated, ``#`` comments allowed).  ``coat_matrix`` is a dense rating matrix
    with 0 meaning missing.  Passing ``reference`` reuses its id maps and grid shape,
    which is how an unbiased test file is aligned with its training file.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if format == "coat_matrix":
        return _load_matrix(path, rating_scale, reference)
    if format != "triple_tsv":
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")

    users, items, values = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected 'user item rating', got {line!r}")
            try:
                u, i, r = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse {line!r}") from None
            if u < 0 or i < 0:
                raise DataError(f"{path}:{lineno}: negative index")
            if not math.isfinite(r):
                raise DataError(f"{path}:{lineno}: non-finite rating")
            users.append(u)
            items.append(i)
            values.append(r)
    if not users:
        raise DataError(f"{path}: no interactions")
    users = np.asarray(users)
    items = np.asarray(items)
    values = np.asarray(values)

    if reference is None:
        user_ids, uidx = _reindex(users)
        item_ids, iidx = _reindex(items)
    else:
        user_ids, item_ids = reference.user_ids, reference.item_ids
        uidx = _lookup(user_ids, users, path, "user")
        iidx = _lookup(item_ids, items, path, "item")
    m, n = len(user_ids), len(item_ids)

    flat = uidx * n + iidx
    # keep-last semantics for duplicates
    _, last = np.unique(flat[::-1], return_index=True)
    keep = len(flat) - 1 - last
    n_dup = len(flat) - len(keep)
    if n_dup:
        warnings.warn(f"{path}: {n_dup} duplicate (user, item) lines; kept the last occurrence")
    ratings = np.full(m * n, np.nan)
    ratings[flat[keep]] = values[keep]
    ratings = ratings.reshape(m, n)
    ds = Dataset(ratings, np.isfinite(ratings), rating_scale=tuple(rating_scale),
                 user_ids=user_ids, item_ids=item_ids)
    if reference is not None:
        ds.user_features = reference.user_features
        ds.item_features = reference.item_features
    return ds


def _lookup(ids, raw, path, what):
    pos = np.searchsorted(ids, raw)
    pos = np.clip(pos, 0, len(ids) - 1)
    bad = ids[pos] != raw
    if bad.any():
        raise DataError(f"{path}: {what} id {raw[bad][0]} not present in the reference dataset")
    return pos


def _load_matrix(path, rating_scale, reference):
    try:
        mat = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if reference is not None and mat.shape != (reference.m, reference.n):
        raise DataError(f"{path}: shape {mat.shape} does not match reference {(reference.m, reference.n)}")
    observed = mat != 0
    ratings = np.where(observed, mat, np.nan)
    ds = Dataset(ratings, observed, rating_scale=tuple(rating_scale))
    if reference is not None:
        ds.user_features = reference.user_features
        ds.item_features = reference.item_features
    return ds


def write_triples(dataset, path):
    users, items = dataset.observed_pairs()
    with open(path, "w") as fh:
        for u, i in zip(users, items):
            r = dataset.ratings[u, i]
            fh.write(f"{dataset.user_ids[u]}\t{dataset.item_ids[i]}\t{r:.17g}\n")


def write_features(features, ids, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"f{k + 1}" for k in range(features.shape[1])])
        for raw_id, row in zip(ids, features):
            w.writerow([raw_id] + [f"{v:.17g}" for v in row])


def load_features(path, ids):
    """Read an ``id,f1,f2,...`` CSV and return rows aligned with ``ids``."""
    table = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "id":
            raise DataError(f"{path}: first column must be 'id'")
        for lineno, row in enumerate(reader, start=2):
            try:
                table[int(row[0])] = [float(v) for v in row[1:]]
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: malformed feature row") from None
    width = len(header) - 1
    missing = [i for i in ids if int(i) not in table]
    if missing:
        raise DataError(f"{path}: no features for id {missing[0]}")
    return np.asarray([table[int(i)] for i in ids], dtype=float).reshape(len(ids), width)


# ---------------------------------------------------------------------------
# pseudo-features


def _factorize(dataset, dim, epochs, lr, l2):
    """Masked full-batch gradient descent from a truncated-SVD start.

    Full-batch updates keep the fit free of sampling order, so users (items) with
    identical rating rows receive identical embeddings.
    """
    obs = dataset.observed
    R = np.where(obs, dataset.ratings, 0.0)
    mu = R[obs].mean()
    C = np.where(obs, R - mu, 0.0)
    dim_eff = min(dim, *C.shape)
    U, s, Vt = np.linalg.svd(C, full_matrices=False)
    P = np.zeros((dataset.m, dim))
    Q = np.zeros((dataset.n, dim))
    root = np.sqrt(s[:dim_eff])
    P[:, :dim_eff] = U[:, :dim_eff] * root
    Q[:, :dim_eff] = Vt[:dim_eff].T * root
    nu = np.maximum(obs.sum(1), 1)[:, None]
    ni = np.maximum(obs.sum(0), 1)[:, None]
    for _ in range(epochs):
        resid = np.where(obs, mu + P @ Q.T - R, 0.0)
        gP = resid @ Q / nu + l2 * P
        gQ = resid.T @ P / ni + l2 * Q
        P = P - lr * gP
        Q = Q - lr * gQ
    return P, Q


def _cluster_onehot(emb, has_obs, clusters, seed):
    out = np.zeros((emb.shape[0], clusters))
    mean_emb = emb[has_obs].mean(0) if has_obs.any() else np.zeros(emb.shape[1])
    emb = emb.copy()
    emb[~has_obs] = mean_emb
    distinct = np.unique(emb, axis=0)
    k = min(clusters, len(distinct))
    if k <= 1:
        labels = np.zeros(len(emb), dtype=int)
    else:
        km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(emb)
        labels = km.labels_
    out[np.arange(len(emb)), labels] = 1.0
    return emb, out


def build_pseudo_features(dataset, latent_dim=8, clusters=8, seed=0, epochs=50, lr=0.05, l2=1e-4):
    """Attach [factorization embedding | one-hot k-means cluster] features to both sides."""
    if dataset.n_observed == 0:
        raise DataError("cannot build pseudo-features without observed ratings")
    if latent_dim < 1 or clusters < 2:
        raise ValueError("latent_dim must be >= 1 and clusters >= 2")
    P, Q = _factorize(dataset, latent_dim, epochs, lr, l2)
    P, user_onehot = _cluster_onehot(P, dataset.observed.any(1), clusters, seed)
    Q, item_onehot = _cluster_onehot(Q, dataset.observed.any(0), clusters, seed)
    return replace(dataset, user_features=np.hstack([P, user_onehot]),
                   item_features=np.hstack([Q, item_onehot]))


# ---------------------------------------------------------------------------
# synthetic data with planted hidden confounders

# N(0, 1) quintile cut points: five equally likely rating levels
_CUTS = np.array([-0.8416212335729143, -0.2533471031357997, 0.2533471031357997, 0.8416212335729143])


def generate_synthetic(m, n, latent_dim=8, confounding_strength=0.5, base_exposure=0.1, seed=0,
                       feature_noise=0.5, rating_confounding=1.0, noise=0.5):
    """Latent-factor ratings with a hidden user/item confounder driving exposure.

    Exposure is ``logistic(c + s_obs(x_u, x_i) + confounding_strength * (h_u + h_i))``
    where ``c`` is solved so the mean true propensity equals ``base_exposure``.  The
    nominal propensity drops the confounder term, so the true inverse-propensity odds
    stay within a factor ``exp(2 * confounding_strength * max|h|)`` of the nominal odds.
    """
    if m <= 0 or n <= 0 or latent_dim <= 0:
        raise ValueError("m, n and latent_dim must be positive")
    if not 0.0 < base_exposure < 1.0:
        raise ValueError("base_exposure must lie in (0, 1)")
    if confounding_strength < 0:
        raise ValueError("confounding_strength must be >= 0")
    rng = np.random.default_rng(seed)
    d = latent_dim
    U = rng.normal(size=(m, d))
    V = rng.normal(size=(n, d))
    h_u = rng.uniform(-1.0, 1.0, m)
    h_i = rng.uniform(-1.0, 1.0, n)
    x_u = U + feature_noise * rng.normal(size=(m, d))
    x_i = V + feature_noise * rng.normal(size=(n, d))
    a = rng.normal(size=d) / math.sqrt(d)
    b = rng.normal(size=d) / math.sqrt(d)
    obs_score = (x_u @ a)[:, None] + (x_i @ b)[None, :]
    hidden = confounding_strength * (h_u[:, None] + h_i[None, :])

    def gap(c):
        return expit(c + obs_score + hidden).mean() - base_exposure

    c = brentq(gap, -50.0, 50.0, xtol=1e-14)
    nominal = expit(c + obs_score)
    true_p = expit(c + obs_score + hidden)
    observed = rng.random((m, n)) < true_p

    raw = (U @ V.T) / math.sqrt(d) + rating_confounding * (h_u[:, None] + h_i[None, :])
    raw = raw + noise * rng.normal(size=(m, n))
    z = (raw - raw.mean()) / raw.std()
    ideal = 1.0 + np.searchsorted(_CUTS, z).astype(float)

    h_max = max(np.abs(h_u).max(), np.abs(h_i).max())
    truth = SyntheticGroundTruth(
        hidden_user=h_u, hidden_item=h_i, true_propensity=true_p, nominal_propensity=nominal,
        true_gamma=float(math.exp(2.0 * confounding_strength * h_max)), ideal_ratings=ideal,
        seed=seed,
        params=dict(m=m, n=n, latent_dim=d, confounding_strength=confounding_strength,
                    base_exposure=base_exposure, feature_noise=feature_noise,
                    rating_confounding=rating_confounding, noise=noise, intercept=c),
    )
    ds = Dataset(np.where(observed, ideal, np.nan), observed, user_features=x_u,
                 item_features=x_i, rating_scale=(1.0, 5.0))
    return ds, truth


def uniform_test_set(truth, items_per_user=16, seed=0, reference=None):
    """Uniformly exposed interactions (a randomized trial) drawn from the ideal ratings."""
    rng = np.random.default_rng(seed)
    m, n = truth.ideal_ratings.shape
    k = min(items_per_user, n)
    observed = np.zeros((m, n), dtype=bool)
    for u in range(m):
        observed[u, rng.choice(n, size=k, replace=False)] = True
    ds = Dataset(np.where(observed, truth.ideal_ratings, np.nan), observed)
    if reference is not None:
        ds.user_features = reference.user_features
        ds.item_features = reference.item_features
        ds.rating_scale = reference.rating_scale
    return ds


def write_ground_truth(dataset, truth, path):
    """CSV of (u, i, o, r, p_true, h_u, h_i) behind a one-line JSON header comment."""
    header = {"true_gamma": truth.true_gamma, "seed": truth.seed, **truth.params}
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["u", "i", "o", "r", "p_true", "h_u", "h_i"])
        for u in range(dataset.m):
            for i in range(dataset.n):
                w.writerow([u, i, int(dataset.observed[u, i]), f"{truth.ideal_ratings[u, i]:.17g}",
                            f"{truth.true_propensity[u, i]:.17g}", f"{truth.hidden_user[u]:.17g}",
                            f"{truth.hidden_item[i]:.17g}"])


def read_ground_truth(path):
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise DataError(f"{path}: missing JSON header line")
        header = json.loads(first[2:])
        rows = list(csv.DictReader(fh))
    m, n = int(header["m"]), int(header["n"])
    arr = lambda key, typ=float: np.array([typ(r[key]) for r in rows])  # noqa: E731
    u, i = arr("u", int), arr("i", int)
    o = np.zeros((m, n), dtype=bool)
    o[u, i] = arr("o", int).astype(bool)
    ideal = np.zeros((m, n))
    ideal[u, i] = arr("r")
    p = np.zeros((m, n))
    p[u, i] = arr("p_true")
    h_u = np.zeros(m)
    h_u[u] = arr("h_u")
    h_i = np.zeros(n)
    h_i[i] = arr("h_i")
    return header, o, ideal, p, h_u, h_i


# ---------------------------------------------------------------------------
# masking and splits


def apply_mask(dataset, mask_ratio, propensity, seed=0, mode="proportional"):
    """Hide floor(mask_ratio * |O|) observed entries, sampled by propensity.

    ``mode="proportional"`` removes high-propensity exposures preferentially;
    ``mode="inverse"`` removes low-propensity ones.
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in [0, 1)")
    flat = dataset.observed_flat()
    if flat.size == 0:
        raise DataError("cannot mask an empty observation set")
    k = int(math.floor(mask_ratio * flat.size))
    if k == 0:
        return dataset
    p = np.asarray(getattr(propensity, "p_hat", propensity), dtype=float).ravel()[flat]
    p = np.clip(p, 1e-12, None)
    if mode == "inverse":
        p = 1.0 / p
    elif mode != "proportional":
        raise ValueError(f"unknown mask mode {mode!r}")
    rng = np.random.default_rng(seed)
    drop = rng.choice(flat.size, size=k, replace=False, p=p / p.sum())
    observed = dataset.observed.copy().ravel()
    observed[flat[drop]] = False
    return dataset.with_observed(observed.reshape(dataset.observed.shape))


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Partition the observed pairs of ``dataset`` into train/validation/test.

    Validation and test sizes are ``round(f * N)``; train takes the remainder.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("need three fractions (train, validation, test)")
    if any(f < 0 or f > 1 for f in fractions):
        raise ValueError(f"fractions must lie in [0, 1]: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1: {fractions}")
    pool = dataset.observed_flat()
    order = np.random.default_rng(seed).permutation(pool.size)
    n_val = int(round(fractions[1] * pool.size))
    n_test = int(round(fractions[2] * pool.size))
    n_train = pool.size - n_val - n_test
    if n_train < 0:
        n_test += n_train
        n_train = 0
    shuffled = pool[order]
    return SplitSpec(np.sort(shuffled[:n_train]), np.sort(shuffled[n_train:n_train + n_val]),
                     np.sort(shuffled[n_train + n_val:]), seed)
