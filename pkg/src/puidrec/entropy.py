"""Binned plug-in entropies of the exposure indicator and per-pair sensitivity scores."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata
from sklearn.cluster import KMeans


@dataclass
class Partition:
    user_group: np.ndarray
    item_group: np.ndarray
    user_centroids: np.ndarray
    item_centroids: np.ndarray
    min_cell_count: int = 50
    merges: list = field(default_factory=list)

    @property
    def n_user_groups(self):
        return len(self.user_centroids)

    @property
    def n_item_groups(self):
        return len(self.item_centroids)

    def summary(self):
        return {
            "user_group_sizes": np.bincount(self.user_group, minlength=self.n_user_groups).tolist(),
            "item_group_sizes": np.bincount(self.item_group, minlength=self.n_item_groups).tolist(),
            "min_cell_count": self.min_cell_count,
            "merges": [list(mg) for mg in self.merges],
        }


@dataclass
class SensitivityField:
    raw_score: np.ndarray
    gamma: np.ndarray
    alpha: float
    beta: float
    gamma_max: float
    term_user: np.ndarray
    term_pair: np.ndarray

    def to_csv(self, path):
        m, n = self.gamma.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "i", "term_user", "term_pair", "s", "gamma"])
            for u in range(m):
                for i in range(n):
                    w.writerow([u, i, f"{self.term_user[u, i]:.17g}", f"{self.term_pair[u, i]:.17g}",
                                f"{self.raw_score[u, i]:.17g}", f"{self.gamma[u, i]:.17g}"])


def constant_field(shape, gamma):
    """A flat field, Γ ≡ gamma; the global-bound special case."""
    zeros = np.zeros(shape)
    return SensitivityField(zeros, np.full(shape, float(gamma)), 0.0, 0.0, float(gamma), zeros, zeros)


# ---------------------------------------------------------------------------
# partitions


def _dense(labels):
    _, inv = np.unique(labels, return_inverse=True)
    return inv.ravel()


def _initial_groups(x, groups, seed):
    if x.shape[1] == 0 or groups <= 1:
        return np.zeros(len(x), dtype=int)
    distinct, inverse = np.unique(x, axis=0, return_inverse=True)
    if len(distinct) <= groups:
        # categorical levels, including the all-identical case
        return inverse.ravel()
    if x.shape[1] == 1:
        rank = rankdata(x[:, 0], method="min").astype(int) - 1
        return _dense(rank * groups // len(x))
    km = KMeans(n_clusters=groups, n_init=10, random_state=seed).fit(x)
    return _dense(km.labels_)


def _centroids(x, labels):
    k = labels.max() + 1
    counts = np.bincount(labels, minlength=k)[:, None]
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    return sums / counts


def _merge_small(x, labels, pairs_per_member, min_cell_count, side, merges):
    labels = labels.copy()
    while True:
        cents = _centroids(x, labels)
        sizes = np.bincount(labels) * pairs_per_member
        small = np.flatnonzero(sizes < min_cell_count)
        if small.size == 0 or len(sizes) == 1:
            return labels, cents
        g = small[np.argmin(sizes[small])]
        dist = np.linalg.norm(cents - cents[g], axis=1)
        dist[g] = np.inf
        target = int(np.argmin(dist))  # argmin picks the lower id on ties
        merges.append((side, int(g), target))
        labels[labels == g] = target
        labels = _dense(labels)


def partition_features(dataset, groups_user=8, groups_item=8, min_cell_count=50, seed=0):
    """Hybrid binning of each side's features.

    1-D features are cut at quantiles, features with at most ``groups`` distinct
    rows are treated as categorical levels, anything else is clustered with k-means.
    Groups whose grid mass falls below ``min_cell_count`` pairs merge into the group
    with the nearest centroid.
    """
    if groups_user < 1 or groups_item < 1:
        raise ValueError("group counts must be >= 1")
    merges = []
    xu = np.asarray(dataset.user_features, dtype=float)
    xi = np.asarray(dataset.item_features, dtype=float)
    ug, uc = _merge_small(xu, _initial_groups(xu, groups_user, seed), dataset.n, min_cell_count,
                          "user", merges)
    ig, ic = _merge_small(xi, _initial_groups(xi, groups_item, seed), dataset.m, min_cell_count,
                          "item", merges)
    return Partition(ug, ig, uc, ic, min_cell_count, merges)


# ---------------------------------------------------------------------------
# entropies (bits)


def binary_entropy(p):
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    inner = (p > 0) & (p < 1)
    q = p[inner]
    out[inner] = -(q * np.log2(q) + (1 - q) * np.log2(1 - q))
    return out


def marginal_entropy(observed):
    o = np.asarray(observed).ravel()
    if o.size == 0:
        raise ValueError("entropy of an empty sequence")
    return float(binary_entropy(o.mean()))


def cell_table(observed, cells):
    """Per-cell (count, exposure rate, entropy) for integer cell ids."""
    o = np.asarray(observed, dtype=float).ravel()
    c = np.asarray(cells).ravel()
    counts = np.bincount(c)
    ones = np.bincount(c, weights=o, minlength=len(counts))
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(counts > 0, ones / np.maximum(counts, 1), 0.0)
    return counts, rate, binary_entropy(rate)


def conditional_entropy(observed, cells):
    """Σ_j P(cell_j) H(o | cell_j) for a grouping given as one cell id per sample."""
    o = np.asarray(observed).ravel()
    if o.size == 0:
        raise ValueError("entropy of an empty sequence")
    counts, _, h = cell_table(o, cells)
    assert (counts[np.unique(np.asarray(cells).ravel())] > 0).all()
    return float(np.dot(counts / o.size, h))


def local_information_gains(dataset, partition):
    """Per-pair (term_user, term_pair) information gains, clamped at zero.

    term_user is H(o) - H(o | user group); term_pair is H(o | user group) minus the
    entropy of the pair's (user group, item group) cell.  Joint cells holding fewer
    than ``min_cell_count`` pairs fall back to the user-group entropy.
    """
    o = dataset.observed
    ug, ig = partition.user_group, partition.item_group
    Gu, Gi = partition.n_user_groups, partition.n_item_groups
    h0 = marginal_entropy(o)

    user_cells = np.broadcast_to(ug[:, None], o.shape)
    _, _, h_user = cell_table(o, user_cells)
    joint = ug[:, None] * Gi + ig[None, :]
    counts, _, h_joint = cell_table(o, joint)
    counts = np.pad(counts, (0, Gu * Gi - len(counts)))
    h_joint = np.pad(h_joint, (0, Gu * Gi - len(h_joint)))

    hu = h_user[ug][:, None]
    hj = h_joint[joint]
    small = counts[joint] < partition.min_cell_count
    term_user = np.broadcast_to(np.maximum(0.0, h0 - hu), o.shape).copy()
    term_pair = np.where(small, 0.0, np.maximum(0.0, hu - hj))
    return term_user, term_pair


def compute_gamma(term_user, term_pair, alpha=1.0, beta=1.0, gamma_max=2.0):
    """Min-max map of s = α·term_user + β·term_pair onto [1, gamma_max]."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    if gamma_max < 1:
        raise ValueError("gamma_max must be >= 1")
    term_user = np.asarray(term_user, dtype=float)
    term_pair = np.asarray(term_pair, dtype=float)
    s = alpha * term_user + beta * term_pair
    lo, hi = s.min(), s.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        gamma = np.full(s.shape, float(gamma_max))
    else:
        gamma = 1.0 + (gamma_max - 1.0) * (s - lo) / (hi - lo)
        gamma = np.clip(gamma, 1.0, gamma_max)
    return SensitivityField(s, gamma, float(alpha), float(beta), float(gamma_max), term_user, term_pair)


def estimate_sensitivity(dataset, groups_user=8, groups_item=8, min_cell_count=50, alpha=1.0,
                         beta=1.0, gamma_max=2.0, seed=0):
    partition = partition_features(dataset, groups_user, groups_item, min_cell_count, seed)
    tu, tp = local_information_gains(dataset, partition)
    return compute_gamma(tu, tp, alpha, beta, gamma_max), partition


def write_partition_summary(partition, path):
    with open(path, "w") as fh:
        json.dump(partition.summary(), fh, indent=2)
