"""Nominal propensities and the per-pair inverse-propensity boxes built from them."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression

from .entropy import constant_field
from .errors import DataError

PROPENSITY_MODES = ("logistic", "popularity")


@dataclass
class PropensityField:
    p_hat: np.ndarray
    clip_floor: float = 0.02
    model_params: dict = field(default_factory=dict)

    @property
    def inverse(self):
        return 1.0 / self.p_hat


@dataclass
class UncertaintyBox:
    lower: np.ndarray
    upper: np.ndarray
    p_hat: np.ndarray
    gamma: np.ndarray

    def contains(self, w):
        return (self.lower <= w) & (w <= self.upper)

    def to_csv(self, path):
        m, n = self.lower.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "i", "p_hat", "gamma", "a", "b"])
            for u in range(m):
                for i in range(n):
                    w.writerow([u, i, f"{self.p_hat[u, i]:.17g}", f"{self.gamma[u, i]:.17g}",
                                f"{self.lower[u, i]:.17g}", f"{self.upper[u, i]:.17g}"])


def fit_propensity(dataset, mode="logistic", clip_floor=0.02, C=1.0):
    """Estimate p(o=1 | x_{u,i}) over the full grid.

    ``logistic`` regresses exposure on the concatenated pair features and falls back
    to ``popularity`` (Laplace-smoothed item exposure rate) when no features exist.
    """
    if not 0 < clip_floor <= 1:
        raise ValueError("clip_floor must lie in (0, 1]")
    if mode not in PROPENSITY_MODES:
        raise ValueError(f"unknown propensity mode {mode!r}")
    shape = dataset.observed.shape
    n_obs = dataset.n_observed
    if n_obs == dataset.n_pairs:
        warnings.warn("every pair is observed; propensities set to 1")
        return PropensityField(np.ones(shape), clip_floor, {"mode": "saturated"})
    if n_obs == 0:
        raise DataError("no observed pairs to fit propensities on")

    if mode == "logistic" and dataset.feature_dim > 0:
        users, items = np.indices(shape).reshape(2, -1)
        X = dataset.pair_features(users, items)
        y = dataset.observed.ravel().astype(int)
        clf = LogisticRegression(C=C, max_iter=1000).fit(X, y)
        p = clf.predict_proba(X)[:, 1].reshape(shape)
        params = {"mode": "logistic", "coef": clf.coef_.ravel().tolist(),
                  "intercept": float(clf.intercept_[0])}
    else:
        counts = dataset.observed.sum(0)
        rate = (counts + 1.0) / (dataset.m + 2.0)
        p = np.broadcast_to(rate[None, :], shape).copy()
        params = {"mode": "popularity"}
    return PropensityField(np.clip(p, clip_floor, 1.0), clip_floor, params)


def calibration_slope(p_hat, observed, buckets=10):
    """Least-squares slope of the empirical exposure rate on mean p̂ across quantile buckets."""
    p = np.asarray(p_hat, dtype=float).ravel()
    o = np.asarray(observed, dtype=float).ravel()
    order = np.argsort(p, kind="stable")
    chunks = np.array_split(order, buckets)
    mean_p = np.array([p[c].mean() for c in chunks])
    rate = np.array([o[c].mean() for c in chunks])
    slope, _ = np.polyfit(mean_p, rate, 1)
    return float(slope)


def personalized_box(propensity, sensitivity):
    """ã = 1 + (1/p̂ - 1)/Γ and b̃ = 1 + (1/p̂ - 1)·Γ per pair."""
    p = np.asarray(propensity.p_hat, dtype=float)
    gamma = np.asarray(sensitivity.gamma, dtype=float)
    if p.shape != gamma.shape:
        raise DataError(f"propensity grid {p.shape} and sensitivity grid {gamma.shape} differ")
    if (p <= 0).any():
        raise DataError("propensities must be strictly positive")
    if (gamma < 1).any():
        raise DataError("sensitivity values must be >= 1")
    excess = 1.0 / p - 1.0
    return UncertaintyBox(1.0 + excess / gamma, 1.0 + excess * gamma, p, gamma)


def global_box(propensity, gamma_global):
    if gamma_global < 1:
        raise ValueError("gamma_global must be >= 1")
    return personalized_box(propensity, constant_field(np.shape(propensity.p_hat), gamma_global))
