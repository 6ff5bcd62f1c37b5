"""Loss functionals: naive, IPS, DR and their box-robust and benchmark-differenced forms.

Every adversarial objective here is linear in the inverse-propensity weights, so
the maximization over the per-pair box [ã, b̃] is solved exactly by taking b̃
where the pair's coefficient is positive and ã elsewhere (ties go to ã).

Array-level functions take flat per-pair arrays: ``obs`` (bool), errors ``err``
(ignored where unobserved), imputations ``imp`` and box bounds.  Model-level
``loss_*`` wrappers evaluate the models on the whole grid and call them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .predictors import pair_error


@dataclass
class AdversarialWeights:
    w: np.ndarray
    value: float


@dataclass
class LossReport:
    """value == (base + coefficients · weights) / normalizer."""

    estimator: str
    value: float
    coefficients: np.ndarray
    weights: np.ndarray
    normalizer: float
    base: float = 0.0
    batch: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def weight_stats(self, obs=None):
        w = self.weights if obs is None else self.weights[np.asarray(obs, dtype=bool)]
        if w.size == 0:
            return {"min": None, "mean": None, "max": None}
        return {"min": float(w.min()), "mean": float(w.mean()), "max": float(w.max())}

    def to_json(self, obs=None):
        return json.dumps({"estimator": self.estimator, "value": self.value, "batch": self.batch,
                           "weights": self.weight_stats(obs), **self.diagnostics}, sort_keys=True)


def inner_maximize(coefficients, lower, upper):
    """argmax of Σ c·w over the box lower <= w <= upper, plus the maximal value."""
    c = np.asarray(coefficients, dtype=float)
    bad = ~np.isfinite(c)
    if bad.any():
        raise NumericError(f"non-finite coefficient at pair index {int(np.flatnonzero(bad)[0])}")
    w = np.where(c > 0, upper, lower)
    return AdversarialWeights(w, float(np.dot(c, w)))


def _masked(obs, values):
    return np.where(obs, np.nan_to_num(values), 0.0)


def _report(name, coef, w, normalizer, base=0.0, **diag):
    value = (base + float(np.dot(coef, w))) / normalizer
    if not np.isfinite(value):
        raise NumericError(f"{name} loss is not finite")
    return LossReport(name, value, coef, w, normalizer, base, diagnostics=diag)


def _robust(name, coef, lower, upper, normalizer, base=0.0, **diag):
    adv = inner_maximize(coef, lower, upper)
    return _report(name, coef, adv.w, normalizer, base, **diag)


# ---------------------------------------------------------------------------
# array-level estimators


def naive(obs, err):
    obs = np.asarray(obs, dtype=bool)
    if not obs.any():
        raise DataError("naive loss needs at least one observed pair")
    coef = _masked(obs, err)
    return _report("naive", coef, obs.astype(float), float(obs.sum()))


def ips(obs, err, inv_p, n_pairs=None):
    obs = np.asarray(obs, dtype=bool)
    return _report("ips", _masked(obs, err), np.asarray(inv_p, dtype=float), n_pairs or obs.size)


def dr(obs, err, imp, inv_p, n_pairs=None):
    obs = np.asarray(obs, dtype=bool)
    imp = np.asarray(imp, dtype=float)
    coef = _masked(obs, np.nan_to_num(err) - imp)
    return _report("dr", coef, np.asarray(inv_p, dtype=float), n_pairs or obs.size,
                   base=float(imp.sum()))


def puid_ips(obs, err, lower, upper, n_pairs=None, name="puid_ips"):
    obs = np.asarray(obs, dtype=bool)
    return _robust(name, _masked(obs, err), lower, upper, n_pairs or obs.size)


def puid_dr(obs, err, imp, lower, upper, n_pairs=None, name="puid_dr"):
    obs = np.asarray(obs, dtype=bool)
    imp = np.asarray(imp, dtype=float)
    coef = _masked(obs, np.nan_to_num(err) - imp)
    return _robust(name, coef, lower, upper, n_pairs or obs.size, base=float(imp.sum()))


def imp_puid(obs, err, imp, lower, upper, name="imp_puid"):
    obs = np.asarray(obs, dtype=bool)
    if not obs.any():
        raise DataError("imputation loss needs at least one observed pair")
    diff = np.nan_to_num(err) - np.asarray(imp, dtype=float)
    return _robust(name, _masked(obs, diff * diff), lower, upper, float(obs.sum()))


def _gap_diagnostics(delta, plain, gamma_max):
    # the two worst-case magnitude scales (Γ-1)·‖Δe‖∞ and Γ·‖e‖∞
    return {"bound_benchmarked": float((gamma_max - 1.0) * np.abs(delta).max(initial=0.0)),
            "bound_plain": float(gamma_max * np.abs(plain).max(initial=0.0))}


def bpuid_ips(obs, err, err0, lower, upper, n_pairs=None, name="bpuid_ips", gamma_max=None):
    obs = np.asarray(obs, dtype=bool)
    coef = _masked(obs, np.nan_to_num(err) - np.nan_to_num(err0))
    diag = {} if gamma_max is None else _gap_diagnostics(coef, _masked(obs, err), gamma_max)
    return _robust(name, coef, lower, upper, n_pairs or obs.size, **diag)


def bpuid_dr(obs, err, imp, err0, imp0, lower, upper, n_pairs=None, name="bpuid_dr"):
    obs = np.asarray(obs, dtype=bool)
    imp = np.asarray(imp, dtype=float)
    imp0 = np.asarray(imp0, dtype=float)
    resid = np.nan_to_num(err) - imp
    resid0 = np.nan_to_num(err0) - imp0
    coef = _masked(obs, resid - resid0)
    return _robust(name, coef, lower, upper, n_pairs or obs.size, base=float((imp - imp0).sum()))


def imp_bpuid(obs, err, imp, err0, imp0, lower, upper, name="imp_bpuid"):
    obs = np.asarray(obs, dtype=bool)
    if not obs.any():
        raise DataError("imputation loss needs at least one observed pair")
    d = np.asarray(imp, dtype=float) - np.nan_to_num(err)
    d0 = np.asarray(imp0, dtype=float) - np.nan_to_num(err0)
    return _robust(name, _masked(obs, d * d - d0 * d0), lower, upper, float(obs.sum()))


# ---------------------------------------------------------------------------
# model-level wrappers over the full grid


def grid_errors(model, dataset, error_type="squared"):
    pred = model.predict_grid(dataset)
    return np.where(dataset.observed, pair_error(pred, np.nan_to_num(dataset.ratings), error_type),
                    np.nan)


def _box_arrays(box, shape):
    if box.lower.shape != shape:
        raise DataError(f"box grid {box.lower.shape} does not cover dataset grid {shape}")
    return box.lower.ravel(), box.upper.ravel()


def _inv(propensity, shape):
    p = np.asarray(getattr(propensity, "p_hat", propensity), dtype=float)
    if p.shape != shape:
        raise DataError("propensities do not cover the dataset grid")
    if (p <= 0).any():
        raise DataError("propensities must be strictly positive")
    return (1.0 / p).ravel()


def _bench(benchmark, dataset):
    benchmark.check(dataset)
    return benchmark.errors.ravel(), benchmark.imputed.ravel()


def loss_naive(model, dataset, error_type="squared"):
    return naive(dataset.observed.ravel(), grid_errors(model, dataset, error_type).ravel())


def loss_ips(model, dataset, propensity, error_type="squared"):
    return ips(dataset.observed.ravel(), grid_errors(model, dataset, error_type).ravel(),
               _inv(propensity, dataset.observed.shape))


def loss_dr(model, imputation, dataset, propensity, error_type="squared"):
    return dr(dataset.observed.ravel(), grid_errors(model, dataset, error_type).ravel(),
              imputation.predict_grid(dataset).ravel(), _inv(propensity, dataset.observed.shape))


def loss_puid_ips(model, dataset, box, error_type="squared"):
    lo, hi = _box_arrays(box, dataset.observed.shape)
    return puid_ips(dataset.observed.ravel(), grid_errors(model, dataset, error_type).ravel(), lo, hi)


def loss_puid_dr(model, imputation, dataset, box, error_type="squared"):
    lo, hi = _box_arrays(box, dataset.observed.shape)
    return puid_dr(dataset.observed.ravel(), grid_errors(model, dataset, error_type).ravel(),
                   imputation.predict_grid(dataset).ravel(), lo, hi)


def loss_imp_puid(imputation, model, dataset, box, error_type="squared"):
    lo, hi = _box_arrays(box, dataset.observed.shape)
    return imp_puid(dataset.observed.ravel(), grid_errors(model, dataset, error_type).ravel(),
                    imputation.predict_grid(dataset).ravel(), lo, hi)


def loss_bpuid_ips(model, dataset, box, benchmark, error_type=None):
    lo, hi = _box_arrays(box, dataset.observed.shape)
    e0, _ = _bench(benchmark, dataset)
    err = grid_errors(model, dataset, error_type or benchmark.error_type).ravel()
    return bpuid_ips(dataset.observed.ravel(), err, e0, lo, hi, gamma_max=float(box.gamma.max()))


def loss_bpuid_dr(model, imputation, dataset, box, benchmark, error_type=None):
    lo, hi = _box_arrays(box, dataset.observed.shape)
    e0, i0 = _bench(benchmark, dataset)
    err = grid_errors(model, dataset, error_type or benchmark.error_type).ravel()
    return bpuid_dr(dataset.observed.ravel(), err, imputation.predict_grid(dataset).ravel(), e0, i0,
                    lo, hi)


def loss_imp_bpuid(imputation, model, dataset, box, benchmark, error_type=None):
    lo, hi = _box_arrays(box, dataset.observed.shape)
    e0, i0 = _bench(benchmark, dataset)
    err = grid_errors(model, dataset, error_type or benchmark.error_type).ravel()
    return imp_bpuid(dataset.observed.ravel(), err, imputation.predict_grid(dataset).ravel(), e0, i0,
                     lo, hi)
