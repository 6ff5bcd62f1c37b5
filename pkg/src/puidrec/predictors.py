"""Factorization predictors with an optional feature-fusion MLP and hand-written gradients.

A :class:`FactorModel` scores a pair as

    P_u·Q_i + b_u + b_i + g  [+ w2·relu(W1 [P_u | Q_i | x_ui] + b1) + b2]

The imputation model is the same family with a softplus on the output so that
imputed errors stay non-negative.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

ERROR_TYPES = ("squared", "absolute")
CHECKPOINT_FORMAT = "puidrec-model"
CHECKPOINT_VERSION = 1
OPTIMIZERS = ("adam", "sgd")
_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class FactorModel:
    def __init__(self, m, n, dim=16, feature_dim=0, hidden=0, l2=1e-5, positive=False, seed=0,
                 momentum=0.0, optimizer="adam", init_scale=0.01):
        if optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.m, self.n, self.dim = int(m), int(n), int(dim)
        self.feature_dim, self.hidden = int(feature_dim), int(hidden)
        self.l2, self.positive, self.momentum = float(l2), bool(positive), float(momentum)
        self.optimizer = optimizer
        rng = np.random.default_rng(seed)
        self.params = {
            "P": rng.uniform(-init_scale, init_scale, (self.m, self.dim)),
            "Q": rng.uniform(-init_scale, init_scale, (self.n, self.dim)),
            "bu": np.zeros(self.m),
            "bi": np.zeros(self.n),
            "g": np.zeros(1),
        }
        if self.hidden:
            fan_in = 2 * self.dim + self.feature_dim
            lim = 1.0 / np.sqrt(fan_in)
            self.params["W1"] = rng.uniform(-lim, lim, (self.hidden, fan_in))
            self.params["b1"] = np.zeros(self.hidden)
            self.params["w2"] = rng.uniform(-init_scale, init_scale, self.hidden)
            self.params["b2"] = np.zeros(1)
        self._state = None

    # -- configuration / serialization ------------------------------------

    def config(self):
        return dict(m=self.m, n=self.n, dim=self.dim, feature_dim=self.feature_dim,
                    hidden=self.hidden, l2=self.l2, positive=self.positive, momentum=self.momentum,
                    optimizer=self.optimizer)

    def copy(self):
        return copy.deepcopy(self)

    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config(),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise DataError("not a puidrec model checkpoint (or unsupported version)")
        model = cls(**doc["config"])
        for k, rec in doc["params"].items():
            model.params[k] = np.asarray(rec["data"], dtype=float).reshape(rec["shape"])
        return model

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def fingerprint(self):
        h = hashlib.sha1()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(v.tobytes())
        return h.hexdigest()

    # -- forward / backward --------------------------------------------------

    def forward(self, users, items, x=None):
        p = self.params
        users = np.asarray(users)
        items = np.asarray(items)
        pu, qi = p["P"][users], p["Q"][items]
        raw = np.einsum("bd,bd->b", pu, qi) + p["bu"][users] + p["bi"][items] + p["g"][0]
        cache = {"users": users, "items": items, "pu": pu, "qi": qi}
        if self.hidden:
            if x is None:
                x = np.zeros((len(users), self.feature_dim))
            z = np.hstack([pu, qi, x])
            pre = z @ p["W1"].T + p["b1"]
            act = np.maximum(pre, 0.0)
            raw = raw + act @ p["w2"] + p["b2"][0]
            cache.update(z=z, pre=pre, act=act)
        cache["raw"] = raw
        out = _softplus(raw) if self.positive else raw
        return out, cache

    def predict(self, users, items, x=None):
        return self.forward(users, items, x)[0]

    def predict_grid(self, dataset):
        if not self.hidden:
            p = self.params
            raw = p["P"] @ p["Q"].T + p["bu"][:, None] + p["bi"][None, :] + p["g"][0]
            return _softplus(raw) if self.positive else raw
        users, items = np.indices((self.m, self.n)).reshape(2, -1)
        x = dataset.pair_features(users, items) if self.feature_dim else None
        return self.predict(users, items, x).reshape(self.m, self.n)

    def backward(self, cache, grad_out):
        """Gradients of Σ_b grad_out[b]·out[b] with respect to every parameter block."""
        p = self.params
        g_raw = np.asarray(grad_out, dtype=float)
        if self.positive:
            g_raw = g_raw * _sigmoid(cache["raw"])
        users, items = cache["users"], cache["items"]
        g_pu = g_raw[:, None] * cache["qi"]
        g_qi = g_raw[:, None] * cache["pu"]
        grads = {"bu": np.bincount(users, weights=g_raw, minlength=self.m),
                 "bi": np.bincount(items, weights=g_raw, minlength=self.n),
                 "g": np.array([g_raw.sum()])}
        if self.hidden:
            g_act = g_raw[:, None] * p["w2"][None, :]
            g_pre = g_act * (cache["pre"] > 0)
            grads["w2"] = cache["act"].T @ g_raw
            grads["b2"] = np.array([g_raw.sum()])
            grads["W1"] = g_pre.T @ cache["z"]
            grads["b1"] = g_pre.sum(0)
            g_z = g_pre @ p["W1"]
            g_pu = g_pu + g_z[:, : self.dim]
            g_qi = g_qi + g_z[:, self.dim: 2 * self.dim]
        gP = np.zeros_like(p["P"])
        gQ = np.zeros_like(p["Q"])
        np.add.at(gP, users, g_pu)
        np.add.at(gQ, items, g_qi)
        grads["P"], grads["Q"] = gP, gQ
        return grads

    def l2_penalty(self):
        return self.l2 * sum(float(np.sum(v * v)) for v in self.params.values())

    def apply_gradients(self, grads, lr):
        """One optimizer step on the given data gradients plus the L2 term."""
        if self._state is None:
            self._state = {"t": 0, "m": {k: np.zeros_like(v) for k, v in self.params.items()},
                           "v": {k: np.zeros_like(v) for k, v in self.params.items()}}
        st = self._state
        st["t"] += 1
        for k, v in self.params.items():
            g = grads.get(k)
            g = 2.0 * self.l2 * v if g is None else g + 2.0 * self.l2 * v
            if self.optimizer == "sgd":
                if self.momentum:
                    vel = st["m"][k]
                    vel *= self.momentum
                    vel += g
                    g = vel
                v -= lr * g
                continue
            mom, sq = st["m"][k], st["v"][k]
            mom *= _ADAM_B1
            mom += (1.0 - _ADAM_B1) * g
            sq *= _ADAM_B2
            sq += (1.0 - _ADAM_B2) * g * g
            m_hat = mom / (1.0 - _ADAM_B1 ** st["t"])
            v_hat = sq / (1.0 - _ADAM_B2 ** st["t"])
            v -= lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


def RatingModel(m, n, **kw):
    return FactorModel(m, n, positive=False, **kw)


def ImputationModel(m, n, **kw):
    return FactorModel(m, n, positive=True, **kw)


# ---------------------------------------------------------------------------
# errors


def pair_error(pred, target, error_type="squared"):
    diff = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    if error_type == "squared":
        return diff * diff
    if error_type == "absolute":
        return np.abs(diff)
    raise ValueError(f"unknown error type {error_type!r}")


def error_derivative(pred, target, error_type="squared"):
    """d e / d r̂ (subgradient 0 at the kink of the absolute error)."""
    diff = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    if error_type == "squared":
        return 2.0 * diff
    if error_type == "absolute":
        return np.sign(diff)
    raise ValueError(f"unknown error type {error_type!r}")


def predict(model, u, i, features=None):
    x = None if features is None else np.atleast_2d(features)
    return float(model.predict(np.atleast_1d(u), np.atleast_1d(i), x)[0])


def error(model, u, i, dataset, error_type="squared"):
    """e_{u,i} for an observed pair of ``dataset``."""
    if not dataset.observed[u, i]:
        raise DataError(f"pair ({u}, {i}) is not observed")
    x = dataset.pair_features([u], [i]) if model.feature_dim else None
    return float(pair_error(model.predict([u], [i], x), dataset.ratings[u, i], error_type)[0])


def weighted_error_loss(model, users, items, ratings, weights, error_type="squared", x=None):
    """Σ w·e(r̂, r) + L2 penalty; the objective one ``gradient_step`` descends."""
    pred = model.predict(users, items, x)
    return float(np.dot(weights, pair_error(pred, ratings, error_type))) + model.l2_penalty()


def gradient_step(model, users, items, ratings, weights, learning_rate, error_type="squared", x=None):
    """One step on Σ w·e(r̂_{u,i}, r_{u,i}) + l2·||params||²; mutates and returns ``model``."""
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    weights = np.asarray(weights, dtype=float)
    if not np.isfinite(weights).all():
        raise NumericError("non-finite weight")
    pred, cache = model.forward(users, items, x)
    g_out = weights * error_derivative(pred, ratings, error_type)
    bad = ~np.isfinite(g_out)
    if bad.any():
        b = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite gradient at pair ({users[b]}, {items[b]})")
    model.apply_gradients(model.backward(cache, g_out), learning_rate)
    return model


# ---------------------------------------------------------------------------
# frozen benchmark


@dataclass
class BenchmarkSnapshot:
    phi: FactorModel
    theta: FactorModel | None
    errors: np.ndarray  # e(φ⁰) on the observed set, NaN elsewhere
    imputed: np.ndarray  # ê(θ⁰) over the full grid (zeros when no imputation model)
    error_type: str
    phi_fingerprint: str
    theta_fingerprint: str | None

    def check(self, dataset):
        """Raise if the caches no longer match the frozen parameters or the dataset."""
        if self.phi.fingerprint() != self.phi_fingerprint or (
                self.theta is not None and self.theta.fingerprint() != self.theta_fingerprint):
            raise DataError("stale benchmark: frozen parameters were modified")
        if self.errors.shape != dataset.observed.shape:
            raise DataError("benchmark caches do not cover this dataset")
        if not np.isfinite(self.errors[dataset.observed]).all():
            raise DataError("stale benchmark: error cache does not cover the observed set")


def benchmark_caches(phi, theta, dataset, error_type):
    pred = phi.predict_grid(dataset)
    errors = np.where(dataset.observed, pair_error(pred, np.nan_to_num(dataset.ratings), error_type),
                      np.nan)
    imputed = theta.predict_grid(dataset) if theta is not None else np.zeros(dataset.observed.shape)
    return errors, imputed


def snapshot(model_phi, model_theta, dataset, error_type="squared"):
    phi = model_phi.copy()
    theta = None if model_theta is None else model_theta.copy()
    errors, imputed = benchmark_caches(phi, theta, dataset, error_type)
    return BenchmarkSnapshot(phi, theta, errors, imputed, error_type, phi.fingerprint(),
                             None if theta is None else theta.fingerprint())
