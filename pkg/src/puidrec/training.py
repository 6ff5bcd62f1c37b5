"""Alternating minimax training for every estimator, with benchmark pretraining for BPUID/BRD."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import objectives as obj
from .errors import DataError, NumericError
from .evaluation import evaluate
from .predictors import FactorModel, error_derivative, pair_error, snapshot

# estimator -> (base family, robustness, box)
ESTIMATORS = {
    "naive": ("naive", None, None),
    "ips": ("ips", None, None),
    "dr": ("dr", None, None),
    "rd_ips": ("ips", "robust", "global"),
    "rd_dr": ("dr", "robust", "global"),
    "puid_ips": ("ips", "robust", "personalized"),
    "puid_dr": ("dr", "robust", "personalized"),
    "brd_ips": ("ips", "benchmark", "global"),
    "brd_dr": ("dr", "benchmark", "global"),
    "bpuid_ips": ("ips", "benchmark", "personalized"),
    "bpuid_dr": ("dr", "benchmark", "personalized"),
}


def family(estimator):
    return ESTIMATORS[estimator][0]


def needs_box(estimator):
    return ESTIMATORS[estimator][1] is not None


def box_kind(estimator):
    return ESTIMATORS[estimator][2]


def uses_benchmark(estimator):
    return ESTIMATORS[estimator][1] == "benchmark"


def benchmark_estimator(estimator):
    """The non-robust counterpart a benchmark-guided estimator is anchored to."""
    return family(estimator)


@dataclass
class TrainConfig:
    estimator: str = "naive"
    epochs: int = 30
    batch_size: int = 1024
    lr_phi: float = 0.01
    lr_theta: float = 0.01
    l2: float = 1e-5
    error_type: str = "squared"
    gamma_max: float = 2.0
    gamma_global: float = 2.0
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    patience: int = 5
    dim: int = 16
    hidden: int = 0
    momentum: float = 0.0
    optimizer: str = "adam"
    ks: tuple = (5,)
    threshold: float = 4.0
    bins_user: int = 8
    bins_item: int = 8
    min_cell: int = 50
    propensity: str = "logistic"
    clip_floor: float = 0.02
    benchmark_epochs: int | None = None

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; expected one of {sorted(ESTIMATORS)}")
        if self.lr_phi <= 0 or self.lr_theta <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.error_type not in ("squared", "absolute"):
            raise ValueError(f"unknown error type {self.error_type!r}")
        self.ks = tuple(int(k) for k in self.ks)

    def to_dict(self):
        d = asdict(self)
        d["ks"] = list(self.ks)
        return d

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class TrainedModels:
    phi: FactorModel
    theta: FactorModel | None
    benchmark: object | None
    trace: list = field(default_factory=list)
    best_epoch: int = 0
    final_loss: float = float("nan")

    def write_trace(self, path):
        cols = ["epoch", "train_loss", "val_uauc", "val_ndcg", "wall_time"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for row in self.trace:
                w.writerow(row)


def _make_model(dataset, config, positive, seed):
    return FactorModel(dataset.m, dataset.n, dim=config.dim, feature_dim=dataset.feature_dim,
                       hidden=config.hidden, l2=config.l2, positive=positive, seed=seed,
                       momentum=config.momentum, optimizer=config.optimizer)


def objective(config, phi, theta, dataset, propensity=None, box=None, benchmark=None):
    """Full-grid value of the φ-objective for ``config.estimator``."""
    fam, rob, _ = ESTIMATORS[config.estimator]
    et = config.error_type
    if fam == "naive":
        return obj.loss_naive(phi, dataset, et)
    if rob is None:
        if fam == "ips":
            return obj.loss_ips(phi, dataset, propensity, et)
        return obj.loss_dr(phi, theta, dataset, propensity, et)
    if rob == "robust":
        if fam == "ips":
            return obj.loss_puid_ips(phi, dataset, box, et)
        return obj.loss_puid_dr(phi, theta, dataset, box, et)
    if fam == "ips":
        return obj.loss_bpuid_ips(phi, dataset, box, benchmark, et)
    return obj.loss_bpuid_dr(phi, theta, dataset, box, benchmark, et)


def _phi_report(fam, rob, obs, err, imp, inv, lo, hi, e0, i0, norm):
    if fam == "naive":
        return obj.naive(obs, err)
    if rob is None:
        if fam == "ips":
            return obj.ips(obs, err, inv, norm)
        return obj.dr(obs, err, imp, inv, norm)
    if rob == "robust":
        if fam == "ips":
            return obj.puid_ips(obs, err, lo, hi, norm)
        return obj.puid_dr(obs, err, imp, lo, hi, norm)
    if fam == "ips":
        return obj.bpuid_ips(obs, err, e0, lo, hi, norm)
    return obj.bpuid_dr(obs, err, imp, e0, i0, lo, hi, norm)


def _theta_report(rob, obs, err, imp, inv, lo, hi, e0, i0):
    if rob is None:
        # non-robust DR: nominal inverse-propensity weighted error matching
        return obj.imp_puid(obs, err, imp, inv, inv, name="imp_dr")
    if rob == "robust":
        return obj.imp_puid(obs, err, imp, lo, hi)
    return obj.imp_bpuid(obs, err, imp, e0, i0, lo, hi)


def _check_coverage(dataset, config, propensity, box, benchmark):
    fam, rob, _ = ESTIMATORS[config.estimator]
    shape = dataset.observed.shape
    if fam != "naive" and rob is None:
        if propensity is None or np.shape(propensity.p_hat) != shape:
            raise DataError(f"{config.estimator} needs propensities covering the training grid")
    if rob is not None and (box is None or box.lower.shape != shape):
        raise DataError(f"{config.estimator} needs an uncertainty box covering the training grid")
    if rob == "benchmark":
        if benchmark is None:
            raise DataError(f"{config.estimator} needs a benchmark snapshot")
        benchmark.check(dataset)
        if fam == "dr" and benchmark.theta is None:
            raise DataError(f"{config.estimator} needs a benchmark with an imputation model")
    elif benchmark is not None:
        raise DataError(f"{config.estimator} does not take a benchmark")


def _validate(phi, eval_dataset, val_idx, config):
    if eval_dataset is None or val_idx is None or len(val_idx) == 0:
        return float("nan"), float("nan")
    rep = evaluate(phi, eval_dataset, val_idx, ks=config.ks[:1], threshold=config.threshold)
    return rep.uauc, rep.ndcg_at_k[config.ks[0]]


def train(dataset, splits=None, propensity=None, box=None, config=None, benchmark=None,
          eval_dataset=None):
    """Alternate φ and θ steps per minibatch; keep the best validation checkpoint.

    ``splits.validation`` indexes the observed pairs of ``eval_dataset`` (defaults to
    ``dataset``).  When validating on the training dataset itself, only
    ``splits.train`` pairs count as observed during training.
    """
    config = config or TrainConfig()
    if eval_dataset is None and splits is not None:
        eval_dataset = dataset
        keep = np.zeros(dataset.n_pairs, dtype=bool)
        keep[splits.train] = True
        dataset = dataset.with_observed(keep.reshape(dataset.observed.shape) & dataset.observed)
    val_idx = None if splits is None else splits.validation
    _check_coverage(dataset, config, propensity, box, benchmark)
    if dataset.n_observed == 0:
        raise DataError("training set has no observed pairs")
    fam, rob, _ = ESTIMATORS[config.estimator]
    is_dr = fam == "dr"

    if rob == "benchmark":
        phi = benchmark.phi.copy()
        theta = benchmark.theta.copy() if is_dr else None
    else:
        phi = _make_model(dataset, config, False, config.seed)
        theta = _make_model(dataset, config, True, config.seed + 1) if is_dr else None

    obs_flat = dataset.observed.ravel()
    ratings_flat = np.nan_to_num(dataset.ratings).ravel()
    inv_flat = None if propensity is None else (1.0 / propensity.p_hat).ravel()
    lo_flat = None if box is None else box.lower.ravel()
    hi_flat = None if box is None else box.upper.ravel()
    e0_flat = i0_flat = None
    if benchmark is not None:
        e0_flat = benchmark.errors.ravel()
        i0_flat = benchmark.imputed.ravel()
    use_x = config.hidden and dataset.feature_dim
    pool = np.arange(dataset.n_pairs) if is_dr else dataset.observed_flat()
    # IPS-family batches are drawn from O; rescale so the batch mean matches |D|^-1 Σ_O
    scale = dataset.n_pairs / dataset.n_observed if fam == "ips" else 1.0
    rng = np.random.default_rng(config.seed + 2)
    et = config.error_type

    def snapshot_state():
        return phi.copy(), None if theta is None else theta.copy()

    start = time.perf_counter()
    trace = []
    candidates = []

    def record(epoch):
        value = objective(config, phi, theta, dataset, propensity, box, benchmark).value
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        vu, vn = _validate(phi, eval_dataset, val_idx, config)
        row = {"epoch": epoch, "train_loss": value, "val_uauc": vu, "val_ndcg": vn,
               "wall_time": time.perf_counter() - start}
        return row

    if rob == "benchmark":
        row0 = record(0)
        trace.append(row0)
        candidates.append((row0, snapshot_state()))

    best_val, stale = -np.inf, 0
    for epoch in range(1, config.epochs + 1):
        order = pool[rng.permutation(pool.size)]
        for b0 in range(0, order.size, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            users, items = np.divmod(idx, dataset.n)
            x = dataset.pair_features(users, items) if use_x else None
            obs = obs_flat[idx]
            r = ratings_flat[idx]
            pred, cache = phi.forward(users, items, x)
            err = np.where(obs, pair_error(pred, r, et), 0.0)
            imp = icache = None
            if is_dr:
                imp, icache = theta.forward(users, items, x)
            inv = None if inv_flat is None else inv_flat[idx]
            lo = None if lo_flat is None else lo_flat[idx]
            hi = None if hi_flat is None else hi_flat[idx]
            e0 = None if e0_flat is None else e0_flat[idx]
            i0 = None if i0_flat is None else i0_flat[idx]

            rep = _phi_report(fam, rob, obs, err, imp, inv, lo, hi, e0, i0, idx.size * scale)
            g_out = np.where(obs, rep.weights * error_derivative(pred, r, et), 0.0) / rep.normalizer
            if not np.isfinite(g_out).all():
                raise NumericError(f"non-finite gradient in epoch {epoch}")
            phi.apply_gradients(phi.backward(cache, g_out), config.lr_phi)

            if is_dr and obs.any():
                trep = _theta_report(rob, obs, err, imp, inv, lo, hi, e0, i0)
                g_imp = np.where(obs, 2.0 * trep.weights * (imp - err), 0.0) / trep.normalizer
                if not np.isfinite(g_imp).all():
                    raise NumericError(f"non-finite imputation gradient in epoch {epoch}")
                theta.apply_gradients(theta.backward(icache, g_imp), config.lr_theta)

        row = record(epoch)
        trace.append(row)
        candidates.append((row, snapshot_state()))
        if np.isfinite(row["val_uauc"]):
            if row["val_uauc"] > best_val:
                best_val, stale = row["val_uauc"], 0
            else:
                stale += 1
                if stale >= config.patience:
                    break

    if not candidates:
        row0 = record(0)
        trace.append(row0)
        candidates.append((row0, snapshot_state()))
    eligible = candidates
    if rob == "benchmark":
        # the benchmark itself (loss 0) is always eligible, so the result never exceeds it
        eligible = [c for c in candidates if c[0]["train_loss"] <= 0.0]
    best = _select(eligible)
    row, (phi_best, theta_best) = best
    return TrainedModels(phi_best, theta_best, benchmark, trace, row["epoch"], row["train_loss"])


def _select(candidates):
    vals = [c[0]["val_uauc"] for c in candidates]
    if all(not np.isfinite(v) for v in vals):
        return candidates[-1]
    best = max(range(len(candidates)), key=lambda k: (vals[k] if np.isfinite(vals[k]) else -np.inf, -k))
    return candidates[best]


def pretrain_benchmark(dataset, splits=None, propensity=None, config=None, eval_dataset=None):
    """Train the non-robust IPS or DR counterpart and freeze it as the benchmark."""
    config = config or TrainConfig(estimator="ips")
    if config.estimator not in ("ips", "dr"):
        raise ValueError("benchmark estimator must be 'ips' or 'dr'")
    if config.benchmark_epochs is not None:
        config = config.replace(epochs=config.benchmark_epochs)
    if eval_dataset is None and splits is not None:
        keep = np.zeros(dataset.n_pairs, dtype=bool)
        keep[splits.train] = True
        train_ds = dataset.with_observed(keep.reshape(dataset.observed.shape) & dataset.observed)
    else:
        train_ds = dataset
    trained = train(dataset, splits, propensity, None, config, None, eval_dataset)
    return snapshot(trained.phi, trained.theta, train_ds, config.error_type)
