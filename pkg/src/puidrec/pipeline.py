"""End-to-end glue: propensities -> sensitivity -> box -> (benchmark) -> train -> evaluate."""
from __future__ import annotations

from dataclasses import dataclass

from .bounds import fit_propensity, global_box, personalized_box
from .entropy import estimate_sensitivity
from .evaluation import evaluate
from .training import (ESTIMATORS, TrainConfig, benchmark_estimator, box_kind, pretrain_benchmark,
                       train, uses_benchmark)


@dataclass
class RunResult:
    trained: object
    report: object
    sensitivity: object = None
    box: object = None


class Pipeline:
    """Shares propensities, sensitivity fields and benchmarks across estimators on one dataset."""

    def __init__(self, train_ds, eval_ds, splits, base_config=None):
        self.train_ds = train_ds
        self.eval_ds = eval_ds
        self.splits = splits
        self.base = base_config or TrainConfig()
        self._propensity = None
        self._sensitivity = {}
        self._benchmarks = {}

    @property
    def propensity(self):
        if self._propensity is None:
            self._propensity = fit_propensity(self.train_ds, self.base.propensity, self.base.clip_floor)
        return self._propensity

    def sensitivity(self, config):
        key = (config.bins_user, config.bins_item, config.min_cell, config.alpha, config.beta,
               config.gamma_max, config.seed)
        if key not in self._sensitivity:
            self._sensitivity[key] = estimate_sensitivity(
                self.train_ds, config.bins_user, config.bins_item, config.min_cell, config.alpha,
                config.beta, config.gamma_max, config.seed)[0]
        return self._sensitivity[key]

    def box(self, config):
        kind = box_kind(config.estimator)
        if kind == "global":
            return global_box(self.propensity, config.gamma_global), None
        if kind == "personalized":
            field = self.sensitivity(config)
            return personalized_box(self.propensity, field), field
        return None, None

    def benchmark(self, config):
        name = benchmark_estimator(config.estimator)
        bench_cfg = config.replace(estimator=name)
        key = (name, tuple(sorted((k, str(v)) for k, v in bench_cfg.to_dict().items())))
        if key not in self._benchmarks:
            self._benchmarks[key] = pretrain_benchmark(self.train_ds, self.splits, self.propensity,
                                                       bench_cfg, self.eval_ds)
        return self._benchmarks[key]

    def run(self, config):
        if config.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {config.estimator!r}")
        box, field = self.box(config)
        bench = self.benchmark(config) if uses_benchmark(config.estimator) else None
        prop = self.propensity if config.estimator != "naive" else None
        trained = train(self.train_ds, self.splits, prop, box, config, bench, self.eval_ds)
        report = evaluate(trained.phi, self.eval_ds, self.splits.test, ks=config.ks,
                          threshold=config.threshold)
        return RunResult(trained, report, field, box)
