"""Command line front end plus the experiment grid and its report tables.

Subcommands: synth, prepare, sensitivity, train, eval, grid, report.
Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
import traceback
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import fit_propensity, personalized_box
from .data import (Dataset, apply_mask, build_pseudo_features, generate_synthetic, load_features,
                   load_triples, split, uniform_test_set, write_features, write_ground_truth,
                   write_triples)
from .entropy import estimate_sensitivity, write_partition_summary
from .errors import DataError, NumericError, PuidError
from .evaluation import evaluate
from .pipeline import Pipeline
from .predictors import FactorModel
from .training import ESTIMATORS, TrainConfig

RESULTS_SCHEMA = "puidrec-results/1"
RESULT_COLUMNS = ["schema", "estimator", "mask_ratio", "seed", "uauc", "ndcg", "train_loss",
                  "wall_time", "config_hash", "status"]
VAL_FRACTION = 0.2


# ---------------------------------------------------------------------------
# dataset directories


def _feature_ids(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return np.asarray([int(row[0]) for row in reader if row])


def load_dataset_dir(path, format="triple_tsv", pseudo_seed=0):
    """Load ``(train, test_or_None)`` from a dataset directory or a single file.

    Directory layout: ``train.tsv`` (or ``train.ascii`` for coat_matrix), optional
    ``test.*`` file, optional ``user_features.*`` / ``item_features.*``.  Without
    feature files, pseudo-features are built from the training ratings.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such dataset: {path}")
    if path.is_file():
        train_path, root = path, path.parent
        test_path = None
    else:
        root = path
        ext = "ascii" if format == "coat_matrix" else "tsv"
        train_path = root / f"train.{ext}"
        test_path = root / f"test.{ext}"
        if not test_path.exists():
            test_path = None
    if format == "coat_matrix":
        train = load_triples(train_path, format)
        uf, itf = root / "user_features.ascii", root / "item_features.ascii"
        if path.is_dir() and uf.exists() and itf.exists():
            train.user_features = np.loadtxt(uf, ndmin=2)
            train.item_features = np.loadtxt(itf, ndmin=2)
            if len(train.user_features) != train.m or len(train.item_features) != train.n:
                raise DataError("feature matrices do not match the rating matrix")
    else:
        uf, itf = root / "user_features.csv", root / "item_features.csv"
        if path.is_dir() and uf.exists() and itf.exists():
            uids, iids = np.sort(_feature_ids(uf)), np.sort(_feature_ids(itf))
            stub = Dataset(np.full((len(uids), len(iids)), np.nan),
                           np.zeros((len(uids), len(iids)), dtype=bool), user_ids=uids, item_ids=iids)
            train = load_triples(train_path, format, reference=stub)
            train.user_features = load_features(uf, uids)
            train.item_features = load_features(itf, iids)
        else:
            train = load_triples(train_path, format)
    if train.feature_dim == 0:
        train = build_pseudo_features(train, seed=pseudo_seed)
    test = None if test_path is None else load_triples(test_path, format, reference=train)
    return train, test


def save_dataset_dir(out, train, test=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_triples(train, out / "train.tsv")
    if test is not None:
        write_triples(test, out / "test.tsv")
    write_features(train.user_features, train.user_ids, out / "user_features.csv")
    write_features(train.item_features, train.item_ids, out / "item_features.csv")


def make_splits(train, test, seed):
    """Validation/test split of the unbiased test set, or an 80/10/10 split of train."""
    if test is not None:
        return train, test, split(test, (0.0, VAL_FRACTION, 1.0 - VAL_FRACTION), seed)
    sp = split(train, (0.8, 0.1, 0.1), seed)
    keep = np.zeros(train.n_pairs, dtype=bool)
    keep[sp.train] = True
    return train.with_observed(keep.reshape(train.observed.shape) & train.observed), train, sp


def config_hash(payload):
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:10]


# ---------------------------------------------------------------------------
# experiment grid


@dataclass
class ExperimentGrid:
    dataset: str | None
    estimators: list
    mask_ratios: list = field(default_factory=lambda: [0.0])
    seeds: list = field(default_factory=lambda: [0])
    overrides: dict = field(default_factory=dict)
    format: str = "triple_tsv"

    def __post_init__(self):
        if not self.estimators or not self.seeds:
            raise ValueError("grid needs at least one estimator and one seed")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimator {unknown[0]!r}")
        if any(not 0.0 <= r < 1.0 for r in self.mask_ratios):
            raise ValueError("mask ratios must lie in [0, 1)")
        if not self.mask_ratios:
            raise ValueError("grid needs at least one mask ratio")

    def cells(self):
        for ratio in self.mask_ratios:
            for seed in self.seeds:
                for est in self.estimators:
                    yield est, ratio, seed


def _row(est, ratio, seed, chash, **kw):
    row = {"schema": RESULTS_SCHEMA, "estimator": est, "mask_ratio": ratio, "seed": seed,
           "uauc": math.nan, "ndcg": math.nan, "train_loss": math.nan, "wall_time": math.nan,
           "config_hash": chash, "status": "ok"}
    row.update(kw)
    return row


def run_experiment_grid(grid, train=None, test=None, out=None, log=None):
    """Run every (estimator, mask_ratio, seed) cell and return one result row per cell.

    For each (mask_ratio, seed) the training set is thinned with the propensity-weighted
    mask, then propensities, sensitivity fields and benchmarks are re-estimated on the
    thinned data.  A failing cell is recorded with its error and the grid moves on.
    """
    if train is None:
        if grid.dataset is None:
            raise DataError("grid has no dataset")
        train, test = load_dataset_dir(grid.dataset, grid.format)
    writer = fh = None
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        fh = open(out, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
    rows = []
    try:
        for ratio in grid.mask_ratios:
            for seed in grid.seeds:
                base = TrainConfig(**{**grid.overrides, "seed": seed})
                try:
                    tr, ev, sp = make_splits(train, test, seed)
                    if ratio > 0:
                        p_mask = fit_propensity(tr, base.propensity, base.clip_floor)
                        tr = apply_mask(tr, ratio, p_mask.p_hat, seed=seed)
                    pipe = Pipeline(tr, ev, sp, base)
                    setup_error = None
                except Exception as exc:  # noqa: BLE001 - isolate the cell
                    setup_error = f"{type(exc).__name__}: {exc}"
                for est in grid.estimators:
                    cfg = base.replace(estimator=est)
                    chash = config_hash({"config": cfg.to_dict(), "mask_ratio": ratio})
                    if setup_error is not None:
                        row = _row(est, ratio, seed, chash, status=f"error: {setup_error}")
                    else:
                        t0 = time.perf_counter()
                        try:
                            res = pipe.run(cfg)
                            row = _row(est, ratio, seed, chash, uauc=res.report.uauc,
                                       ndcg=res.report.ndcg_at_k[cfg.ks[0]],
                                       train_loss=res.trained.final_loss,
                                       wall_time=time.perf_counter() - t0)
                        except Exception as exc:  # noqa: BLE001
                            row = _row(est, ratio, seed, chash, wall_time=time.perf_counter() - t0,
                                       status=f"error: {type(exc).__name__}: {exc}".replace("\n", " "))
                    rows.append(row)
                    if writer is not None:
                        writer.writerow(row)
                        fh.flush()
                    if log is not None:
                        log(row)
    finally:
        if fh is not None:
            fh.close()
    return rows


def read_results(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("schema") != RESULTS_SCHEMA:
                raise DataError(f"{path}: unsupported results schema {row.get('schema')!r}")
            for k in ("mask_ratio", "uauc", "ndcg", "train_loss", "wall_time"):
                row[k] = float(row[k])
            row["seed"] = int(row["seed"])
            rows.append(row)
    return rows


def aggregate(rows):
    """{mask_ratio: {estimator: stats}} with seed mean and sample sd of each metric."""
    groups = {}
    for row in rows:
        groups.setdefault(float(row["mask_ratio"]), {}).setdefault(row["estimator"], []).append(row)
    table = {}
    for ratio in sorted(groups):
        table[ratio] = {}
        for est, items in groups[ratio].items():
            stats = {"n": 0}
            for metric in ("uauc", "ndcg"):
                vals = np.array([r[metric] for r in items], dtype=float)
                vals = vals[np.isfinite(vals)]
                stats["n"] = max(stats["n"], vals.size)
                stats[metric] = float(vals.mean()) if vals.size else math.nan
                stats[metric + "_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            table[ratio][est] = stats
        for metric in ("uauc", "ndcg"):
            finite = [s[metric] for s in table[ratio].values() if np.isfinite(s[metric])]
            top = max(finite) if finite else None
            for s in table[ratio].values():
                s["best_" + metric] = top is not None and s[metric] == top
    return table


def emit_report(rows, format="markdown", path=None):
    """Seed-aggregated table per mask ratio, best value per metric flagged."""
    if not rows:
        raise DataError("cannot report an empty results table")
    table = aggregate(rows)
    if format == "markdown":
        lines = []
        for ratio, ests in table.items():
            lines += [f"### mask ratio {ratio:g}", "",
                      "| estimator | seeds | UAUC | NDCG |", "|---|---|---|---|"]
            for est, s in ests.items():
                cells = []
                for metric in ("uauc", "ndcg"):
                    txt = f"{s[metric]:.4f} ± {s[metric + '_sd']:.4f}"
                    cells.append(f"**{txt}**" if s["best_" + metric] else txt)
                lines.append(f"| {est} | {s['n']} | {cells[0]} | {cells[1]} |")
            lines.append("")
        text = "\n".join(lines)
    elif format == "csv":
        cols = ["mask_ratio", "estimator", "n", "uauc_mean", "uauc_sd", "ndcg_mean", "ndcg_sd",
                "best_uauc", "best_ndcg"]
        lines = [",".join(cols)]
        for ratio, ests in table.items():
            for est, s in ests.items():
                lines.append(",".join(str(v) for v in [
                    f"{ratio:g}", est, s["n"], f"{s['uauc']:.17g}", f"{s['uauc_sd']:.17g}",
                    f"{s['ndcg']:.17g}", f"{s['ndcg_sd']:.17g}", int(s["best_uauc"]),
                    int(s["best_ndcg"])]))
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown report format {format!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# commands


def _config_from_args(args, **extra):
    kw = dict(estimator=getattr(args, "estimator", "naive"), epochs=args.epochs, batch_size=args.batch_size,
              lr_phi=args.lr, lr_theta=args.lr, l2=args.l2, error_type=args.error_type,
              gamma_max=args.gamma_max, gamma_global=args.gamma_global, alpha=args.alpha,
              beta=args.beta, seed=args.seed, bins_user=args.bins_user, bins_item=args.bins_item,
              min_cell=args.min_cell, dim=args.dim, hidden=args.hidden, patience=args.patience)
    kw.update(extra)
    return TrainConfig(**kw)


def _out(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _dataset_key(args):
    return {"dataset": str(Path(args.dataset).resolve()), "format": args.format}


def cmd_synth(args):
    out = _out(args)
    ds, truth = generate_synthetic(args.users, args.items, args.latent_dim, args.confounding,
                                   args.base_exposure, seed=args.seed)
    test = uniform_test_set(truth, args.test_items, seed=args.seed + 1, reference=ds)
    save_dataset_dir(out, ds, test)
    write_ground_truth(ds, truth, out / "truth.csv")
    print(json.dumps({"users": ds.m, "items": ds.n, "observed": ds.n_observed,
                      "true_gamma": truth.true_gamma}))


def cmd_prepare(args):
    out = _out(args)
    train, test = load_dataset_dir(args.dataset, args.format, pseudo_seed=args.seed)
    if args.mask_ratio > 0:
        p = fit_propensity(train)
        train = apply_mask(train, args.mask_ratio, p.p_hat, seed=args.seed)
    save_dataset_dir(out, train, test)
    print(json.dumps({"users": train.m, "items": train.n, "observed": train.n_observed,
                      "feature_dim": train.feature_dim, "test": None if test is None else test.n_observed}))


def cmd_sensitivity(args):
    out = _out(args)
    train, test = load_dataset_dir(args.dataset, args.format)
    tr, _, _ = make_splits(train, test, args.seed)
    field_, part = estimate_sensitivity(tr, args.bins_user, args.bins_item, args.min_cell,
                                        args.alpha, args.beta, args.gamma_max, args.seed)
    h = config_hash({**_dataset_key(args), "cmd": "sensitivity", "bins": [args.bins_user, args.bins_item],
                     "min_cell": args.min_cell, "alpha": args.alpha, "beta": args.beta,
                     "gamma_max": args.gamma_max, "seed": args.seed})
    field_.to_csv(out / f"sensitivity_{h}.csv")
    write_partition_summary(part, out / f"partition_{h}.json")
    personalized_box(fit_propensity(tr), field_).to_csv(out / f"box_{h}.csv")
    print(json.dumps({"config_hash": h, "gamma_min": float(field_.gamma.min()),
                      "gamma_max": float(field_.gamma.max())}))


def cmd_train(args):
    out = _out(args)
    cfg = _config_from_args(args)
    train, test = load_dataset_dir(args.dataset, args.format)
    tr, ev, sp = make_splits(train, test, args.seed)
    if args.mask_ratio > 0:
        tr = apply_mask(tr, args.mask_ratio, fit_propensity(tr).p_hat, seed=args.seed)
    h = config_hash({**_dataset_key(args), "config": cfg.to_dict(), "mask_ratio": args.mask_ratio})
    res = Pipeline(tr, ev, sp, cfg).run(cfg)
    res.trained.phi.save(out / f"model_{h}.json")
    if res.trained.theta is not None:
        res.trained.theta.save(out / f"imputation_{h}.json")
    res.trained.write_trace(out / f"trace_{h}.csv")
    manifest = {"config_hash": h, "config": cfg.to_dict(), "mask_ratio": args.mask_ratio,
                **_dataset_key(args), "best_epoch": res.trained.best_epoch,
                "final_loss": res.trained.final_loss}
    (out / f"run_{h}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / f"report_{h}.json").write_text(res.report.to_json())
    print(json.dumps({"config_hash": h, **res.report.to_dict()}, sort_keys=True))


def cmd_eval(args):
    out = _out(args)
    model = FactorModel.load(args.checkpoint)
    train, test = load_dataset_dir(args.dataset, args.format)
    _, ev, sp = make_splits(train, test, args.seed)
    if (model.m, model.n) != ev.observed.shape:
        raise DataError(f"checkpoint grid {(model.m, model.n)} does not match dataset {ev.observed.shape}")
    rep = evaluate(model, ev, sp.test, ks=tuple(args.k), threshold=args.threshold)
    h = config_hash({**_dataset_key(args), "checkpoint": Path(args.checkpoint).read_text(),
                     "seed": args.seed, "k": args.k, "threshold": args.threshold})
    (out / f"eval_{h}.json").write_text(rep.to_json())
    print(rep.to_json())


def cmd_grid(args):
    out = _out(args)
    cfg = _config_from_args(args)
    overrides = {k: v for k, v in cfg.to_dict().items() if k not in ("estimator", "seed")}
    grid = ExperimentGrid(args.dataset, args.estimators, args.mask_ratios, args.seeds, overrides,
                          args.format)
    h = config_hash({**_dataset_key(args), "estimators": grid.estimators,
                     "mask_ratios": grid.mask_ratios, "seeds": grid.seeds, "overrides": overrides})
    path = out / f"results_{h}.csv"

    def log(row):
        print(f"{row['estimator']:>10} r={row['mask_ratio']:g} seed={row['seed']} "
              f"uauc={row['uauc']:.4f} {row['status']}", file=sys.stderr)

    rows = run_experiment_grid(grid, out=path, log=log)
    print(json.dumps({"results": str(path), "rows": len(rows),
                      "failed": sum(r["status"] != "ok" for r in rows)}))


def cmd_report(args):
    rows = read_results(args.results)
    text = emit_report(rows, args.report_format, args.out)
    if args.out is None:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# argument parsing


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _add_data(p):
    p.add_argument("--dataset", required=True, help="dataset directory or triple file")
    p.add_argument("--format", default="triple_tsv", choices=["triple_tsv", "coat_matrix"])


def _add_sensitivity(p):
    p.add_argument("--gamma-max", type=float, default=2.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--bins-user", type=int, default=8)
    p.add_argument("--bins-item", type=int, default=8)
    p.add_argument("--min-cell", type=int, default=50)


def _add_training(p):
    _add_sensitivity(p)
    p.add_argument("--gamma-global", type=float, default=2.0)
    p.add_argument("--mask-ratio", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--error-type", default="squared", choices=["squared", "absolute"])
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--hidden", type=int, default=0, help="fusion MLP width (0 disables it)")
    p.add_argument("--patience", type=int, default=5)


def build_parser():
    ap = argparse.ArgumentParser(prog="puidrec", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a confounded synthetic dataset")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--confounding", type=float, default=0.35)
    p.add_argument("--base-exposure", type=float, default=0.1)
    p.add_argument("--test-items", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="load, attach features, optionally mask, and re-save")
    _add_data(p)
    p.add_argument("--mask-ratio", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("sensitivity", help="entropy-based sensitivity field and box")
    _add_data(p)
    _add_sensitivity(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("train", help="train one estimator and evaluate it")
    _add_data(p)
    _add_training(p)
    p.add_argument("--estimator", default="naive", choices=sorted(ESTIMATORS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on the test split")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed used for the validation/test split")
    p.add_argument("--k", type=int, nargs="+", default=[5])
    p.add_argument("--threshold", type=float, default=4.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="estimator x mask ratio x seed grid")
    _add_data(p)
    _add_training(p)
    p.add_argument("--estimators", type=_csv_list(str), required=True)
    p.add_argument("--mask-ratios", type=_csv_list(float), default=[0.0])
    p.add_argument("--seeds", type=_csv_list(int), default=[0])
    p.add_argument("--seed", type=int, default=0, help=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="aggregate a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--report-format", default="markdown", choices=["markdown", "csv"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return ap


def _fail(code, exc):
    msg = str(exc).replace("\n", " ")
    print(f"error code={code} kind={type(exc).__name__} message={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=UserWarning)
            args.func(args)
    except NumericError as exc:
        return _fail(4, exc)
    except (DataError, FileNotFoundError, OSError) as exc:
        return _fail(3, exc)
    except ValueError as exc:
        return _fail(2, exc)
    except PuidError as exc:
        return _fail(exc.exit_code, exc)
    except Exception as exc:  # noqa: BLE001
        traceback.print_exc(file=sys.stderr)
        return _fail(1, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
