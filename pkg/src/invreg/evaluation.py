"""Leave-one-environment-out hyperparameter selection and evaluation protocol."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabeledView, MultiEnvDataset, UnlabeledView, split_views
from .estimators import METHODS, fit_method, predict
from .exceptions import ConfigError, DataError
from .metrics import cvar, moving_average, mse, nmse, rmse, spearman
from .moments import env_moment_summaries

TIE_TOL = 1e-12
REGULARIZED = ("MIR", "VIR", "MIR_VIR")


def _size(value) -> tuple:
    """Ordering key for 'amount of regularization' used to break ties."""
    if value is None:
        return (0.0,)
    if np.ndim(value) == 0:
        return (float(value),)
    v = [float(x) for x in value]
    return (sum(v), *v)


def _pick(grid: Sequence, scores: Sequence[float]):
    """Lowest score; among scores within TIE_TOL of it the smallest value (first on exact ties)."""
    scores = np.asarray(scores, dtype=float)
    if np.all(np.isnan(scores)):
        raise DataError("all hyperparameter scores are NaN")
    best = np.nanmin(scores)
    tied = [i for i, s in enumerate(scores) if s <= best + TIE_TOL]
    return min(tied, key=lambda i: (_size(grid[i]), i))


@dataclass
class Selection:
    value: object
    index: int
    mean_scores: list
    fold_scores: list  # grid x folds
    folds: tuple


def loeo_hyperparam_select(labeled: LabeledView, unlabeled: UnlabeledView | None, method: str, grid: Sequence,
                           weighting="pooled", **opts) -> Selection:
    """Choose the grid value with the lowest held-out-environment MSE.

    Each labeled environment is held out in turn; the unlabeled view is left
    untouched, so regularizers always see every training environment.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("empty hyperparameter grid")
    folds = tuple(e for e, g in labeled.groups().items() if len(g))
    if len(folds) < 2:
        raise DataError("leave-one-environment-out selection needs >= 2 labeled environments")
    groups = labeled.groups()
    scores = np.empty((len(grid), len(folds)))
    for j, held in enumerate(folds):
        train = labeled.restrict([e for e in folds if e != held])
        Xv = labeled.X[groups[held]]
        Yv = labeled.Y[groups[held]]
        for i, hp in enumerate(grid):
            model = fit_method(method, train, unlabeled, hp, weighting, **opts)
            scores[i, j] = mse(predict(model, Xv), Yv)
    means = scores.mean(axis=1)
    i = _pick(grid, means)
    return Selection(grid[i], i, means.tolist(), scores.tolist(), folds)


@dataclass
class ProtocolConfig:
    method: str
    grid: Sequence = (None,)
    weighting: str = "pooled"
    n_labeled: int = 1
    trials: int = 20
    seed: int = 0
    oracle_mode: bool = False
    smoothing_window: int = 1
    options: dict = field(default_factory=dict)
    label: str | None = None

    def __post_init__(self):
        self.method = str(self.method).upper()
        if self.method not in METHODS or self.method == "GENERAL_LOSS":
            raise ConfigError(f"method {self.method!r} cannot be evaluated")
        self.grid = [tuple(g) if isinstance(g, (list, tuple)) else g for g in self.grid]
        if not self.grid:
            raise ConfigError("grid must be non-empty")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.n_labeled < 1:
            raise ConfigError("n_labeled must be >= 1")
        if self.smoothing_window < 1:
            raise ConfigError("smoothing_window must be >= 1")
        if self.label is None:
            self.label = self.method + ("-Oracle" if self.oracle_mode else "")


def trial_seed(seed: int, env_index: int, trial: int) -> int:
    """Seed shared by every method/mode for one (test environment, trial) cell."""
    return int(np.random.SeedSequence([seed, env_index, trial]).generate_state(1, dtype=np.uint64)[0])


METRIC_FIELDS = ("mse", "rmse", "nmse", "spearman")


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.records.extend(other.records)
        return self

    def aggregates(self, cvar_quantiles=(0.0, 0.5, 0.9)) -> list[dict]:
        """Mean and standard error per (method, n_labeled)."""
        keys = []
        for r in self.records:
            k = (r["method"], r["n_labeled"])
            if k not in keys:
                keys.append(k)
        out = []
        for method, n_lab in keys:
            rows = [r for r in self.records if r["method"] == method and r["n_labeled"] == n_lab]
            agg = {"method": method, "n_labeled": n_lab, "records": len(rows)}
            for m in METRIC_FIELDS:
                v = np.array([r[m] for r in rows], dtype=float)
                v = v[np.isfinite(v)]
                agg[f"{m}_mean"] = float(v.mean()) if v.size else math.nan
                agg[f"{m}_se"] = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else math.nan
            v = np.array([r["nmse"] for r in rows], dtype=float)
            v = v[np.isfinite(v)]
            for q in cvar_quantiles:
                agg[f"nmse_cvar_{q:g}"] = cvar(v, q) if v.size else math.nan
            out.append(agg)
        return out

    def to_csv(self, path) -> None:
        if not self.records:
            Path(path).write_text("", encoding="utf-8")
            return
        fields = list(self.records[0])
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (json.dumps(v) if isinstance(v, (list, tuple)) else v) for k, v in r.items()})

    def to_json(self, path, cvar_quantiles=(0.0, 0.5, 0.9)) -> None:
        doc = {"config": self.config, "aggregates": self.aggregates(cvar_quantiles)}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n",
                              encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def _hp_repr(v):
    if v is None:
        return None
    return list(v) if isinstance(v, tuple) else float(v)


def run_loeo_protocol(dataset: MultiEnvDataset, config: ProtocolConfig) -> EvalReport:
    """Hold out each labeled environment in turn and evaluate ``config.method`` on it.

    For each test environment and trial, ``n_labeled`` of the remaining
    labeled environments keep their labels (all remaining environments stay
    visible as unlabeled data), a hyperparameter is selected by inner LOEO
    cross-validation (or on the test environment in oracle mode), and the
    refitted model is scored on the held-out environment.
    """
    cfg = config
    test_envs = dataset.labeled_envs
    if len(test_envs) < 2:
        raise DataError("need >= 2 labeled environments")
    if cfg.n_labeled > len(test_envs) - 1:
        raise ConfigError(f"n_labeled={cfg.n_labeled} exceeds the {len(test_envs) - 1} labeled training environments")
    needs_cv = len(cfg.grid) > 1 and not cfg.oracle_mode
    if needs_cv and cfg.n_labeled < 2:
        raise ConfigError("cross-validated selection needs n_labeled >= 2")
    opts = dict(cfg.options)
    report = EvalReport(config={**asdict(cfg), "grid": [_hp_repr(g) for g in cfg.grid]})
    for t, test_env in enumerate(dataset.registry):
        if test_env not in test_envs:
            continue
        train_envs = [e for e in dataset.registry if e != test_env]
        train = dataset.select_envs(train_envs)
        candidates = train.labeled_envs
        test_rows = dataset.rows_of(test_env)
        test_rows = test_rows[dataset.labeled_mask[test_rows]]
        Xt, Yt = dataset.features[test_rows], dataset.outcomes[test_rows]
        n_trials = 1 if cfg.n_labeled == len(candidates) else cfg.trials
        for trial in range(n_trials):
            s = trial_seed(cfg.seed, t, trial)
            rng = np.random.default_rng(s)
            pick = sorted(rng.choice(len(candidates), size=cfg.n_labeled, replace=False).tolist())
            chosen = [candidates[i] for i in pick]
            labeled, unlabeled = split_views(train, chosen)
            if cfg.method in REGULARIZED:
                opts["summaries"] = env_moment_summaries(unlabeled)
            if cfg.oracle_mode:
                models = [fit_method(cfg.method, labeled, unlabeled, hp, cfg.weighting, **opts) for hp in cfg.grid]
                test_scores = [mse(predict(m, Xt), Yt) for m in models]
                idx = _pick(cfg.grid, test_scores)
                model = models[idx]
            else:
                if needs_cv:
                    idx = loeo_hyperparam_select(labeled, unlabeled, cfg.method, cfg.grid, cfg.weighting, **opts).index
                else:
                    idx = 0
                model = fit_method(cfg.method, labeled, unlabeled, cfg.grid[idx], cfg.weighting, **opts)
            pred = predict(model, Xt)
            truth = Yt
            if cfg.smoothing_window > 1:
                pred = moving_average(pred, cfg.smoothing_window)
                truth = moving_average(truth, cfg.smoothing_window)
            report.records.append(_record(cfg, test_env, trial, s, chosen, cfg.grid[idx], pred, truth))
    return report


def _record(cfg, test_env, trial, seed, chosen, hp, pred, truth) -> dict:
    try:
        nm = nmse(pred, truth)
    except ValueError:
        nm = math.nan
    sp = spearman(pred, truth) if len(pred) > 1 else math.nan
    return {
        "method": cfg.label,
        "n_labeled": cfg.n_labeled,
        "test_env": test_env,
        "trial": trial,
        "trial_seed": seed,
        "labeled_envs": list(chosen),
        "selected": _hp_repr(hp),
        "n_test": len(truth),
        "mse": mse(pred, truth),
        "rmse": rmse(pred, truth),
        "nmse": nm,
        "spearman": sp,
    }
