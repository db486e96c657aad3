"""Command-line experiment runner.

Subcommands: simulate, fit, predict, evaluate, oracle, sweep. Each reads
the merged configuration (defaults < ``--config`` file < flags) and writes
its outputs into ``--out``. Exit codes: 0 success, 1 numerical failure,
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import column_schema, dataset_from_config, dump_config, load_config
from .data import MultiEnvDataset, UnlabeledView, load_csv_dataset, split_views, write_csv_dataset
from .estimators import (
    ConvergenceWarning, FittedModel, fit_general_loss, fit_method, fit_with_regularizer, predict, training_mse,
)
from .evaluation import EvalReport, ProtocolConfig, run_loeo_protocol
from .exceptions import ConfigError, ConvergenceError, DataError, NumericalError
from .metrics import mse
from .moments import env_moment_summaries, h_combined, h_mir, h_vir, read_matrix, write_matrix
from .oracle import run_duality_suite

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--weighting", choices=("pooled", "balanced"), help="labeled-row weighting")
    common.add_argument("--jitter", type=float, metavar="EPS", help="ridge jitter eps*trace(A)/d")
    common.add_argument("--oracle-mode", action="store_true", default=None,
                        help="select hyperparameters on the test environment")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("--data", metavar="CSV", help="dataset CSV (replaces the simulated source)")

    p = _Parser(prog="invreg", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("simulate", parents=[common], help="write a simulated dataset CSV")
    s.add_argument("--labels-only-for", type=_csv_list, metavar="ENVS",
                   help="comma-separated environments that keep their outcomes")
    f = sub.add_parser("fit", parents=[common], help="fit one method and write the model")
    f.add_argument("--method", help="MIR, VIR, MIR_VIR, OLS, RIDGE, ANCHOR, GROUP_DRO or GENERAL_LOSS")
    f.add_argument("--hp", type=_float_list, metavar="VALUE", help="hyperparameter (two values for MIR_VIR)")
    f.add_argument("--labeled-envs", type=_csv_list, metavar="ENVS")
    f.add_argument("--eval-beta", type=_float_list, metavar="B1,B2,...",
                   help="also report penalty and training MSE at this coefficient vector")
    pr = sub.add_parser("predict", parents=[common], help="apply a saved model to a dataset CSV")
    pr.add_argument("--model", required=True, metavar="PATH")
    sub.add_parser("evaluate", parents=[common], help="leave-one-environment-out evaluation")
    o = sub.add_parser("oracle", parents=[common], help="population duality checks")
    o.add_argument("--gap-tol", type=float, help="relative duality-gap tolerance")
    o.add_argument("--instances", type=int)
    sw = sub.add_parser("sweep", parents=[common], help="regularization path over a gamma grid")
    sw.add_argument("--test-env", metavar="ENV")
    return p


def _overrides(args) -> dict:
    o: dict = {}
    for key in ("seed", "weighting", "jitter", "out"):
        v = getattr(args, key, None)
        if v is not None:
            o[key] = v
    if args.data is not None:
        o["data"] = {"csv": args.data}
    fit = {}
    for key in ("method", "labeled_envs", "eval_beta"):
        v = getattr(args, key, None)
        if v is not None:
            fit[key] = v
    if getattr(args, "hp", None) is not None:
        fit["hp"] = args.hp[0] if len(args.hp) == 1 else args.hp
    if fit:
        o["fit"] = fit
    if args.oracle_mode:
        o["evaluate"] = {"oracle_mode": True}
    orc = {k: getattr(args, k) for k in ("gap_tol", "instances") if getattr(args, k, None) is not None}
    if orc:
        o["oracle"] = orc
    if getattr(args, "test_env", None) is not None:
        o["sweep"] = {"test_env": args.test_env}
    return o


def _resolve(args) -> dict:
    return load_config(args.config, _overrides(args), getattr(args, "labels_only_for", None))


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict) -> int:
    if cfg["data"]["simulate"] is None:
        raise ConfigError("simulate needs data.simulate in the config")
    ds = dataset_from_config(cfg)
    path = _out_dir(cfg) / "dataset.csv"
    write_csv_dataset(ds, path)
    print(f"wrote {path} ({ds.n} rows, {ds.p} environments, {len(ds.labeled_envs)} labeled)")
    return EXIT_OK


def _views(ds: MultiEnvDataset, fcfg: dict):
    labeled, unlabeled = split_views(ds, fcfg["labeled_envs"])
    if fcfg["unlabeled_envs"] is not None:
        sub = ds.select_envs(fcfg["unlabeled_envs"])
        unlabeled = UnlabeledView(sub, np.arange(sub.n), sub.registry)
    return labeled, unlabeled


def _penalty_matrix(method: str, fcfg: dict, unlabeled, d: int):
    """(H, scale) such that the fitted penalty is scale * beta'H beta, or (None, None)."""
    hp = fcfg["hp"]
    if fcfg["h_matrix"] is not None:
        return read_matrix(fcfg["h_matrix"]), float(hp)
    if method in ("MIR", "VIR"):
        summ = env_moment_summaries(unlabeled)
        return (h_mir if method == "MIR" else h_vir)(summ).H, float(hp)
    if method == "MIR_VIR":
        g1, g2 = hp
        return h_combined(env_moment_summaries(unlabeled), g1, g2).H, 1.0
    if method == "RIDGE":
        return np.eye(d), float(hp)
    if method == "GENERAL_LOSS" and fcfg["regularizer"] != "none":
        summ = env_moment_summaries(unlabeled)
        return (h_mir if fcfg["regularizer"] == "MIR" else h_vir)(summ).H, float(hp)
    return None, None


def _check_hp(method: str, hp):
    if method == "MIR_VIR":
        if not isinstance(hp, (list, tuple)) or len(hp) != 2:
            raise ConfigError("MIR_VIR needs hp = [gamma_mir, gamma_vir]")
    elif method != "OLS" and (hp is None or isinstance(hp, (list, tuple))):
        raise ConfigError(f"{method} needs a single numeric hp")


def cmd_fit(cfg: dict) -> int:
    fcfg = cfg["fit"]
    method = fcfg["method"].upper()
    _check_hp(method, fcfg["hp"])
    ds = dataset_from_config(cfg)
    labeled, unlabeled = _views(ds, fcfg)
    H, scale = _penalty_matrix(method, fcfg, unlabeled, ds.d)
    if fcfg["h_matrix"] is not None:
        if method not in ("MIR", "VIR", "GENERAL_LOSS"):
            raise ConfigError("fit.h_matrix applies to MIR, VIR and GENERAL_LOSS")
    if method == "GENERAL_LOSS":
        model = fit_general_loss(labeled, H, 0.0 if H is None else scale, fcfg["loss"],
                                 huber_delta=fcfg["huber_delta"], weighting=cfg["weighting"],
                                 center=fcfg["center"], strict=True)
    elif fcfg["h_matrix"] is not None:
        model = fit_with_regularizer(labeled, H, scale, cfg["weighting"], method=method, center=fcfg["center"],
                                     jitter=cfg["jitter"], info={"h_matrix": fcfg["h_matrix"]})
    else:
        model = fit_method(method, labeled, unlabeled, fcfg["hp"], cfg["weighting"], jitter=cfg["jitter"],
                           center=fcfg["center"], iters=fcfg["iters"])
    out = _out_dir(cfg)
    model.save(out / "model.json")
    summary = {
        "method": method, "gamma": model.gamma, "weighting": model.info.get("weighting", cfg["weighting"]),
        "labeled_envs": list(labeled.envs), "k": labeled.k, "beta": model.beta,
        "training_mse": training_mse(model, labeled),
        "penalty": None if H is None else scale * float(model.beta @ H @ model.beta),
    }
    if H is not None:
        write_matrix(H, out / "H.txt")
    if fcfg["eval_beta"] is not None:
        b = np.asarray(fcfg["eval_beta"], dtype=float)
        if b.shape != (ds.d,):
            raise ConfigError(f"eval_beta must have {ds.d} entries")
        forced = FittedModel(b, model.x_offset, model.y_offset, method)
        summary["eval"] = {
            "beta": b,
            "training_mse": training_mse(forced, labeled),
            "penalty": None if H is None else scale * float(b @ H @ b),
        }
    _write_json(out / "fit_summary.json", summary)
    print(json.dumps(summary, sort_keys=True, default=_jsonable))
    return EXIT_OK


def cmd_predict(cfg: dict, model_path) -> int:
    if cfg["data"]["csv"] is None:
        raise ConfigError("predict needs a dataset CSV (--data or data.csv)")
    model = FittedModel.load(model_path)
    ds = load_csv_dataset(cfg["data"]["csv"], column_schema(cfg))
    pred = predict(model, ds.features)
    path = _out_dir(cfg) / "predictions.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "env", "prediction"])
        for i, (e, v) in enumerate(zip(ds.env_of_row, pred)):
            w.writerow([i, e, repr(float(v))])
    lab = ds.labeled_mask
    if lab.any():
        print(f"mse on {int(lab.sum())} labeled rows: {mse(pred[lab], ds.outcomes[lab]):.6g}")
    print(f"wrote {path}")
    return EXIT_OK


def _smoothing_rows(sm: dict) -> int:
    if sm["window_minutes"] is not None:
        if sm["rows_per_minute"] is None:
            raise ConfigError("smoothing.window_minutes needs smoothing.rows_per_minute")
        return max(1, int(round(sm["window_minutes"] * sm["rows_per_minute"])))
    return int(sm["window_rows"])


def protocol_configs(cfg: dict) -> list[ProtocolConfig]:
    ev = cfg["evaluate"]
    modes = {False: (False,), True: (True,), "both": (False, True)}[ev["oracle_mode"]]
    window = _smoothing_rows(ev["smoothing"])
    out = []
    for spec in ev["methods"]:
        for n_lab in ev["n_labeled"]:
            for oracle in modes:
                label = spec.get("label")
                if label is not None and oracle:
                    label += "-Oracle"
                out.append(ProtocolConfig(
                    method=spec["method"], grid=spec.get("grid", [None]), weighting=cfg["weighting"],
                    n_labeled=n_lab, trials=ev["trials"], seed=cfg["seed"], oracle_mode=oracle,
                    smoothing_window=window, options={"jitter": cfg["jitter"]}, label=label,
                ))
    return out


def cmd_evaluate(cfg: dict) -> int:
    ds = dataset_from_config(cfg)
    report = EvalReport(config={"seed": cfg["seed"], "weighting": cfg["weighting"],
                                "evaluate": cfg["evaluate"], "environments": list(ds.registry)})
    for pc in protocol_configs(cfg):
        report.extend(run_loeo_protocol(ds, pc))
    out = _out_dir(cfg)
    report.to_csv(out / "records.csv")
    report.to_json(out / "report.json", cfg["evaluate"]["cvar_quantiles"])
    for agg in report.aggregates(cfg["evaluate"]["cvar_quantiles"]):
        print(f"{agg['method']:>16} n_labeled={agg['n_labeled']:<3} rmse={agg['rmse_mean']:.4f} "
              f"+- {agg['rmse_se']:.4f}  nmse={agg['nmse_mean']:.4f}")
    return EXIT_OK


def cmd_oracle(cfg: dict) -> int:
    oc = cfg["oracle"]
    reports, ok = [], True
    for kind in oc["kinds"]:
        rep = run_duality_suite(kind, oc["instances"], oc["betas"], tuple(oc["gammas"]), cfg["seed"],
                                oc["max_d"], oc["max_p"], oc["mc_count"])
        passed = rep.passed(oc["gap_tol"], oc["minimizer_tol"])
        ok &= passed
        reports.append({**rep.to_dict(), "passed": passed})
        print(f"{kind}: {rep.instances} instances, {rep.checks} checks, max rel gap {rep.max_rel_gap:.3e}, "
              f"max minimizer distance {rep.max_minimizer_distance:.3e} -> {'PASS' if passed else 'FAIL'}")
    _write_json(_out_dir(cfg) / "oracle_report.json",
                {"gap_tol": oc["gap_tol"], "minimizer_tol": oc["minimizer_tol"], "seed": cfg["seed"],
                 "passed": ok, "suites": reports})
    return EXIT_OK if ok else EXIT_NUMERICAL


def angle_to_top_eigenvector(beta, H) -> float:
    """Angle in degrees (0..90) between the line through ``beta`` and H's top eigenvector."""
    nb = np.linalg.norm(beta)
    if nb == 0:
        return math.nan
    v = np.linalg.eigh(H)[1][:, -1]
    c = min(1.0, abs(float(beta @ v)) / nb)
    return math.degrees(math.acos(c))


def sweep_rows(ds: MultiEnvDataset, cfg: dict) -> list[dict]:
    sc = cfg["sweep"]
    test_env = sc["test_env"]
    if test_env is not None and test_env not in ds.registry:
        raise ConfigError(f"sweep.test_env {test_env!r} is not an environment of the dataset")
    train_envs = sc["train_envs"] or [e for e in ds.registry if e != test_env]
    if test_env in train_envs:
        raise ConfigError("sweep.test_env must not be a training environment")
    train = ds.select_envs(train_envs)
    labeled, unlabeled = split_views(train)
    summ = env_moment_summaries(unlabeled)
    H = (h_mir if sc["method"] == "MIR" else h_vir)(summ).H
    gammas = sc["gammas"] or np.logspace(math.log10(sc["gamma_min"]), math.log10(sc["gamma_max"]), sc["num"]).tolist()
    if test_env is not None:
        rows = ds.rows_of(test_env)
        rows = rows[ds.labeled_mask[rows]]
        Xt, Yt = ds.features[rows], ds.outcomes[rows]
    out = []
    for g in gammas:
        model = fit_method(sc["method"], labeled, unlabeled, float(g), cfg["weighting"], jitter=cfg["jitter"],
                           summaries=summ)
        row = {"gamma": float(g)}
        row.update({f"beta_{j + 1}": float(b) for j, b in enumerate(model.beta)})
        row["beta_norm"] = float(np.linalg.norm(model.beta))
        row["angle_deg"] = angle_to_top_eigenvector(model.beta, H)
        row["train_mse"] = training_mse(model, labeled)
        row["test_mse"] = mse(predict(model, Xt), Yt) if test_env is not None and len(Yt) else math.nan
        out.append(row)
    return out


def cmd_sweep(cfg: dict) -> int:
    ds = dataset_from_config(cfg)
    rows = sweep_rows(ds, cfg)
    path = _out_dir(cfg) / "sweep.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) for k, v in r.items()})
    print(f"wrote {path} ({len(rows)} rows)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        with warnings.catch_warnings():
            warnings.simplefilter("error", ConvergenceWarning)
            if args.command == "simulate":
                return cmd_simulate(cfg)
            if args.command == "fit":
                return cmd_fit(cfg)
            if args.command == "predict":
                return cmd_predict(cfg, args.model)
            if args.command == "evaluate":
                return cmd_evaluate(cfg)
            if args.command == "oracle":
                return cmd_oracle(cfg)
            return cmd_sweep(cfg)
    except (NumericalError, ConvergenceError, ConvergenceWarning, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"invreg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataError, ValueError, KeyError, OSError) as exc:
        print(f"invreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
