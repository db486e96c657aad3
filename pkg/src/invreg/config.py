"""Experiment configuration: defaults, schema validation and dataset construction.

A configuration is one nested YAML document. Every key has an explicit
default (see ``DEFAULTS``); a user document is deep-merged over the
defaults and the result is validated against ``SCHEMA``.

The dataset comes from exactly one source, ``data.csv`` or
``data.simulate``. Naming one source in a user document drops the default
of the other; a user ``data.simulate`` block is completed from
``SIMULATE_TEMPLATE`` rather than from the default simulation.
"""
from __future__ import annotations

import copy
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .data import ColumnSchema, MultiEnvDataset, load_csv_dataset
from .exceptions import ConfigError
from .scm import (
    LinearScmSpec, PerturbationSpec, make_cov_shift_suite, make_mean_shift_suite, random_orthogonal,
    simulate_dataset,
)

_GRID = [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0, 100000.0]

DEFAULTS: dict = {
    "seed": 0,
    "weighting": "pooled",
    "jitter": 0.0,
    "out": "out",
    "data": {
        "csv": None,
        "schema": {"env_column": "env", "outcome_column": "y", "feature_columns": None,
                   "missing_tokens": ["NA", ""]},
        # nine anisotropic mean-shift environments plus one held-out environment
        # shifted along the high-variance direction
        "simulate": {
            "scm": {"w": [], "b": [1.0, 0.5], "C": None, "var_eps_y": 1.0,
                    "cov_eps_x": [[2.0, 0.0], [0.0, 2.0]]},
            "suite": {"kind": "mean_shift", "p": 9, "mean_cov": [[16.0, 0.0], [0.0, 0.25]],
                      "Q": None, "eigenvalue_ranges": None,
                      "perturbations": [{"mean_shift": [20.0, 0.0], "cov_shift": None}]},
            "n_per_env": 200,
            "labels_only_for": None,
        },
    },
    "fit": {
        "method": "MIR",
        "hp": 1.0,
        "labeled_envs": None,
        "unlabeled_envs": None,
        "center": True,
        "eval_beta": None,
        "h_matrix": None,
        "regularizer": "MIR",
        "loss": "squared",
        "huber_delta": 1.0,
        "iters": 500,
    },
    "evaluate": {
        "methods": [
            {"method": "OLS", "grid": [None]},
            {"method": "RIDGE", "grid": _GRID},
            {"method": "MIR", "grid": _GRID},
        ],
        "n_labeled": [3, 4, 5],
        "trials": 20,
        "oracle_mode": False,
        "smoothing": {"window_rows": 1, "window_minutes": None, "rows_per_minute": None},
        "cvar_quantiles": [0.0, 0.5, 0.9],
    },
    "oracle": {
        "kinds": ["MIR", "VIR"],
        "instances": 50,
        "betas": 200,
        "gammas": [0.1, 1.0, 10.0],
        "max_d": 4,
        "max_p": 6,
        "mc_count": 4,
        "gap_tol": 1e-10,
        "minimizer_tol": 1e-4,
    },
    "sweep": {
        "method": "MIR",
        "gammas": None,
        "gamma_min": 1e-3,
        "gamma_max": 1e8,
        "num": 45,
        "train_envs": None,
        "test_env": "e10",
    },
}

_num = {"type": "number"}
_nnum = {"type": "number", "minimum": 0}
_pint = {"type": "integer", "minimum": 1}
_strs = {"type": ["array", "null"], "items": {"type": "string"}}
_vec = {"type": "array", "items": _num}
_mat = {"type": "array", "items": _vec}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA: dict = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "weighting": {"enum": ["pooled", "balanced", "env_balanced"]},
    "jitter": _nnum,
    "out": {"type": "string"},
    "data": _obj({
        "csv": {"type": ["string", "null"]},
        "schema": _obj({
            "env_column": {"type": "string"},
            "outcome_column": {"type": ["string", "null"]},
            "feature_columns": _strs,
            "missing_tokens": {"type": "array", "items": {"type": "string"}},
        }),
        "simulate": {"oneOf": [{"type": "null"}, _obj({
            "scm": _obj({
                "w": _vec, "b": _vec, "C": {"oneOf": [{"type": "null"}, _mat]},
                "var_eps_y": {"type": "number", "exclusiveMinimum": 0},
                "cov_eps_x": {"oneOf": [_nnum, _mat]},
            }, required=("b",)),
            "suite": _obj({
                "kind": {"enum": ["mean_shift", "cov_shift", "explicit"]},
                "p": {"type": "integer", "minimum": 0},
                "mean_cov": {"oneOf": [{"type": "null"}, _mat]},
                "Q": {"oneOf": [{"type": "null"}, _mat]},
                "eigenvalue_ranges": {"oneOf": [{"type": "null"}, _mat]},
                "perturbations": {"type": "array", "items": _obj({
                    "mean_shift": _vec,
                    "cov_shift": {"oneOf": [{"type": "null"}, _nnum, _mat]},
                }, required=("mean_shift",))},
            }),
            "n_per_env": {"oneOf": [_pint, {"type": "array", "items": _pint}]},
            "labels_only_for": _strs,
        })]},
    }),
    "fit": _obj({
        "method": {"type": "string"},
        "hp": {"oneOf": [{"type": "null"}, _nnum, {"type": "array", "items": _nnum, "minItems": 2, "maxItems": 2}]},
        "labeled_envs": _strs,
        "unlabeled_envs": _strs,
        "center": {"type": "boolean"},
        "eval_beta": {"oneOf": [{"type": "null"}, _vec]},
        "h_matrix": {"type": ["string", "null"]},
        "regularizer": {"enum": ["MIR", "VIR", "none"]},
        "loss": {"enum": ["squared", "logistic", "huber"]},
        "huber_delta": {"type": "number", "exclusiveMinimum": 0},
        "iters": _pint,
    }),
    "evaluate": _obj({
        "methods": {"type": "array", "minItems": 1, "items": _obj({
            "method": {"type": "string"},
            "grid": {"type": "array", "minItems": 1},
            "label": {"type": ["string", "null"]},
        }, required=("method",))},
        "n_labeled": {"type": "array", "minItems": 1, "items": _pint},
        "trials": _pint,
        "oracle_mode": {"enum": [False, True, "both"]},
        "smoothing": _obj({
            "window_rows": _pint,
            "window_minutes": {"oneOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0}]},
            "rows_per_minute": {"oneOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0}]},
        }),
        "cvar_quantiles": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
    }),
    "oracle": _obj({
        "kinds": {"type": "array", "minItems": 1, "items": {"enum": ["MIR", "VIR"]}},
        "instances": _pint,
        "betas": _pint,
        "gammas": {"type": "array", "minItems": 1, "items": _nnum},
        "max_d": _pint,
        "max_p": {"type": "integer", "minimum": 2},
        "mc_count": _pint,
        "gap_tol": _nnum,
        "minimizer_tol": _nnum,
    }),
    "sweep": _obj({
        "method": {"enum": ["MIR", "VIR"]},
        "gammas": {"oneOf": [{"type": "null"}, {"type": "array", "minItems": 1, "items": _nnum}]},
        "gamma_min": {"type": "number", "exclusiveMinimum": 0},
        "gamma_max": {"type": "number", "exclusiveMinimum": 0},
        "num": _pint,
        "train_envs": _strs,
        "test_env": {"type": ["string", "null"]},
    }),
})

# template that a user-supplied data.simulate block is merged over
SIMULATE_TEMPLATE: dict = {
    "scm": {"w": [], "b": [], "C": None, "var_eps_y": 1.0, "cov_eps_x": 1.0},
    "suite": {"kind": "explicit", "p": 0, "mean_cov": None, "Q": None, "eigenvalue_ranges": None,
              "perturbations": []},
    "n_per_env": 100,
    "labels_only_for": None,
}


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    if path == "data" and over.get("csv") is not None and over.get("simulate") is not None:
        raise ConfigError("config must name exactly one dataset source: data.csv or data.simulate")
    for key, value in over.items():
        sub = f"{path}.{key}" if path else key
        if sub == "data.simulate" and isinstance(value, dict):
            out["csv"] = None
            out[key] = _merge(SIMULATE_TEMPLATE, value, sub)
        elif sub == "data.csv" and value is not None:
            out["csv"] = value
            out["simulate"] = None
        elif isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, sub)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    data = cfg["data"]
    if (data["csv"] is None) == (data["simulate"] is None):
        raise ConfigError("config must name exactly one dataset source: data.csv or data.simulate")
    return cfg


def load_config(path=None, overrides: dict | None = None, labels_only_for=None) -> dict:
    """Defaults, then the YAML document at ``path``, then ``overrides``; validated.

    ``labels_only_for`` replaces the label mask of the resolved simulation.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    if labels_only_for is not None:
        if cfg["data"]["simulate"] is None:
            raise ConfigError("a label mask applies to simulated data only")
        cfg["data"]["simulate"]["labels_only_for"] = list(labels_only_for)
    return validate(cfg)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


def scm_from_config(scm_cfg: dict) -> LinearScmSpec:
    c = {k: v for k, v in scm_cfg.items() if v is not None}
    b = np.atleast_1d(np.asarray(c["b"], dtype=float))
    cov = c.get("cov_eps_x", np.eye(b.size))
    if np.ndim(cov) == 0:
        c["cov_eps_x"] = float(cov) * np.eye(b.size)
    return LinearScmSpec.from_dict(c)


def perturbations_from_config(suite: dict, d: int, rng) -> list[PerturbationSpec]:
    """Generated suite (``kind``) followed by the explicit ``perturbations``."""
    kind, p = suite.get("kind", "mean_shift"), int(suite.get("p", 0))
    if kind == "mean_shift" and p:
        if suite.get("mean_cov") is None:
            raise ConfigError("mean_shift suite needs mean_cov")
        perts = make_mean_shift_suite(p, suite["mean_cov"], rng)
    elif kind == "cov_shift" and p:
        if suite.get("eigenvalue_ranges") is None:
            raise ConfigError("cov_shift suite needs eigenvalue_ranges")
        Q = suite.get("Q")
        Q = random_orthogonal(d, rng) if Q is None else np.asarray(Q, dtype=float)
        perts = make_cov_shift_suite(p, Q, suite["eigenvalue_ranges"], rng)
    else:
        perts = []
    for item in suite.get("perturbations") or []:
        G = item.get("cov_shift")
        perts.append(PerturbationSpec(item["mean_shift"], np.zeros((d, d)) if G is None else G))
    if not perts:
        raise ConfigError("simulation defines no environments")
    return perts


def simulate_from_config(sim: dict, seed: int) -> MultiEnvDataset:
    """One generator seeded by ``seed`` draws the suite, then the samples."""
    spec = scm_from_config(sim["scm"])
    rng = np.random.default_rng(seed)
    perts = perturbations_from_config(sim["suite"], spec.d, rng)
    return simulate_dataset(spec, perts, sim["n_per_env"], rng, labeled_envs=sim.get("labels_only_for"))


def column_schema(cfg: dict) -> ColumnSchema:
    s = cfg["data"]["schema"]
    cols = s.get("feature_columns")
    return ColumnSchema(s["env_column"], s.get("outcome_column"), tuple(cols) if cols else None,
                        frozenset(s.get("missing_tokens", ("NA", ""))))


def dataset_from_config(cfg: dict) -> MultiEnvDataset:
    data = cfg["data"]
    if data["csv"] is not None:
        return load_csv_dataset(data["csv"], column_schema(cfg))
    return simulate_from_config(data["simulate"], cfg["seed"])
