"""Multi-environment dataset containers, labeled/unlabeled views and CSV ingestion."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .exceptions import DataError

MISSING_TOKENS = frozenset({"NA", ""})


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultiEnvDataset:
    """Features, optional outcomes and environment labels for n observations.

    ``outcomes`` holds NaN for unlabeled rows. ``registry`` fixes the order of
    environments; every environment in it owns at least one row.
    """

    features: NDArray
    outcomes: NDArray
    env_of_row: NDArray
    registry: tuple[str, ...]
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim != 2:
            raise DataError(f"features must be a 2-d array, got shape {X.shape}")
        n, d = X.shape
        if n < 1 or d < 1:
            raise DataError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        if not np.all(np.isfinite(X)):
            r, c = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite feature value at row {r}, column {c}")
        y = np.asarray(self.outcomes, dtype=float)
        if y.shape != (n,):
            raise DataError(f"outcomes must have shape ({n},), got {y.shape}")
        if np.any(np.isinf(y)):
            raise DataError("outcomes contain infinite values")
        env = np.asarray(self.env_of_row, dtype=object)
        if env.shape != (n,):
            raise DataError(f"env_of_row must have shape ({n},), got {env.shape}")
        env = np.array([str(e) for e in env], dtype=object)
        registry = tuple(str(e) for e in self.registry)
        if len(registry) < 1:
            raise DataError("environment registry is empty")
        if any(e == "" for e in registry):
            raise DataError("environment ids must be non-empty")
        if len(set(registry)) != len(registry):
            raise DataError("environment registry contains duplicates")
        if set(env) != set(registry):
            missing = set(registry) - set(env)
            extra = set(env) - set(registry)
            raise DataError(
                f"env labels and registry disagree (no rows: {sorted(missing)}, "
                f"unregistered: {sorted(extra)})"
            )
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(d))
        if len(names) != d:
            raise DataError(f"{len(names)} feature names for {d} columns")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "outcomes", _frozen(y))
        object.__setattr__(self, "env_of_row", _frozen(env))
        object.__setattr__(self, "registry", registry)
        object.__setattr__(self, "feature_names", names)

    @classmethod
    def from_arrays(cls, X, y=None, env=None, registry=None, feature_names=()):
        """Build a dataset; registry defaults to order of first appearance."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = X.shape[0]
        y = np.full(n, np.nan) if y is None else np.asarray(y, dtype=float)
        env = np.zeros(n, dtype=object) if env is None else np.asarray(env, dtype=object)
        env = np.array([str(e) for e in env], dtype=object)
        if registry is None:
            registry = tuple(dict.fromkeys(env.tolist()))
        return cls(X, y, env, tuple(registry), tuple(feature_names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def p(self) -> int:
        return len(self.registry)

    @property
    def labeled_mask(self) -> NDArray:
        return ~np.isnan(self.outcomes)

    @property
    def k(self) -> int:
        return int(self.labeled_mask.sum())

    @property
    def labeled_envs(self) -> tuple[str, ...]:
        """Environments owning at least one labeled row, in registry order."""
        have = set(self.env_of_row[self.labeled_mask])
        return tuple(e for e in self.registry if e in have)

    def rows_of(self, env: str) -> NDArray:
        return np.flatnonzero(self.env_of_row == env)

    def select_envs(self, envs: Iterable[str]) -> "MultiEnvDataset":
        """New dataset restricted to ``envs`` (registry order preserved)."""
        envs = set(envs)
        unknown = envs - set(self.registry)
        if unknown:
            raise DataError(f"unknown environments: {sorted(unknown)}")
        registry = tuple(e for e in self.registry if e in envs)
        rows = np.flatnonzero(np.isin(self.env_of_row, list(envs)))
        return MultiEnvDataset(
            self.features[rows], self.outcomes[rows], self.env_of_row[rows],
            registry, self.feature_names,
        )

    def mask_labels(self, keep_envs: Iterable[str]) -> "MultiEnvDataset":
        """Copy with outcomes of environments outside ``keep_envs`` set to missing."""
        keep = np.isin(self.env_of_row, list(keep_envs))
        y = np.where(keep, self.outcomes, np.nan)
        return MultiEnvDataset(self.features, y, self.env_of_row, self.registry, self.feature_names)


@dataclass(frozen=True, eq=False)
class _View:
    dataset: MultiEnvDataset
    rows: NDArray
    envs: tuple[str, ...]

    @property
    def X(self) -> NDArray:
        return self.dataset.features[self.rows]

    @property
    def env(self) -> NDArray:
        return self.dataset.env_of_row[self.rows]

    @property
    def d(self) -> int:
        return self.dataset.d

    def __len__(self):
        return len(self.rows)

    def groups(self) -> dict[str, NDArray]:
        """Positions (into this view's rows) of each environment, registry order."""
        env = self.env
        return {e: np.flatnonzero(env == e) for e in self.envs}


@dataclass(frozen=True, eq=False)
class LabeledView(_View):
    """Labeled rows (X_i, Y_i, E_i) of the chosen labeled environments."""

    @property
    def Y(self) -> NDArray:
        return self.dataset.outcomes[self.rows]

    @property
    def k(self) -> int:
        return len(self.rows)

    def restrict(self, envs: Iterable[str]) -> "LabeledView":
        envs = set(envs)
        unknown = envs - set(self.envs)
        if unknown:
            raise DataError(f"environments not in labeled view: {sorted(unknown)}")
        keep = tuple(e for e in self.envs if e in envs)
        rows = self.rows[np.isin(self.env, list(keep))]
        return LabeledView(self.dataset, rows, keep)


@dataclass(frozen=True, eq=False)
class UnlabeledView(_View):
    """All rows (X_j, E_j) of all environments, labeled ones included."""


def split_views(dataset: MultiEnvDataset, labeled_envs=None) -> tuple[LabeledView, UnlabeledView]:
    """Return the labeled and unlabeled views of ``dataset``.

    ``labeled_envs`` masks labels of all other environments; each named
    environment must own at least one labeled row.
    """
    available = dataset.labeled_envs
    if labeled_envs is None:
        chosen = available
    else:
        labeled_envs = set(str(e) for e in labeled_envs)
        unknown = labeled_envs - set(dataset.registry)
        if unknown:
            raise DataError(f"unknown environments: {sorted(unknown)}")
        unlabeled = labeled_envs - set(available)
        if unlabeled:
            raise DataError(f"environments without labeled rows: {sorted(unlabeled)}")
        chosen = tuple(e for e in available if e in labeled_envs)
    rows = np.flatnonzero(dataset.labeled_mask & np.isin(dataset.env_of_row, list(chosen)))
    labeled = LabeledView(dataset, rows, tuple(chosen))
    unlabeled = UnlabeledView(dataset, np.arange(dataset.n), dataset.registry)
    return labeled, unlabeled


def center_per_environment(dataset: MultiEnvDataset) -> MultiEnvDataset:
    """Subtract within-environment means from features and labeled outcomes."""
    X = np.array(dataset.features, copy=True)
    y = np.array(dataset.outcomes, copy=True)
    for e in dataset.registry:
        rows = dataset.rows_of(e)
        X[rows] -= X[rows].mean(axis=0)
        lab = rows[~np.isnan(y[rows])]
        if len(lab):
            y[lab] -= y[lab].mean()
    return MultiEnvDataset(X, y, dataset.env_of_row, dataset.registry, dataset.feature_names)


@dataclass(frozen=True)
class ColumnSchema:
    """Which CSV columns hold the environment, the outcome and the features.

    ``feature_columns=None`` means every column that is neither the
    environment nor the outcome column.
    """

    env_column: str
    outcome_column: str | None = None
    feature_columns: Sequence[str] | None = None
    missing_tokens: frozenset = field(default=MISSING_TOKENS)


def _parse_real(token: str, row: int, col: str) -> float:
    try:
        v = float(token)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {token!r} as a real number") from None
    return v


def load_csv_dataset(path, schema: ColumnSchema) -> MultiEnvDataset:
    """Read a header-first, comma-separated UTF-8 file into a dataset.

    Row numbers in error messages are 1-based data rows (header excluded).
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if schema.env_column not in header:
            raise DataError(f"{path}: environment column {schema.env_column!r} missing")
        if schema.outcome_column is not None and schema.outcome_column not in header:
            raise DataError(f"{path}: outcome column {schema.outcome_column!r} missing")
        if schema.feature_columns is None:
            feats = [h for h in header if h not in (schema.env_column, schema.outcome_column)]
        else:
            feats = list(schema.feature_columns)
            absent = [c for c in feats if c not in header]
            if absent:
                raise DataError(f"{path}: feature columns missing: {absent}")
        if not feats:
            raise DataError(f"{path}: zero feature columns")
        ie = header.index(schema.env_column)
        iy = header.index(schema.outcome_column) if schema.outcome_column else None
        ix = [header.index(c) for c in feats]

        X, y, env = [], [], []
        for r, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {r} has {len(rec)} fields, expected {len(header)}")
            e = rec[ie].strip()
            if not e:
                raise DataError(f"{path}: row {r}, column {schema.env_column!r}: empty environment id")
            row = []
            for j, c in zip(ix, feats):
                v = _parse_real(rec[j].strip(), r, c)
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {r}, column {c!r}: non-finite value {rec[j]!r}")
                row.append(v)
            if iy is None or rec[iy].strip() in schema.missing_tokens:
                yv = math.nan
            else:
                yv = _parse_real(rec[iy].strip(), r, schema.outcome_column)
                if not math.isfinite(yv):
                    raise DataError(
                        f"{path}: row {r}, column {schema.outcome_column!r}: non-finite value {rec[iy]!r}"
                    )
            X.append(row)
            y.append(yv)
            env.append(e)
    if not X:
        raise DataError(f"{path}: no data rows")
    return MultiEnvDataset.from_arrays(np.array(X), np.array(y), np.array(env, dtype=object),
                                       feature_names=tuple(feats))


def write_csv_dataset(dataset: MultiEnvDataset, path, env_column="env", outcome_column="y") -> None:
    """Write ``dataset`` in the format read by :func:`load_csv_dataset`.

    Floats use ``repr`` so the file round-trips exactly and is byte-stable.
    """
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([env_column, outcome_column, *dataset.feature_names])
        for e, yv, xr in zip(dataset.env_of_row, dataset.outcomes, dataset.features):
            w.writerow([e, "NA" if np.isnan(yv) else repr(float(yv)), *(repr(float(v)) for v in xr)])


def concat_datasets(parts: Sequence[MultiEnvDataset]) -> MultiEnvDataset:
    """Stack fragments; registry is the concatenation of fragment registries."""
    registry = []
    for part in parts:
        for e in part.registry:
            if e in registry:
                raise DataError(f"environment {e!r} appears in more than one fragment")
            registry.append(e)
    return MultiEnvDataset(
        np.vstack([p.features for p in parts]),
        np.concatenate([p.outcomes for p in parts]),
        np.concatenate([p.env_of_row for p in parts]),
        tuple(registry),
        parts[0].feature_names,
    )
