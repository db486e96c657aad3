"""Per-environment moment summaries and the invariance regularizer matrices.

All averages across environments are unweighted (1/p), and covariances use
divisor n_i.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from ._linalg import check_orthogonal, project_psd, symmetrize
from .data import UnlabeledView
from .exceptions import DataError


@dataclass(frozen=True, eq=False)
class MomentSummary:
    env: str
    n: int
    mean: NDArray
    cov: NDArray


@dataclass(frozen=True, eq=False)
class RegularizerMatrix:
    """Symmetric PSD penalty matrix H with a tag saying how it was built."""

    H: NDArray
    kind: str
    weights: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.H.shape[0]

    def penalty(self, beta) -> float:
        beta = np.asarray(beta, dtype=float)
        return float(beta @ self.H @ beta)


def env_moment_summaries(view: UnlabeledView) -> list[MomentSummary]:
    X, env = view.X, view.env
    if len(X) == 0:
        raise DataError("unlabeled view is empty")
    out = []
    for e in view.envs:
        Xe = X[env == e]
        if len(Xe) == 0:
            raise DataError(f"environment {e!r} has no rows")
        mu = Xe.mean(axis=0)
        R = Xe - mu
        out.append(MomentSummary(e, len(Xe), mu, symmetrize(R.T @ R / len(Xe))))
    return out


def summaries_from_moments(means, covs, envs=None, n=None) -> list[MomentSummary]:
    """Wrap given per-environment means/covariances (e.g. population values)."""
    means = [np.atleast_1d(np.asarray(m, dtype=float)) for m in means]
    covs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in covs]
    if len(means) != len(covs):
        raise ValueError("need one covariance per mean")
    envs = envs or [f"e{i + 1}" for i in range(len(means))]
    return [MomentSummary(e, n or 0, m, c) for e, m, c in zip(envs, means, covs)]


def _stack(summaries: Sequence[MomentSummary], attr: str) -> NDArray:
    if len(summaries) == 0:
        raise ValueError("need at least one environment summary")
    arrs = [getattr(s, attr) for s in summaries]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch across summaries: {sorted(shapes)}")
    return np.stack(arrs)


def h_mir(summaries: Sequence[MomentSummary]) -> RegularizerMatrix:
    """Covariance (divisor p) of the environment means."""
    K = _stack(summaries, "mean").T  # d x p
    p = K.shape[1]
    m = K.mean(axis=1)
    H = K @ K.T / p - np.outer(m, m)
    return RegularizerMatrix(project_psd(H, "H_MIR"), "MIR")


def _cov_deviations(summaries) -> NDArray:
    G = _stack(summaries, "cov")
    return G - G.mean(axis=0)


def h_vir(summaries: Sequence[MomentSummary]) -> RegularizerMatrix:
    """Average squared deviation of environment covariances from their mean."""
    A = _cov_deviations(summaries)
    H = np.einsum("pij,pjk->ik", A, A) / A.shape[0]
    return RegularizerMatrix(project_psd(H, "H_VIR"), "VIR")


def h_combined(summaries, weight_mir: float, weight_vir: float) -> RegularizerMatrix:
    if not (np.isfinite(weight_mir) and np.isfinite(weight_vir)):
        raise ValueError("weights must be finite")
    if weight_mir < 0 or weight_vir < 0:
        raise ValueError("weights must be non-negative")
    H = weight_mir * h_mir(summaries).H + weight_vir * h_vir(summaries).H
    return RegularizerMatrix(symmetrize(H), "MIR_VIR", {"mir": float(weight_mir), "vir": float(weight_vir)})


def vir_penalty(summaries, beta) -> float:
    """(1/p) sum_i ||A_i beta||^2 with A_i the covariance deviations."""
    beta = np.asarray(beta, dtype=float)
    Ab = _cov_deviations(summaries) @ beta
    return float(np.mean(np.sum(Ab**2, axis=1)))


def vir_alternative_penalty(summaries, beta) -> float:
    """(1/p) sum_i (beta' A_i beta)^2 -- the variance-of-prediction-variance form.

    Diagnostic only: directions whose quadratic forms cancel are not penalized.
    """
    beta = np.asarray(beta, dtype=float)
    q = np.einsum("i,pij,j->p", beta, _cov_deviations(summaries), beta)
    return float(np.mean(q**2))


def shared_eigenbasis_penalty(Q, lambda_table, beta) -> float:
    """sum_j var_j * (Q'beta)_j^2, var_j the across-environment eigenvalue variance."""
    Q = check_orthogonal(Q)
    lam = np.atleast_2d(np.asarray(lambda_table, dtype=float))
    if lam.shape[1] != Q.shape[0]:
        raise ValueError("lambda_table must have one column per eigenvector")
    if np.any(lam < 0):
        raise ValueError("eigenvalues must be non-negative")
    sigma2 = lam.var(axis=0)
    bt = Q.T @ np.asarray(beta, dtype=float)
    return float(sigma2 @ bt**2)


def write_matrix(H, path) -> None:
    """Plain-text matrix file: first line d, then d rows of d reals."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    lines = [str(H.shape[0])] + [" ".join(repr(float(v)) for v in row) for row in H]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_matrix(path) -> NDArray:
    tokens = Path(path).read_text(encoding="utf-8").split()
    if not tokens:
        raise DataError(f"{path}: empty matrix file")
    try:
        d = int(tokens[0])
        vals = [float(t) for t in tokens[1:]]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if d < 1 or len(vals) != d * d:
        raise DataError(f"{path}: expected {d * d} entries after the dimension, got {len(vals)}")
    H = np.array(vals).reshape(d, d)
    if not np.all(np.isfinite(H)):
        raise DataError(f"{path}: non-finite entries")
    return H
