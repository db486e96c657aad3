"""Linear-Gaussian anti-causal SCM: sampling and closed-form population moments.

The structural equations are

    U   ~ N(0, I_q)
    Y   = w'U + eps_Y,           eps_Y ~ N(0, var_eps_y)
    X   = b*Y + C U + eps_X + eps_e,   eps_X ~ N(0, cov_eps_x)

with the environment perturbation ``eps_e ~ N(mean_shift, cov_shift)``
independent of everything else. Only the law of ``eps_e`` changes between
environments.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from ._linalg import check_orthogonal, project_psd, rng_from, spawn_rngs, sqrt_psd, symmetrize
from .data import MultiEnvDataset, concat_datasets


@dataclass(frozen=True, eq=False)
class LinearScmSpec:
    w: NDArray
    b: NDArray
    C: NDArray
    var_eps_y: float
    cov_eps_x: NDArray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        d, q = b.shape[0], w.shape[0]
        if w.ndim != 1 or b.ndim != 1:
            raise ValueError("w and b must be vectors")
        C = np.asarray(self.C, dtype=float).reshape(d, q) if np.size(self.C) == d * q else None
        if C is None:
            raise ValueError(f"C must have shape ({d}, {q}), got {np.shape(self.C)}")
        if not self.var_eps_y > 0:
            raise ValueError("var_eps_y must be positive")
        S = np.atleast_2d(np.asarray(self.cov_eps_x, dtype=float))
        if S.shape != (d, d):
            raise ValueError(f"cov_eps_x must have shape ({d}, {d}), got {S.shape}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "var_eps_y", float(self.var_eps_y))
        object.__setattr__(self, "cov_eps_x", project_psd(S, "cov_eps_x"))

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def q(self) -> int:
        return self.w.shape[0]

    def to_dict(self) -> dict:
        return {
            "w": self.w.tolist(), "b": self.b.tolist(), "C": self.C.tolist(),
            "var_eps_y": self.var_eps_y, "cov_eps_x": self.cov_eps_x.tolist(),
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "LinearScmSpec":
        b = np.atleast_1d(np.asarray(cfg["b"], dtype=float))
        w = np.asarray(cfg.get("w", []), dtype=float).reshape(-1)
        C = np.asarray(cfg.get("C", np.zeros((b.size, w.size))), dtype=float).reshape(b.size, w.size)
        cov = cfg.get("cov_eps_x", np.eye(b.size))
        return cls(w, b, C, cfg.get("var_eps_y", 1.0), cov)


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    """Gaussian environment perturbation ``eps_e ~ N(mean_shift, cov_shift)``."""

    mean_shift: NDArray
    cov_shift: NDArray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean_shift, dtype=float))
        d = mu.shape[0]
        G = np.asarray(self.cov_shift, dtype=float)
        if G.ndim == 0:
            G = G * np.eye(d)
        G = np.atleast_2d(G)
        if G.shape != (d, d):
            raise ValueError(f"cov_shift must have shape ({d}, {d}), got {G.shape}")
        object.__setattr__(self, "mean_shift", mu)
        object.__setattr__(self, "cov_shift", project_psd(G, "cov_shift"))

    @property
    def second_moment(self) -> NDArray:
        """E[eps_e eps_e'] = Var + mean mean'."""
        return self.cov_shift + np.outer(self.mean_shift, self.mean_shift)

    def to_dict(self) -> dict:
        return {"mean_shift": self.mean_shift.tolist(), "cov_shift": self.cov_shift.tolist()}

    @classmethod
    def from_dict(cls, cfg: dict, d: int | None = None) -> "PerturbationSpec":
        mu = np.asarray(cfg.get("mean_shift", np.zeros(d or 0)), dtype=float).reshape(-1)
        G = cfg.get("cov_shift", np.zeros((mu.size, mu.size)))
        return cls(mu, G)


@dataclass(frozen=True, eq=False)
class R0Coeffs:
    """R_0(beta) = var_y - 2 beta'cov_zy + beta'cov_z beta, Z = bY + CU + eps_X."""

    var_y: float
    cov_zy: NDArray
    cov_z: NDArray

    def __call__(self, beta) -> float:
        beta = np.asarray(beta, dtype=float)
        return float(self.var_y - 2.0 * beta @ self.cov_zy + beta @ self.cov_z @ beta)

    def grad(self, beta) -> NDArray:
        return 2.0 * (self.cov_z @ beta - self.cov_zy)


@dataclass(frozen=True, eq=False)
class PopulationMoments:
    mean_x: NDArray
    cov_x: NDArray
    m_eps: NDArray
    r0: R0Coeffs
    cov_xy: NDArray

    @property
    def second_moment_x(self) -> NDArray:
        return self.cov_x + np.outer(self.mean_x, self.mean_x)


def _check_dims(spec: LinearScmSpec, pert: PerturbationSpec):
    if pert.mean_shift.shape[0] != spec.d:
        raise ValueError(f"perturbation has dimension {pert.mean_shift.shape[0]}, SCM has d={spec.d}")


def r0_coeffs(spec: LinearScmSpec) -> R0Coeffs:
    var_y = float(spec.w @ spec.w + spec.var_eps_y)
    Cw = spec.C @ spec.w
    cov_zy = spec.b * var_y + Cw
    cov_z = (
        np.outer(spec.b, spec.b) * var_y
        + np.outer(spec.b, Cw) + np.outer(Cw, spec.b)
        + spec.C @ spec.C.T + spec.cov_eps_x
    )
    return R0Coeffs(var_y, cov_zy, symmetrize(cov_z))


def population_moments(spec: LinearScmSpec, pert: PerturbationSpec) -> PopulationMoments:
    """Closed-form moments of X in the environment described by ``pert``."""
    _check_dims(spec, pert)
    r0 = r0_coeffs(spec)
    return PopulationMoments(
        mean_x=pert.mean_shift.copy(),
        cov_x=symmetrize(r0.cov_z + pert.cov_shift),
        m_eps=symmetrize(pert.second_moment),
        r0=r0,
        # eps_e is independent of Y and E[Y] = 0, so Cov(X, Y) = E[XY] = Cov(Z, Y)
        cov_xy=r0.cov_zy.copy(),
    )


def _gaussian(rng, mean, cov, n):
    L = sqrt_psd(cov)
    return mean + rng.standard_normal((n, len(mean))) @ L


def sample_environment(spec: LinearScmSpec, pert: PerturbationSpec, env: str, n: int, seed,
                       feature_names=()) -> MultiEnvDataset:
    """Draw ``n`` i.i.d. labeled rows of environment ``env``."""
    _check_dims(spec, pert)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_from(seed)
    U = rng.standard_normal((n, spec.q))
    Y = U @ spec.w + np.sqrt(spec.var_eps_y) * rng.standard_normal(n)
    eps_x = _gaussian(rng, np.zeros(spec.d), spec.cov_eps_x, n)
    eps_e = _gaussian(rng, pert.mean_shift, pert.cov_shift, n)
    X = np.outer(Y, spec.b) + U @ spec.C.T + eps_x + eps_e
    return MultiEnvDataset.from_arrays(X, Y, np.full(n, env, dtype=object), (env,), feature_names)


def simulate_dataset(spec: LinearScmSpec, perts: Sequence[PerturbationSpec], n_per_env, seed,
                     env_ids: Sequence[str] | None = None, labeled_envs=None) -> MultiEnvDataset:
    """Sample every environment with independent child seeds of ``seed``.

    ``n_per_env`` is an int or one count per environment. Outcomes of
    environments not in ``labeled_envs`` (when given) are set to missing.
    """
    p = len(perts)
    env_ids = list(env_ids) if env_ids is not None else [f"e{i + 1}" for i in range(p)]
    if len(env_ids) != p:
        raise ValueError("one environment id per perturbation required")
    counts = [int(n_per_env)] * p if np.ndim(n_per_env) == 0 else [int(c) for c in n_per_env]
    children = spawn_rngs(seed, p)
    names = tuple(f"x{j + 1}" for j in range(spec.d))
    parts = [sample_environment(spec, pert, e, c, s, names)
             for pert, e, c, s in zip(perts, env_ids, counts, children)]
    ds = concat_datasets(parts)
    if labeled_envs is not None:
        ds = ds.mask_labels(labeled_envs)
    return ds


def make_mean_shift_suite(p: int, mean_cov, seed) -> list[PerturbationSpec]:
    """``p`` pure mean-shift perturbations with means drawn from N(0, mean_cov)."""
    if p < 2:
        raise ValueError("p must be >= 2")
    S = project_psd(np.atleast_2d(np.asarray(mean_cov, dtype=float)), "mean_cov")
    d = S.shape[0]
    rng = rng_from(seed)
    means = rng.standard_normal((p, d)) @ sqrt_psd(S)
    return [PerturbationSpec(m, np.zeros((d, d))) for m in means]


def make_cov_shift_suite(p: int, Q, eigenvalue_ranges, seed) -> list[PerturbationSpec]:
    """``p`` zero-mean perturbations sharing the eigenbasis ``Q``.

    Eigenvalue j of every environment is uniform on ``eigenvalue_ranges[j]``.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    Q = check_orthogonal(Q)
    ranges = np.asarray(eigenvalue_ranges, dtype=float).reshape(-1, 2)
    d = Q.shape[0]
    if ranges.shape[0] != d:
        raise ValueError(f"need {d} eigenvalue intervals, got {ranges.shape[0]}")
    if np.any(ranges[:, 0] < 0) or np.any(ranges[:, 1] < ranges[:, 0]):
        raise ValueError("eigenvalue intervals must satisfy 0 <= low <= high")
    rng = rng_from(seed)
    lam = ranges[:, 0] + (ranges[:, 1] - ranges[:, 0]) * rng.random((p, d))
    return [PerturbationSpec(np.zeros(d), symmetrize((Q * l) @ Q.T)) for l in lam]


def random_orthogonal(d: int, seed) -> NDArray:
    """Haar-distributed orthogonal matrix (QR with sign correction)."""
    rng = rng_from(seed)
    Z = rng.standard_normal((d, d))
    Q, R = np.linalg.qr(Z)
    return Q * np.sign(np.diag(R))
