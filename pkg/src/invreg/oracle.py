"""Population-level worst-case risk over mean- and covariance-shift classes.

Two independent routes are compared:

* worst case: R_0(beta) + beta'(M_bar + A)beta maximized over feasible
  increments 0 <= A <= B, with B built from the perturbation laws;
* regularized: training risk computed from the moments of X and Y plus
  gamma * beta'H beta, with H built from the moments of X by the same code
  that builds the plug-in regularizers.

The two agree for every beta, so their minimizers agree as well.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from ._linalg import project_psd, rng_from, sqrt_psd, symmetrize
from .estimators import SecondMomentSystem, solve_regularized
from .moments import h_mir, h_vir, summaries_from_moments
from .scm import LinearScmSpec, PerturbationSpec, R0Coeffs, population_moments, r0_coeffs

KINDS = ("MIR", "VIR")


@dataclass(frozen=True, eq=False)
class PerturbationClass:
    """{M_bar + A : 0 <= A <= bound} of admissible test second moments."""

    kind: str
    base_M: NDArray
    bound_B: NDArray
    gamma: float = 1.0
    labeled_idx: tuple = ()


def _kind(kind: str) -> str:
    k = str(kind).upper()
    aliases = {"MIR_DIAMOND": "MIR", "VIR_DAGGER": "VIR"}
    k = aliases.get(k, k)
    if k not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    return k


def _labeled(training_perts, labeled_idx) -> tuple:
    idx = tuple(int(i) for i in labeled_idx)
    if not idx:
        raise ValueError("labeled_idx must be non-empty")
    if len(set(idx)) != len(idx) or min(idx) < 0 or max(idx) >= len(training_perts):
        raise ValueError(f"labeled_idx {idx} is not a subset of 0..{len(training_perts) - 1}")
    return idx


def build_class(scm: LinearScmSpec, training_perts: Sequence[PerturbationSpec], labeled_idx, gamma,
                kind) -> PerturbationClass:
    kind = _kind(kind)
    idx = _labeled(training_perts, labeled_idx)
    if not gamma >= 0:
        raise ValueError("gamma must be >= 0")
    for pert in training_perts:
        if pert.mean_shift.shape[0] != scm.d:
            raise ValueError("perturbation dimension does not match the SCM")
    base = np.mean([training_perts[i].second_moment for i in idx], axis=0)
    if kind == "MIR":
        mu = np.stack([pt.mean_shift for pt in training_perts])  # p x d
        c = mu - mu.mean(axis=0)
        V = c.T @ c / len(training_perts)
    else:
        G = np.stack([pt.cov_shift for pt in training_perts])
        D = G - G.mean(axis=0)
        V = np.einsum("pij,pjk->ik", D, D) / len(training_perts)
    return PerturbationClass(kind, symmetrize(base), project_psd(gamma * V, "bound"), float(gamma), idx)


def sample_feasible_A(cls: PerturbationClass, count: int, seed) -> list[NDArray]:
    """Random feasible increments B^1/2 W B^1/2 plus the extreme point B itself.

    W = V diag(u) V' with V Haar-orthogonal and u ~ U[0,1]^d, so 0 <= W <= I.
    The extreme point is the first element.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = rng_from(seed)
    B = cls.bound_B
    d = B.shape[0]
    R = sqrt_psd(B)
    out = [B.copy()]
    for _ in range(count - 1):
        Z = rng.standard_normal((d, d))
        V, Rq = np.linalg.qr(Z)
        V = V * np.sign(np.diag(Rq))
        W = (V * rng.random(d)) @ V.T
        out.append(symmetrize(R @ W @ R))
    return out


def risk_at(r0: R0Coeffs, M, beta) -> float:
    """E[(Y - beta'X)^2] in an environment with perturbation second moment M."""
    beta = np.asarray(beta, dtype=float)
    return r0(beta) + float(beta @ M @ beta)


def worst_case_risk(cls: PerturbationClass, r0: R0Coeffs, beta, mc_count=16, seed=0):
    """Max of risk over sampled feasible increments (extreme point included).

    Returns (sup_value, attaining_A, sampled_values).
    """
    As = sample_feasible_A(cls, mc_count, seed)
    vals = np.array([risk_at(r0, cls.base_M + A, beta) for A in As])
    i = int(np.argmax(vals))
    return float(vals[i]), As[i], vals


@dataclass(frozen=True, eq=False)
class PopulationProblem:
    """Training-side quantities computed from the law of (X, Y) only."""

    second_moment_x: NDArray  # E^tr[XX']
    cross_moment: NDArray  # E^tr[XY]
    var_y: float
    H: NDArray  # unscaled H_MIR or H_VIR from the moments of X

    def training_risk(self, beta) -> float:
        beta = np.asarray(beta, dtype=float)
        return float(self.var_y - 2 * beta @ self.cross_moment + beta @ self.second_moment_x @ beta)

    def regularized_objective(self, beta, gamma) -> float:
        beta = np.asarray(beta, dtype=float)
        return self.training_risk(beta) + gamma * float(beta @ self.H @ beta)

    def minimizer(self, gamma) -> NDArray:
        system = SecondMomentSystem(self.second_moment_x, self.cross_moment, "balanced")
        return solve_regularized(system, self.H, gamma)


def population_problem(scm: LinearScmSpec, training_perts, labeled_idx, kind) -> PopulationProblem:
    kind = _kind(kind)
    idx = _labeled(training_perts, labeled_idx)
    moms = [population_moments(scm, pt) for pt in training_perts]
    S = np.mean([moms[i].second_moment_x for i in idx], axis=0)
    c = np.mean([moms[i].cov_xy for i in idx], axis=0)
    summ = summaries_from_moments([m.mean_x for m in moms], [m.cov_x for m in moms])
    H = (h_mir if kind == "MIR" else h_vir)(summ).H
    return PopulationProblem(symmetrize(S), c, moms[0].r0.var_y, H)


def duality_gap(cls: PerturbationClass, r0: R0Coeffs, training_risk: Callable, beta, H=None, gamma=None,
                mc_count=4, seed=0):
    """|worst-case risk - (training risk + gamma beta'H beta)|.

    ``H`` defaults to ``bound_B / gamma`` (the perturbation-side matrix);
    pass the X-moment regularizer to compare the two routes.
    Returns (gap, sup_value).
    """
    beta = np.asarray(beta, dtype=float)
    gamma = cls.gamma if gamma is None else gamma
    sup_value, _, _ = worst_case_risk(cls, r0, beta, mc_count, seed)
    if H is None:
        pen = float(beta @ cls.bound_B @ beta)
    else:
        pen = gamma * float(beta @ np.asarray(H) @ beta)
    return abs(sup_value - (training_risk(beta) + pen)), sup_value


def worst_case_minimizer(cls: PerturbationClass, r0: R0Coeffs, tol=1e-10, max_iter=500_000) -> NDArray:
    """Minimize the worst-case risk numerically (steepest descent, exact line search).

    The worst case is attained at the extreme point for every beta, so the
    objective is the convex quadratic R_0(beta) + beta'(M_bar + B)beta.
    """
    Q = symmetrize(r0.cov_z + cls.base_M + cls.bound_B)
    beta = np.zeros(Q.shape[0])
    for _ in range(max_iter):
        g = r0.grad(beta) + 2.0 * (cls.base_M + cls.bound_B) @ beta
        gg = g @ g
        if np.sqrt(gg) <= tol:
            return beta
        beta = beta - gg / (2.0 * g @ Q @ g) * g
    raise RuntimeError("worst-case minimizer did not converge")


# ---------------------------------------------------------------------------
# random instances for the duality suites


@dataclass(frozen=True, eq=False)
class RandomInstance:
    scm: LinearScmSpec
    perts: list
    labeled_idx: tuple


def random_psd(rng, d, scale=1.0, floor=0.0) -> NDArray:
    L = rng.standard_normal((d, d)) * scale / np.sqrt(d)
    return symmetrize(L @ L.T + floor * np.eye(d))


def random_instance(seed, max_d=4, max_p=6, min_p=2) -> RandomInstance:
    rng = rng_from(seed)
    d = int(rng.integers(1, max_d + 1))
    q = int(rng.integers(0, 3))
    p = int(rng.integers(min_p, max_p + 1))
    scm = LinearScmSpec(
        w=rng.standard_normal(q), b=rng.standard_normal(d), C=rng.standard_normal((d, q)),
        var_eps_y=float(rng.uniform(0.5, 2.0)), cov_eps_x=random_psd(rng, d, 1.0, 0.2),
    )
    perts = [PerturbationSpec(rng.standard_normal(d), random_psd(rng, d, 1.0)) for _ in range(p)]
    n_lab = int(rng.integers(1, p + 1))
    labeled = tuple(sorted(rng.choice(p, size=n_lab, replace=False).tolist()))
    return RandomInstance(scm, perts, labeled)


@dataclass
class DualityReport:
    kind: str
    instances: int = 0
    checks: int = 0
    max_gap: float = 0.0
    max_rel_gap: float = 0.0
    max_sample_excess: float = -np.inf
    max_minimizer_distance: float = 0.0
    records: list = field(default_factory=list)

    def passed(self, gap_tol=1e-10, minimizer_tol=1e-4) -> bool:
        return (self.max_rel_gap <= gap_tol and self.max_minimizer_distance <= minimizer_tol
                and self.max_sample_excess <= 1e-9)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "instances": self.instances, "checks": self.checks,
            "max_gap": self.max_gap, "max_rel_gap": self.max_rel_gap,
            "max_sample_excess": float(self.max_sample_excess),
            "max_minimizer_distance": self.max_minimizer_distance, "records": self.records,
        }


def run_duality_suite(kind, instances=50, betas=200, gammas=(0.1, 1.0, 10.0), seed=0, max_d=4, max_p=6,
                      mc_count=4) -> DualityReport:
    """Check pointwise duality and coincidence of minimizers on random instances."""
    kind = _kind(kind)
    report = DualityReport(kind)
    root = np.random.SeedSequence(seed)
    for inst_seed in root.spawn(instances):
        inst_rng = np.random.default_rng(inst_seed)
        inst = random_instance(inst_rng, max_d, max_p)
        prob = population_problem(inst.scm, inst.perts, inst.labeled_idx, kind)
        r0 = r0_coeffs(inst.scm)
        rec = {"d": inst.scm.d, "p": len(inst.perts), "labeled": list(inst.labeled_idx), "gammas": []}
        for gamma in gammas:
            cls = build_class(inst.scm, inst.perts, inst.labeled_idx, gamma, kind)
            B = inst_rng.standard_normal((betas, inst.scm.d)) * inst_rng.uniform(0.1, 3.0)
            gaps = []
            for beta in B:
                sup_value, _, vals = worst_case_risk(cls, r0, beta, mc_count, inst_rng)
                gap = abs(sup_value - prob.regularized_objective(beta, gamma))
                gaps.append(gap)
                report.max_rel_gap = max(report.max_rel_gap, gap / (1.0 + abs(sup_value)))
                report.max_sample_excess = max(report.max_sample_excess, float(np.max(vals[1:] - vals[0]))
                                               if len(vals) > 1 else report.max_sample_excess)
            report.max_gap = max(report.max_gap, max(gaps))
            report.checks += betas
            b_reg = prob.minimizer(gamma)
            b_wc = worst_case_minimizer(cls, r0)
            dist = float(np.linalg.norm(b_reg - b_wc))
            report.max_minimizer_distance = max(report.max_minimizer_distance, dist)
            rec["gammas"].append({"gamma": gamma, "max_gap": max(gaps), "minimizer_distance": dist})
        report.records.append(rec)
        report.instances += 1
    return report
