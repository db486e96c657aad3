"""Closed-form invariance-regularized regression and baseline estimators.

Every squared-loss fitter minimizes

    sum_r w_r (y_r - beta'x_r)^2 + gamma * beta' H beta

where the row weights w_r are 1/k ("pooled") or 1/(|L| k_e) ("balanced").
By default features and outcomes are centered with the same weighted means
before solving and the offsets are kept on the model, which stands in for an
unpenalized intercept.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.special
from numpy.typing import NDArray

from ._linalg import symmetrize
from .data import LabeledView, UnlabeledView
from .exceptions import ConvergenceError, DataError, NumericalError, SingularSystemError
from .moments import RegularizerMatrix, env_moment_summaries, h_combined, h_mir, h_vir


WEIGHTINGS = ("pooled", "balanced")
METHODS = ("MIR", "VIR", "MIR_VIR", "OLS", "RIDGE", "ANCHOR", "GROUP_DRO", "GENERAL_LOSS")
LOSSES = ("squared", "logistic", "huber")
SINGULAR_RTOL = 1e-10


class ConvergenceWarning(UserWarning):
    pass


@dataclass(eq=False)
class FittedModel:
    beta: NDArray
    x_offset: NDArray
    y_offset: float
    method: str
    gamma: dict = field(default_factory=dict)
    labeled_envs: tuple = ()
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.x_offset = np.asarray(self.x_offset, dtype=float)
        self.y_offset = float(self.y_offset)
        if not np.all(np.isfinite(self.beta)):
            raise NumericalError(f"{self.method}: non-finite coefficients")

    @property
    def d(self) -> int:
        return self.beta.shape[0]

    def predict(self, X) -> NDArray:
        return predict(self, X)

    def to_dict(self) -> dict:
        info = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.info.items()}
        return {
            "method": self.method,
            "gamma": self.gamma,
            "beta": self.beta.tolist(),
            "x_offset": self.x_offset.tolist(),
            "y_offset": self.y_offset,
            "labeled_envs": list(self.labeled_envs),
            "info": info,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedModel":
        try:
            return cls(
                beta=doc["beta"], x_offset=doc["x_offset"], y_offset=doc["y_offset"],
                method=doc["method"], gamma=doc.get("gamma", {}),
                labeled_envs=tuple(doc.get("labeled_envs", ())), info=doc.get("info", {}),
            )
        except KeyError as exc:
            raise DataError(f"model document lacks field {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FittedModel":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read model {path}: {exc}") from exc
        return cls.from_dict(doc)


def predict(model: FittedModel, X) -> NDArray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.d:
        raise DataError(f"model expects {model.d} columns, got {X.shape[1]}")
    return (X - model.x_offset) @ model.beta + model.y_offset


@dataclass(frozen=True, eq=False)
class SecondMomentSystem:
    """Weighted averages A ~ E[XX'] and b ~ E[XY] of the labeled data."""

    A: NDArray
    b: NDArray
    weighting: str


def _check_weighting(weighting: str) -> str:
    w = str(weighting).lower()
    if w == "env_balanced":
        w = "balanced"
    if w not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    return w


def row_weights(view: LabeledView, weighting="pooled") -> NDArray:
    """Per-row weights summing to one."""
    weighting = _check_weighting(weighting)
    k = view.k
    if k == 0:
        raise DataError("labeled view is empty")
    if weighting == "pooled":
        return np.full(k, 1.0 / k)
    w = np.empty(k)
    groups = {e: g for e, g in view.groups().items() if len(g)}
    for g in groups.values():
        w[g] = 1.0 / (len(groups) * len(g))
    return w


def weighted_offsets(view: LabeledView, weighting="pooled") -> tuple[NDArray, float]:
    w = row_weights(view, weighting)
    return w @ view.X, float(w @ view.Y)


def build_system(view: LabeledView, weighting="pooled", x_offset=None, y_offset=None) -> SecondMomentSystem:
    weighting = _check_weighting(weighting)
    X, Y = view.X, view.Y
    if len(X) == 0:
        raise DataError("labeled view is empty")
    if not np.all(np.isfinite(Y)):
        raise DataError("labeled view contains missing outcomes")
    if x_offset is not None:
        X = X - x_offset
    if y_offset is not None:
        Y = Y - y_offset
    w = row_weights(view, weighting)
    Xw = X * w[:, None]
    return SecondMomentSystem(symmetrize(Xw.T @ X), Xw.T @ Y, weighting)


def _as_matrix(H, d) -> NDArray:
    if isinstance(H, RegularizerMatrix):
        H = H.H
    if H is None:
        return np.zeros((d, d))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape != (d, d):
        raise ValueError(f"regularizer has shape {H.shape}, expected {(d, d)}")
    return H


def solve_regularized(system: SecondMomentSystem, H, gamma: float, jitter: float = 0.0) -> NDArray:
    """Minimizer of beta'(A + gamma H)beta - 2 b'beta via Cholesky.

    ``jitter`` adds ``jitter * trace(A)/d * I`` before factorizing.
    """
    if not gamma >= 0 or not math.isfinite(gamma):
        raise ValueError(f"gamma must be finite and >= 0, got {gamma}")
    A, b = system.A, system.b
    d = A.shape[0]
    M = symmetrize(A + gamma * _as_matrix(H, d))
    if jitter:
        M = M + jitter * np.trace(A) / d * np.eye(d)
    ev = np.linalg.eigvalsh(M)
    top = max(abs(ev[-1]), abs(ev[0]))
    if top == 0 or ev[0] <= SINGULAR_RTOL * top:
        cond = math.inf if ev[0] <= 0 else top / ev[0]
        raise SingularSystemError(
            f"A + gamma*H is singular or indefinite (eigenvalues in [{ev[0]:.3e}, {ev[-1]:.3e}], "
            f"condition ~ {cond:.3e}); consider a jitter",
            condition=cond,
        )
    try:
        cf = scipy.linalg.cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"Cholesky factorization failed: {exc}") from exc
    beta = scipy.linalg.cho_solve(cf, b)
    tol = max(1e-8 * np.linalg.norm(b), 1e-12)
    r = b - M @ beta
    if np.linalg.norm(r) > tol:
        beta = beta + scipy.linalg.cho_solve(cf, r)
        r = b - M @ beta
        if np.linalg.norm(r) > tol:
            raise NumericalError(f"residual {np.linalg.norm(r):.3e} exceeds {tol:.3e}")
    return beta


def _centering(labeled: LabeledView, weighting, center):
    if center:
        return weighted_offsets(labeled, weighting)
    return np.zeros(labeled.d), 0.0


def fit_with_regularizer(labeled: LabeledView, H, gamma: float, weighting="pooled", *, method="CUSTOM",
                         center=True, jitter=0.0, gamma_record=None, info=None) -> FittedModel:
    """Solve the regularized normal equations for a given penalty matrix."""
    weighting = _check_weighting(weighting)
    xo, yo = _centering(labeled, weighting, center)
    system = build_system(labeled, weighting, xo, yo)
    beta = solve_regularized(system, H, gamma, jitter)
    return FittedModel(beta, xo, yo, method, gamma_record or {"gamma": float(gamma)},
                       labeled.envs, {"weighting": weighting, "centered": bool(center), **(info or {})})


def _check_unlabeled(labeled: LabeledView, unlabeled: UnlabeledView):
    if unlabeled.d != labeled.d:
        raise DataError(f"labeled d={labeled.d} but unlabeled d={unlabeled.d}")


def fit_mir(labeled, unlabeled, gamma, weighting="pooled", *, center=True, jitter=0.0,
            summaries=None) -> FittedModel:
    # a common shift of all rows leaves H unchanged, so the raw unlabeled data are used
    _check_unlabeled(labeled, unlabeled)
    H = h_mir(summaries or env_moment_summaries(unlabeled))
    return fit_with_regularizer(labeled, H, gamma, weighting, method="MIR", center=center, jitter=jitter)


def fit_vir(labeled, unlabeled, gamma, weighting="pooled", *, center=True, jitter=0.0,
            summaries=None) -> FittedModel:
    _check_unlabeled(labeled, unlabeled)
    H = h_vir(summaries or env_moment_summaries(unlabeled))
    return fit_with_regularizer(labeled, H, gamma, weighting, method="VIR", center=center, jitter=jitter)


def fit_mir_vir(labeled, unlabeled, gamma1, gamma2, weighting="pooled", *, center=True, jitter=0.0,
                summaries=None) -> FittedModel:
    _check_unlabeled(labeled, unlabeled)
    H = h_combined(summaries or env_moment_summaries(unlabeled), gamma1, gamma2)
    return fit_with_regularizer(labeled, H, 1.0, weighting, method="MIR_VIR", center=center, jitter=jitter,
                                gamma_record={"gamma_mir": float(gamma1), "gamma_vir": float(gamma2)})


def fit_ols(labeled, weighting="pooled", *, center=True, jitter=0.0) -> FittedModel:
    return fit_with_regularizer(labeled, None, 0.0, weighting, method="OLS", center=center, jitter=jitter,
                                gamma_record={})


def fit_pooled_ridge(labeled, alpha, *, center=True, jitter=0.0) -> FittedModel:
    return fit_with_regularizer(labeled, np.eye(labeled.d), alpha, "pooled", method="RIDGE", center=center,
                                jitter=jitter, gamma_record={"alpha": float(alpha)})


def fit_anchor(labeled: LabeledView, gamma, *, jitter=0.0) -> FittedModel:
    """Anchor regression with environment indicators as anchors.

    Data are centered by their pooled means, then transformed by
    (I - P) + sqrt(gamma) P with P the projection onto the indicator span,
    followed by OLS.
    """
    if not gamma >= 0:
        raise ValueError("gamma must be >= 0")
    xo, yo = weighted_offsets(labeled, "pooled")
    X = labeled.X - xo
    Y = labeled.Y - yo
    groups = [g for g in labeled.groups().values() if len(g)]
    if len(groups) < 2:
        warnings.warn("anchor regression needs >= 2 labeled environments; falling back to OLS", stacklevel=2)
    else:
        s = math.sqrt(gamma) - 1.0
        PX = np.zeros_like(X)
        PY = np.zeros_like(Y)
        for g in groups:
            PX[g] = X[g].mean(axis=0)
            PY[g] = Y[g].mean()
        X = X + s * PX
        Y = Y + s * PY
    k = len(Y)
    system = SecondMomentSystem(symmetrize(X.T @ X / k), X.T @ Y / k, "pooled")
    beta = solve_regularized(system, None, 0.0, jitter)
    return FittedModel(beta, xo, yo, "ANCHOR", {"gamma": float(gamma)}, labeled.envs, {"weighting": "pooled"})


def fit_group_dro(labeled: LabeledView, eta, iters=500, weighting="pooled", *, jitter=0.0,
                  track_weights=False) -> FittedModel:
    """GroupDRO over labeled environments with exact inner least squares.

    Each round solves the q-weighted least-squares problem in closed form,
    then updates q_e <- q_e exp(eta * MSE_e) on the simplex (in log space).
    Initial weights follow ``weighting``; the returned coefficients are the
    uniform average of the per-round solutions.
    """
    if not eta > 0:
        raise ValueError("eta must be > 0")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    weighting = _check_weighting(weighting)
    xo, yo = weighted_offsets(labeled, weighting)
    X = labeled.X - xo
    Y = labeled.Y - yo
    groups = [g for g in labeled.groups().values() if len(g)]
    A_g = np.stack([symmetrize(X[g].T @ X[g] / len(g)) for g in groups])
    b_g = np.stack([X[g].T @ Y[g] / len(g) for g in groups])
    yy_g = np.array([Y[g] @ Y[g] / len(g) for g in groups])
    if weighting == "pooled":
        q = np.array([len(g) for g in groups], dtype=float) / len(Y)
    else:
        q = np.full(len(groups), 1.0 / len(groups))
    logq = np.log(q)
    beta_sum = np.zeros(X.shape[1])
    history = [q.copy()] if track_weights else None
    for _ in range(iters):
        system = SecondMomentSystem(np.einsum("g,gij->ij", q, A_g), q @ b_g, weighting)
        beta = solve_regularized(system, None, 0.0, jitter)
        beta_sum += beta
        losses = yy_g - 2 * b_g @ beta + np.einsum("i,gij,j->g", beta, A_g, beta)
        if not np.all(np.isfinite(losses)):
            raise NumericalError("non-finite group loss in GroupDRO")
        logq = logq + eta * losses
        logq -= logq.max()
        q = np.exp(logq)
        q /= q.sum()
        if track_weights:
            history.append(q.copy())
    info = {"weighting": weighting, "iters": int(iters), "group_weights": q,
            "groups": [e for e, g in labeled.groups().items() if len(g)]}
    if track_weights:
        info["weights_history"] = np.array(history)
    return FittedModel(beta_sum / iters, xo, yo, "GROUP_DRO", {"eta": float(eta)}, labeled.envs, info)


# ---------------------------------------------------------------------------
# general convex losses


def _loss_terms(loss: str, f: NDArray, y: NDArray, delta: float):
    """Per-row loss values and derivatives with respect to the prediction f."""
    if loss == "squared":
        r = f - y
        return r**2, 2.0 * r
    if loss == "logistic":
        return np.logaddexp(0.0, f) - y * f, scipy.special.expit(f) - y
    if loss == "huber":
        r = f - y
        a = np.abs(r)
        val = np.where(a <= delta, 0.5 * r**2, delta * (a - 0.5 * delta))
        return val, np.clip(r, -delta, delta)
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def regularized_objective(theta, X, y, w, H, gamma, loss="squared", delta=1.0):
    """Value and gradient of sum_r w_r loss(theta'x_r, y_r) + gamma beta'H beta.

    ``H`` acts on the first ``H.shape[0]`` coordinates of ``theta``; any
    remaining coordinates (an intercept) are unpenalized.
    """
    f = X @ theta
    val, dl = _loss_terms(loss, f, y, delta)
    m = H.shape[0]
    Hb = H @ theta[:m]
    obj = float(w @ val + gamma * theta[:m] @ Hb)
    g = X.T @ (w * dl)
    g[:m] += 2.0 * gamma * Hb
    return obj, g


def gradient_descent(fun: Callable, x0, step=1.0, iters=20000, tol=1e-10):
    """Gradient descent with Armijo backtracking.

    Each trial step starts from the Barzilai-Borwein estimate (``step`` on
    the first iteration). Stops when ||grad|| <= tol * (1 + |f|). Returns
    (x, f, grad, n_iter, converged).
    """
    x = np.asarray(x0, dtype=float).copy()
    fx, g = fun(x)
    t = float(step)
    x_prev = g_prev = None
    for it in range(iters):
        gn = np.linalg.norm(g)
        if gn <= tol * (1.0 + abs(fx)):
            return x, fx, g, it, True
        if x_prev is not None:
            s, yv = x - x_prev, g - g_prev
            sy = s @ yv
            if sy > 0:
                t = (s @ s) / sy
        # slack of a few ulps so that steps near the optimum are not rejected on roundoff
        slack = 8 * np.finfo(float).eps * (1.0 + abs(fx))
        while True:
            x_new = x - t * g
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= fx - 1e-4 * t * gn**2 + slack:
                break
            t *= 0.5
            if t < 1e-300:
                return x, fx, g, it, False
        x_prev, g_prev = x, g
        x, fx, g = x_new, f_new, g_new
    return x, fx, g, iters, np.linalg.norm(g) <= tol * (1.0 + abs(fx))


def fit_general_loss(labeled: LabeledView, H, gamma, loss="squared", *, huber_delta=1.0, step=1.0,
                     iters=20000, tol=1e-10, weighting="pooled", center=True, strict=False) -> FittedModel:
    """Minimize the weighted average loss plus gamma * beta'H beta by gradient descent.

    With ``center`` the features are centered and an unpenalized intercept is
    fitted; it is stored as the model's ``y_offset``. For the logistic loss
    predictions are logits and outcomes must be 0/1. On non-convergence the
    final iterate is returned with ``info["converged"] = False`` (or
    ConvergenceError is raised if ``strict``).
    """
    loss = str(loss).lower()
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    if not gamma >= 0:
        raise ValueError("gamma must be >= 0")
    Y = labeled.Y
    if loss == "logistic" and not np.all(np.isin(Y, (0.0, 1.0))):
        raise DataError("logistic loss requires outcomes in {0, 1}")
    w = row_weights(labeled, weighting)
    d = labeled.d
    Hm = _as_matrix(H, d)
    xo = w @ labeled.X if center else np.zeros(d)
    Xc = labeled.X - xo
    if center:
        Xc = np.hstack([Xc, np.ones((len(Xc), 1))])
    fun = lambda th: regularized_objective(th, Xc, Y, w, Hm, gamma, loss, huber_delta)  # noqa: E731
    theta, fval, g, n_it, ok = gradient_descent(fun, np.zeros(Xc.shape[1]), step, iters, tol)
    if not ok:
        msg = f"{loss} loss: gradient norm {np.linalg.norm(g):.3e} after {n_it} iterations"
        if strict:
            raise ConvergenceError(msg)
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)
    beta, intercept = (theta[:d], theta[d]) if center else (theta, 0.0)
    info = {"loss": loss, "converged": bool(ok), "iterations": int(n_it), "objective": fval,
            "grad_norm": float(np.linalg.norm(g)), "weighting": _check_weighting(weighting)}
    if loss == "huber":
        info["huber_delta"] = float(huber_delta)
    return FittedModel(beta, xo, intercept, "GENERAL_LOSS", {"gamma": float(gamma)}, labeled.envs, info)


def training_mse(model: FittedModel, labeled: LabeledView) -> float:
    r = labeled.Y - predict(model, labeled.X)
    return float(np.mean(r**2))


def fit_method(method: str, labeled: LabeledView, unlabeled: UnlabeledView | None, hp=None,
               weighting="pooled", **opts) -> FittedModel:
    """Dispatch on a method tag with a single hyperparameter value ``hp``.

    MIR/VIR/ANCHOR take gamma, RIDGE alpha, GROUP_DRO eta, MIR_VIR a pair
    (gamma_mir, gamma_vir); OLS ignores ``hp``.
    """
    m = str(method).upper()
    jitter = opts.get("jitter", 0.0)
    center = opts.get("center", True)
    summ = opts.get("summaries")
    if m == "MIR":
        return fit_mir(labeled, unlabeled, float(hp), weighting, center=center, jitter=jitter, summaries=summ)
    if m == "VIR":
        return fit_vir(labeled, unlabeled, float(hp), weighting, center=center, jitter=jitter, summaries=summ)
    if m == "MIR_VIR":
        g1, g2 = hp
        return fit_mir_vir(labeled, unlabeled, float(g1), float(g2), weighting, center=center, jitter=jitter,
                           summaries=summ)
    if m == "OLS":
        return fit_ols(labeled, weighting, center=center, jitter=jitter)
    if m == "RIDGE":
        return fit_pooled_ridge(labeled, float(hp), center=center, jitter=jitter)
    if m == "ANCHOR":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fit_anchor(labeled, float(hp), jitter=jitter)
    if m == "GROUP_DRO":
        return fit_group_dro(labeled, float(hp), opts.get("iters", 500), weighting, jitter=jitter)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS[:-1]}")
