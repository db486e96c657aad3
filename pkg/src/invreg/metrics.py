"""Prediction metrics used by the evaluation harness."""
import numpy as np
from scipy.stats import rankdata


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions, {truth.shape[0]} outcomes")
    if pred.size < 1:
        raise ValueError("need at least one observation")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def rmse(pred, truth) -> float:
    return float(np.sqrt(mse(pred, truth)))


def nmse(pred, truth) -> float:
    """MSE divided by the (divisor-n) variance of ``truth``."""
    pred, truth = _pair(pred, truth)
    v = float(np.var(truth))
    if not v > 0:
        raise ValueError("nmse undefined: outcome variance is zero")
    return mse(pred, truth) / v


def cvar(scores, q: float) -> float:
    """Mean of the scores at or above their empirical q-quantile.

    The quantile interpolates linearly between order statistics; q = 0
    gives the plain mean.
    """
    s = np.asarray(scores, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("no scores")
    if not 0.0 <= q < 1.0:
        raise ValueError("q must lie in [0, 1)")
    if q == 0:
        return float(s.mean())
    thr = np.quantile(s, q, method="linear")
    return float(s[s >= thr].mean())


def spearman(pred, truth) -> float:
    """Pearson correlation of average-tie ranks; NaN if either input is constant."""
    pred, truth = _pair(pred, truth)
    a, b = rankdata(pred), rankdata(truth)
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    if den == 0:
        return float("nan")
    return float(np.clip(a @ b / den, -1.0, 1.0))


def moving_average(series, window: int):
    """Centered moving average; the window is truncated at both ends.

    For even windows the extra element is taken on the right.
    """
    x = np.asarray(series, dtype=float).ravel()
    window = int(window)
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1 or x.size == 0:
        return x.copy()
    left = (window - 1) // 2
    right = window - 1 - left
    n = x.size
    return np.array([x[max(i - left, 0):min(i + right + 1, n)].mean() for i in range(n)])
