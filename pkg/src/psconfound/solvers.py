"""Weighted logistic maximum likelihood and the small SPD kernel behind it."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, special

MAX_ITER = 50
LOGLIK_RTOL = 1e-8
SCORE_ATOL = 1e-6
MAX_HALVINGS = 10
SEPARATION_COEF = 15.0
SEPARATION_PROB = 1e-12
COLLINEAR_RTOL = 1e-11
# "standardised" compares |coef| * sd(column) with SEPARATION_COEF (intercept exempt);
# "raw" compares |coef| itself
SEPARATION_RULES = ("standardised", "raw")


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised by :func:`cholesky_spd` when a pivot is not strictly positive."""

    def __init__(self, column: int, pivot: float):
        super().__init__(f"matrix is not positive definite (pivot {pivot:.3g} at column {column})")
        self.column = column
        self.pivot = pivot


class WeightKind(str, enum.Enum):
    UNWEIGHTED = "unweighted"
    FREQUENCY = "frequency"
    PROBABILITY = "probability"


class CovType(str, enum.Enum):
    MODEL = "model"  # inverse weighted information
    SANDWICH = "sandwich"  # A^-1 B A^-1


def cholesky_spd(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-12, atol=0.0):
        raise ValueError("matrix is not symmetric")
    k = a.shape[0]
    low = np.zeros_like(a)
    for j in range(k):
        pivot = a[j, j] - low[j, :j] @ low[j, :j]
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(j, pivot)
        low[j, j] = np.sqrt(pivot)
        low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    low = cholesky_spd(a)
    tmp = linalg.solve_triangular(low, b, lower=True)
    return linalg.solve_triangular(low.T, tmp, lower=False)


def inv_spd(a: np.ndarray) -> np.ndarray:
    inv = solve_spd(a, np.eye(a.shape[0]))
    return (inv + inv.T) / 2.0


def independent_columns(gram: np.ndarray, rtol: float = COLLINEAR_RTOL) -> list[int]:
    """Indices of a maximal linearly independent column subset, kept in order.

    Runs a Cholesky factorisation of the Gram matrix that skips any column
    whose residual pivot is below ``rtol`` times its own diagonal, i.e. a
    column (numerically) spanned by the columns already kept.
    """
    gram = np.asarray(gram, dtype=float)
    kept: list[int] = []
    low = np.zeros_like(gram)
    for j in range(gram.shape[0]):
        diag = gram[j, j]
        if not diag > 0.0:
            continue
        row = np.zeros(len(kept))
        for r, i in enumerate(kept):
            row[r] = (gram[j, i] - low[r, :r] @ row[:r]) / low[r, r]
        pivot = diag - row @ row
        if pivot <= rtol * diag:
            continue
        r = len(kept)
        low[r, :r] = row
        low[r, r] = np.sqrt(pivot)
        kept.append(j)
    return kept


def logistic_loglik(beta: np.ndarray, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    eta = x @ beta
    # y*eta - log(1 + exp(eta)), stable for large |eta|
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def logistic_score(beta: np.ndarray, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    return x.T @ (w * (y - special.expit(x @ beta)))


def logistic_information(beta: np.ndarray, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    p = special.expit(x @ beta)
    info = (x * (w * p * (1.0 - p))[:, None]).T @ x
    return (info + info.T) / 2.0


@dataclass
class WeightedLogisticFit:
    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    separation_flag: bool
    status: str = "converged"
    dropped: tuple[int, ...] = ()
    fitted: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def _failed(k: int, status: str, iterations: int = 0, separation: bool = False, loglik: float = np.nan,
            dropped: tuple[int, ...] = ()) -> WeightedLogisticFit:
    return WeightedLogisticFit(
        coef=np.full(k, np.nan),
        cov=np.full((k, k), np.nan),
        loglik=loglik,
        converged=False,
        iterations=iterations,
        separation_flag=separation,
        status=status,
        dropped=dropped,
    )


def _check_weights(weights: np.ndarray, kind: WeightKind) -> None:
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    if kind is WeightKind.FREQUENCY:
        if np.any(weights < 0) or np.any(weights != np.round(weights)):
            raise ValueError("frequency weights must be non-negative integers")
    elif kind is WeightKind.PROBABILITY:
        if np.any(weights <= 0):
            raise ValueError("probability weights must be positive")


def fit_logistic(
    design: np.ndarray,
    y: np.ndarray,
    weights: Optional[np.ndarray] = None,
    kind: WeightKind | str = WeightKind.UNWEIGHTED,
    cov_type: CovType | str | None = None,
    max_iter: int = MAX_ITER,
    separation_rule: str = "standardised",
) -> WeightedLogisticFit:
    """Fit a weighted logistic regression by damped Newton-Raphson.

    Args:
        design: ``n x k`` design matrix including the intercept column.
        y: binary outcome of length ``n``.
        weights: per-row weights; ignored (all ones) for ``unweighted``.
        kind: how the weights are interpreted.
        cov_type: ``"model"`` (inverse information) or ``"sandwich"``.
            Defaults to the sandwich for probability weights and the
            model-based covariance otherwise.
        max_iter: Newton iteration cap.
        separation_rule: ``"standardised"`` flags separation when a slope
            times its column's standard deviation exceeds 15 in magnitude;
            ``"raw"`` applies the bound to every coefficient unscaled.

    Returns:
        A :class:`WeightedLogisticFit`. Failures (separation, singular
        information, iteration cap) are reported through ``converged``,
        ``separation_flag`` and ``status``; nothing is raised for them.
        Columns that are linear combinations of earlier columns are
        dropped: their coefficient and covariance entries are zero and
        their indices are listed in ``dropped``.
    """
    x = np.asarray(design, dtype=float)
    if x.ndim != 2:
        raise ValueError("design must be two-dimensional")
    n, k = x.shape
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, expected ({n},)")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("y must be binary")
    kind = WeightKind(kind)
    if separation_rule not in SEPARATION_RULES:
        raise ValueError(f"separation_rule must be one of {SEPARATION_RULES}")
    if cov_type is None:
        cov_type = CovType.SANDWICH if kind is WeightKind.PROBABILITY else CovType.MODEL
    cov_type = CovType(cov_type)
    if kind is WeightKind.UNWEIGHTED or weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ValueError(f"weights have shape {w.shape}, expected ({n},)")
        _check_weights(w, kind)

    x_all = x
    keep_rows = w > 0
    if not keep_rows.all():
        x, y, w = x[keep_rows], y[keep_rows], w[keep_rows]
    if x.shape[0] < k:
        return _failed(k, "too_few_rows")

    cols = independent_columns(x.T @ (x * w[:, None]))
    dropped = tuple(j for j in range(k) if j not in cols)
    if not cols:
        return _failed(k, "singular", dropped=dropped)
    xk = x[:, cols]

    w_events = np.sum(w * y)
    if w_events == 0 or w_events == np.sum(w):
        return _failed(k, "separation", separation=True, dropped=dropped)

    coef_scale = _separation_scale(xk, w, separation_rule)
    beta = np.zeros(len(cols))
    ll = logistic_loglik(beta, xk, y, w)
    prev_ll = None
    converged = separation = False
    status = "max_iter"
    iterations = 0
    for iterations in range(1, max_iter + 1):
        score = logistic_score(beta, xk, y, w)
        if (
            prev_ll is not None
            and abs(ll - prev_ll) <= LOGLIK_RTOL * (abs(prev_ll) + LOGLIK_RTOL)
            and np.max(np.abs(score)) < SCORE_ATOL
        ):
            converged = True
            status = "converged"
            iterations -= 1
            break
        info = logistic_information(beta, xk, w)
        try:
            step = solve_spd(info, score)
        except np.linalg.LinAlgError:
            status = "singular"
            break
        t = 1.0
        candidate = beta + step
        cand_ll = logistic_loglik(candidate, xk, y, w)
        halvings = 0
        while not cand_ll >= ll and halvings < MAX_HALVINGS:
            t /= 2.0
            halvings += 1
            candidate = beta + t * step
            cand_ll = logistic_loglik(candidate, xk, y, w)
        beta, prev_ll, ll = candidate, ll, cand_ll
        if np.any(np.abs(beta) * coef_scale > SEPARATION_COEF) or not np.all(np.isfinite(beta)):
            separation = True
            status = "separation"
            break

    fitted = special.expit(xk @ beta)
    if converged and _class_perfectly_fitted(fitted, y):
        converged = False
        separation = True
        status = "separation"
    if not converged:
        fit = _failed(k, status, iterations, separation, ll, dropped)
        fit.coef[cols] = beta
        return fit

    info = logistic_information(beta, xk, w)
    try:
        bread = inv_spd(info)
    except np.linalg.LinAlgError:
        return _failed(k, "singular", iterations, False, ll, dropped)
    if cov_type is CovType.SANDWICH:
        scores = xk * (w * (y - fitted))[:, None]
        meat = scores.T @ scores
        cov_k = bread @ meat @ bread
        cov_k = (cov_k + cov_k.T) / 2.0
    else:
        cov_k = bread

    coef = np.zeros(k)
    coef[cols] = beta
    cov = np.zeros((k, k))
    cov[np.ix_(cols, cols)] = cov_k
    return WeightedLogisticFit(
        coef=coef,
        cov=cov,
        loglik=ll,
        converged=True,
        iterations=iterations,
        separation_flag=False,
        status="converged",
        dropped=dropped,
        fitted=special.expit(x_all[:, cols] @ beta),
    )


def _separation_scale(x: np.ndarray, w: np.ndarray, rule: str) -> np.ndarray:
    if rule == "raw":
        return np.ones(x.shape[1])
    mean = np.average(x, axis=0, weights=w)
    return np.sqrt(np.average((x - mean) ** 2, axis=0, weights=w))


def _class_perfectly_fitted(p: np.ndarray, y: np.ndarray) -> bool:
    ones = y == 1
    if np.all(p[ones] > 1.0 - SEPARATION_PROB):
        return True
    return bool(np.all(p[~ones] < SEPARATION_PROB))
