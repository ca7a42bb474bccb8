"""The five confounding-control analyses of a marginal odds ratio.

Four use an estimated propensity score (as a covariate, for nearest
neighbour matching with replacement, for caliper matching without
replacement, and for inverse probability weighting); the fifth is
multiple logistic regression followed by regression standardisation.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from psconfound.dgp import SimulatedDataset
from psconfound.solvers import CovType, WeightedLogisticFit, WeightKind, fit_logistic

CALIPER = 1e-2


class Method(str, enum.Enum):
    PS_COVARIATE = "ps_covariate"
    NN_MATCH = "nn_match"
    CALIPER_MATCH = "caliper_match"
    IPTW = "iptw"
    REGRESSION_STANDARDISED = "regression_standardised"

    @property
    def label(self) -> str:
        return METHOD_LABELS[self]

    @property
    def uses_ps(self) -> bool:
        return self is not Method.REGRESSION_STANDARDISED


# fixed reporting order
METHODS = tuple(Method)

METHOD_LABELS = {
    Method.PS_COVARIATE: "PS covariate",
    Method.NN_MATCH: "Nearest neighbour match",
    Method.CALIPER_MATCH: "Caliper match",
    Method.IPTW: "IPTW",
    Method.REGRESSION_STANDARDISED: "Logistic regression",
}


@dataclass
class PropensityScores:
    ps: Optional[np.ndarray]
    source_fit: WeightedLogisticFit

    @property
    def converged(self) -> bool:
        return self.source_fit.converged


@dataclass
class MatchResult:
    kind: str
    weights: np.ndarray
    n_exposed_matched: int
    pairs: np.ndarray  # (n_pairs, 2) rows of (exposed index, control index)


@dataclass(frozen=True)
class MethodEstimate:
    method: Method
    log_or: float
    se: float
    converged: bool
    reason: str = ""

    @classmethod
    def failed(cls, method: Method, reason: str) -> "MethodEstimate":
        return cls(Method(method), np.nan, np.nan, False, reason)


def _design(*columns) -> np.ndarray:
    n = len(columns[0])
    return np.column_stack([np.ones(n)] + [np.asarray(c, dtype=float) for c in columns])


def estimate_ps(data: SimulatedDataset, separation_rule: str = "standardised") -> PropensityScores:
    """Propensity score from a logistic regression of E on X1..X5."""
    fit = fit_logistic(np.column_stack([np.ones(data.n), data.covariates()]), data.e,
                       separation_rule=separation_rule)
    return PropensityScores(ps=fit.fitted if fit.converged else None, source_fit=fit)


def nn_match_with_replacement(ps: np.ndarray, e: np.ndarray) -> MatchResult:
    """One-to-one nearest neighbour matching on the PS, with replacement.

    Each exposed row takes the control with the smallest absolute PS
    difference; equal distances go to the lowest control index. The
    returned weights count how often each row appears in the matched set.
    """
    ps = np.asarray(ps, dtype=float)
    e = np.asarray(e)
    exposed = np.flatnonzero(e == 1)
    controls = np.flatnonzero(e == 0)
    weights = np.zeros(len(ps), dtype=np.int64)
    if len(exposed) == 0 or len(controls) == 0:
        return MatchResult("nn_with_replacement", weights, 0, np.empty((0, 2), dtype=np.int64))

    order = np.argsort(ps[controls], kind="stable")
    sorted_idx = controls[order]
    sorted_ps = ps[sorted_idx]
    m = len(sorted_ps)
    x = ps[exposed]

    pos = np.searchsorted(sorted_ps, x, side="left")
    right = np.minimum(pos, m - 1)
    left = np.maximum(pos - 1, 0)
    # first member of the left candidate's equal-value block has the lowest index
    left = np.searchsorted(sorted_ps, sorted_ps[left], side="left")
    d_right = np.abs(sorted_ps[right] - x)
    d_left = np.abs(x - sorted_ps[left])
    left_idx, right_idx = sorted_idx[left], sorted_idx[right]
    take_left = (d_left < d_right) | ((d_left == d_right) & (left_idx < right_idx))
    matched = np.where(take_left, left_idx, right_idx)

    weights[exposed] = 1
    np.add.at(weights, matched, 1)
    pairs = np.column_stack([exposed, matched]).astype(np.int64)
    return MatchResult("nn_with_replacement", weights, len(exposed), pairs)


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def caliper_match(
    ps: np.ndarray,
    e: np.ndarray,
    caliper: float = CALIPER,
    rng: Optional[np.random.Generator] = None,
) -> MatchResult:
    """Greedy one-to-one caliper matching without replacement.

    Exposed rows are visited in a random order drawn from ``rng`` (index
    order when ``rng`` is None). Each takes the nearest still-unmatched
    control with ``|PS difference| < caliper``, lowest control index on
    ties, or is dropped when none qualifies.
    """
    ps = np.asarray(ps, dtype=float)
    e = np.asarray(e)
    exposed = np.flatnonzero(e == 1)
    controls = np.flatnonzero(e == 0)
    weights = np.zeros(len(ps), dtype=np.int64)
    if len(exposed) == 0 or len(controls) == 0:
        return MatchResult("caliper_without_replacement", weights, 0, np.empty((0, 2), dtype=np.int64))

    if rng is not None:
        exposed = exposed[rng.permutation(len(exposed))]
    order = np.argsort(ps[controls], kind="stable")
    sorted_idx = controls[order].tolist()
    sorted_ps_arr = ps[controls][order]
    sorted_ps = sorted_ps_arr.tolist()
    m = len(sorted_ps)
    # next_up[i]: smallest free position >= i (m = none); next_down[i + 1]: largest free position <= i
    next_up = list(range(m + 1))
    next_down = list(range(m + 1))
    starts = np.searchsorted(sorted_ps_arr, ps[exposed], side="left").tolist()

    pairs = []
    for ex, pos in zip(exposed.tolist(), starts):
        x = ps[ex]
        best = None
        r = _find(next_up, pos)
        if r < m:
            best = r
        lpos = _find(next_down, pos) - 1  # free position < pos
        if lpos >= 0:
            block = bisect.bisect_left(sorted_ps, sorted_ps[lpos])
            lpos = _find(next_up, block)
            if best is None:
                best = lpos
            else:
                dl, dr = x - sorted_ps[lpos], sorted_ps[best] - x
                if dl < dr or (dl == dr and sorted_idx[lpos] < sorted_idx[best]):
                    best = lpos
        if best is None or not abs(sorted_ps[best] - x) < caliper:
            continue
        pairs.append((ex, sorted_idx[best]))
        next_up[best] = best + 1
        next_down[best + 1] = best

    pairs_arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    weights[pairs_arr[:, 0]] = 1
    weights[pairs_arr[:, 1]] = 1
    return MatchResult("caliper_without_replacement", weights, len(pairs), pairs_arr)


def iptw_weights(ps: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Unstabilised, untruncated inverse probability of treatment weights."""
    ps = np.asarray(ps, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(np.asarray(e) == 1, 1.0 / ps, 1.0 / (1.0 - ps))


def _from_fit(method: Method, fit: WeightedLogisticFit, column: int = 1) -> MethodEstimate:
    if not fit.converged:
        return MethodEstimate.failed(method, f"outcome fit: {fit.status}")
    if column in fit.dropped:
        return MethodEstimate.failed(method, "exposure column collinear")
    log_or, se = float(fit.coef[column]), float(np.sqrt(fit.cov[column, column]))
    if not (np.isfinite(log_or) and np.isfinite(se) and se > 0):
        return MethodEstimate.failed(method, "non-finite estimate")
    return MethodEstimate(method, log_or, se, True)


def standardised_log_or(beta: np.ndarray, design: np.ndarray, exposure_col: int = 1) -> float:
    """Marginal log-OR from averaging predicted risks with exposure set to 1 and 0."""
    x1 = design.copy()
    x1[:, exposure_col] = 1.0
    x0 = design.copy()
    x0[:, exposure_col] = 0.0
    p1 = special.expit(x1 @ beta).mean()
    p0 = special.expit(x0 @ beta).mean()
    return float(special.logit(p1) - special.logit(p0))


def standardised_log_or_gradient(beta: np.ndarray, design: np.ndarray, exposure_col: int = 1) -> np.ndarray:
    """Gradient of :func:`standardised_log_or` with respect to ``beta``."""
    grad = np.zeros(len(beta))
    for value, sign in ((1.0, 1.0), (0.0, -1.0)):
        xa = design.copy()
        xa[:, exposure_col] = value
        pa = special.expit(xa @ beta)
        pbar = pa.mean()
        grad += sign * (xa * (pa * (1.0 - pa))[:, None]).mean(axis=0) / (pbar * (1.0 - pbar))
    return grad


def regression_standardise(data: SimulatedDataset, separation_rule: str = "standardised") -> MethodEstimate:
    """Outcome regression on E and X1..X5, standardised to the sample.

    The standard error comes from the delta method applied to the model
    covariance of the outcome-model coefficients.
    """
    method = Method.REGRESSION_STANDARDISED
    design = np.column_stack([np.ones(data.n), data.e.astype(float), data.covariates()])
    fit = fit_logistic(design, data.y, separation_rule=separation_rule)
    if not fit.converged:
        return MethodEstimate.failed(method, f"outcome fit: {fit.status}")
    if 1 in fit.dropped:
        return MethodEstimate.failed(method, "exposure column collinear")
    log_or = standardised_log_or(fit.coef, design)
    grad = standardised_log_or_gradient(fit.coef, design)
    var = float(grad @ fit.cov @ grad)
    if not (np.isfinite(log_or) and var > 0):
        return MethodEstimate.failed(method, "non-finite estimate")
    return MethodEstimate(method, log_or, float(np.sqrt(var)), True)


def run_method(
    method: Method | str,
    data: SimulatedDataset,
    ps: Optional[PropensityScores] = None,
    *,
    caliper: float = CALIPER,
    caliper_rng: Optional[np.random.Generator] = None,
    matched_cov: CovType | str = CovType.MODEL,
    separation_rule: str = "standardised",
) -> MethodEstimate:
    """Run one analysis on a dataset with an outcome.

    ``matched_cov`` selects the covariance used after matching: the
    default model-based one, or a sandwich treating match counts as
    probability-style weights. ``separation_rule`` is passed to every
    logistic fit, including the PS model when ``ps`` is not supplied.
    """
    method = Method(method)
    if data.y is None:
        raise ValueError("dataset has no outcome")
    if method is Method.REGRESSION_STANDARDISED:
        return regression_standardise(data, separation_rule)

    if ps is None:
        ps = estimate_ps(data, separation_rule)
    if not ps.converged:
        return MethodEstimate.failed(method, f"ps fit: {ps.source_fit.status}")
    e = data.e

    if method is Method.PS_COVARIATE:
        fit = fit_logistic(_design(e, ps.ps), data.y, separation_rule=separation_rule)
        return _from_fit(method, fit)

    if method is Method.IPTW:
        weights = iptw_weights(ps.ps, e)
        if not np.all(np.isfinite(weights)):
            return MethodEstimate.failed(method, "infinite weight")
        fit = fit_logistic(_design(e), data.y, weights, WeightKind.PROBABILITY, separation_rule=separation_rule)
        return _from_fit(method, fit)

    if method is Method.NN_MATCH:
        match = nn_match_with_replacement(ps.ps, e)
        if match.n_exposed_matched == 0:
            return MethodEstimate.failed(method, "no matches")
        fit = fit_logistic(_design(e), data.y, match.weights, WeightKind.FREQUENCY, cov_type=matched_cov,
                           separation_rule=separation_rule)
        return _from_fit(method, fit)

    match = caliper_match(ps.ps, e, caliper=caliper, rng=caliper_rng)
    if match.n_exposed_matched == 0:
        return MethodEstimate.failed(method, "no matches")
    rows = np.flatnonzero(match.weights)
    fit = fit_logistic(_design(e[rows]), data.y[rows], cov_type=matched_cov, separation_rule=separation_rule)
    return _from_fit(method, fit)
