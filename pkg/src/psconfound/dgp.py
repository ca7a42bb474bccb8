"""Synthetic observational datasets for the overlap/prevalence/size grid.

Each dataset is drawn from a latent multivariate normal
``(E*, X1*, X2, X3, X4, X5[, X6])``. ``E`` and ``X1`` are dichotomised,
then the exposed rows are shifted to impose the scenario's covariate
imbalance, and finally a binary outcome is generated from a logit or
complementary log-log model.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import integrate, optimize, special
from scipy.stats import norm

LINKS = ("logit", "cloglog")
GRID_SIZES = (100, 1000, 10000, 100000)
GRID_PREVALENCES = (0.5, 0.1, 0.05)

# scenario -> (mean shift of continuous covariates, Pr(X1=1 | E=1))
OVERLAP_PARAMS = {
    1: (0.5, 0.45),
    2: (1.0, 0.40),
    3: (1.5, 0.35),
    4: (2.0, 0.30),
    5: (3.0, 0.20),
}

LOW_CORRELATION = 0.1
EXPOSURE_X1_CORRELATION = 0.3
EXPOSURE_X2_PEARSON = 0.5
PSD_EIGEN_FLOOR = 1e-10

# purposes for independent substreams of one replicate
STREAM_DATA = 0
STREAM_CALIPER = 1


@dataclass(frozen=True)
class OverlapParams:
    delta: float
    p1_given_e1: float

    @classmethod
    def for_scenario(cls, scenario: int) -> "OverlapParams":
        try:
            delta, p1 = OVERLAP_PARAMS[scenario]
        except KeyError:
            raise ValueError(f"overlap scenario must be 1..5, got {scenario!r}") from None
        return cls(delta, p1)


@dataclass(frozen=True)
class ScenarioSpec:
    """One replicate of one grid cell."""

    n: int
    exposure_prevalence: float
    overlap_scenario: int
    link: str = "logit"
    unmeasured_confounder: bool = False
    replicate_index: int = 0
    base_seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if not 0.0 < self.exposure_prevalence < 1.0:
            raise ValueError(f"exposure prevalence must be in (0, 1), got {self.exposure_prevalence!r}")
        if self.overlap_scenario not in OVERLAP_PARAMS:
            raise ValueError(f"overlap scenario must be 1..5, got {self.overlap_scenario!r}")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}, got {self.link!r}")
        if self.replicate_index < 0:
            raise ValueError("replicate_index must be non-negative")

    @property
    def overlap(self) -> OverlapParams:
        return OverlapParams.for_scenario(self.overlap_scenario)

    def stream_key(self) -> tuple[int, ...]:
        """Cell identifier plus replicate index, used to key the RNG substream."""
        return (
            int(self.n),
            int(round(self.exposure_prevalence * 1_000_000)),
            int(self.overlap_scenario),
            LINKS.index(self.link),
            int(self.unmeasured_confounder),
            int(self.replicate_index),
        )

    def rng(self, purpose: int = STREAM_DATA) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.base_seed) % 2**64,
            spawn_key=self.stream_key() + (purpose,),
        )
        return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class OutcomeCoefficients:
    """Linear predictor of the outcome model, on the scale of the link."""

    intercept: float = -2.3
    e: float = float(np.log(2.0))
    x1: float = float(np.log(1.3))
    x2: float = float(np.log(1.5))
    x3: float = float(np.log(6.0))
    x4: float = float(np.log(3.0))
    x5: float = float(np.log(1.0))
    x6: float = float(np.log(2.0))


OUTCOME_COEFFICIENTS = OutcomeCoefficients()


@dataclass
class SimulatedDataset:
    """Columns of one simulated dataset.

    ``outcome_uniforms`` are the replicate's Bernoulli draws; ``y`` is
    ``uniforms < pi``, so the outcome can be regenerated from the same
    randomness after editing covariates.
    """

    e: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray
    x5: np.ndarray
    x6: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    true_log_mor: Optional[float] = None
    outcome_uniforms: Optional[np.ndarray] = dataclasses.field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.e)

    def covariates(self) -> np.ndarray:
        """The measured covariates X1..X5 as an ``n x 5`` array (X6 never included)."""
        return np.column_stack([self.x1, self.x2, self.x3, self.x4, self.x5]).astype(float)

    def replace(self, **changes) -> "SimulatedDataset":
        return dataclasses.replace(self, **changes)


def latent_exposure_x2_correlation(prevalence: float) -> float:
    """Latent correlation giving a point-biserial corr(X2, E) of 0.5."""
    threshold = norm.ppf(1.0 - prevalence)
    r = EXPOSURE_X2_PEARSON * np.sqrt(prevalence * (1.0 - prevalence)) / norm.pdf(threshold)
    return float(np.clip(r, -0.99, 0.99))


def _repair_psd(sigma: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    vals = np.maximum(vals, PSD_EIGEN_FLOOR)
    fixed = (vecs * vals) @ vecs.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    return (fixed + fixed.T) / 2.0


@lru_cache(maxsize=None)
def _latent_sigma(prevalence: float, with_x6: bool) -> np.ndarray:
    from psconfound.solvers import NotPositiveDefiniteError, cholesky_spd

    dim = 7 if with_x6 else 6
    sigma = np.full((dim, dim), LOW_CORRELATION)
    np.fill_diagonal(sigma, 1.0)
    sigma[0, 1] = sigma[1, 0] = EXPOSURE_X1_CORRELATION
    sigma[0, 2] = sigma[2, 0] = latent_exposure_x2_correlation(prevalence)
    try:
        cholesky_spd(sigma)
    except NotPositiveDefiniteError:
        sigma = _repair_psd(sigma)
        try:
            cholesky_spd(sigma)
        except NotPositiveDefiniteError as exc:
            raise RuntimeError(f"could not repair latent correlation matrix: {exc}") from exc
    sigma.setflags(write=False)
    return sigma


def build_latent_sigma(spec: ScenarioSpec) -> np.ndarray:
    """Latent correlation matrix, order ``E*, X1*, X2, X3, X4, X5[, X6]``.

    Returns the 6x6 matrix when the scenario has no unmeasured confounder.
    """
    return _latent_sigma(float(spec.exposure_prevalence), bool(spec.unmeasured_confounder)).copy()


def _joint_upper_tail(shift: float, threshold: float, rho: float) -> float:
    # P(X1* + shift > 0, E* > threshold) for a standard bivariate normal
    s = np.sqrt(1.0 - rho * rho)
    value, _ = integrate.quad(
        lambda t: norm.pdf(t) * norm.cdf((shift + rho * t) / s),
        threshold,
        np.inf,
        epsabs=1e-14,
        epsrel=1e-12,
        limit=200,
    )
    return value


@lru_cache(maxsize=None)
def x1_latent_shift(prevalence: float, p1_given_e1: float, rho: float) -> float:
    """Constant added to X1* among the exposed so that Pr(X1=1 | E=1) hits the target.

    The conditional probability is evaluated exactly under the latent
    bivariate normal truncated to ``E* > threshold``; the shift is found by
    bisection.
    """
    threshold = norm.ppf(1.0 - prevalence)
    tail = norm.sf(threshold)

    def gap(shift):
        return _joint_upper_tail(shift, threshold, rho) / tail - p1_given_e1

    return optimize.bisect(gap, -20.0, 20.0, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=200)


def draw_dataset(spec: ScenarioSpec) -> SimulatedDataset:
    """Exposure and covariates for one replicate (outcome not yet generated).

    Draw order from the replicate's data stream: an ``n x dim`` block of
    standard normals, then ``n`` outcome uniforms.
    """
    sigma = build_latent_sigma(spec)
    dim = sigma.shape[0]
    chol = np.linalg.cholesky(sigma)
    rng = spec.rng(STREAM_DATA)
    z = rng.standard_normal((spec.n, dim))
    uniforms = rng.random(spec.n)
    latent = z @ chol.T

    threshold = norm.ppf(1.0 - spec.exposure_prevalence)
    e = (latent[:, 0] > threshold).astype(np.int8)
    exposed = e == 1
    overlap = spec.overlap

    x1_star = latent[:, 1].copy()
    shift = x1_latent_shift(float(spec.exposure_prevalence), overlap.p1_given_e1, float(sigma[0, 1]))
    x1_star[exposed] += shift
    x1 = (x1_star > 0.0).astype(np.int8)

    continuous = latent[:, 2:].copy()
    if exposed.any() and (~exposed).any():
        gap = continuous[exposed].mean(axis=0) - continuous[~exposed].mean(axis=0)
        continuous[exposed] += overlap.delta - gap

    return SimulatedDataset(
        e=e,
        x1=x1,
        x2=continuous[:, 0],
        x3=continuous[:, 1],
        x4=continuous[:, 2],
        x5=continuous[:, 3],
        x6=continuous[:, 4] if spec.unmeasured_confounder else None,
        outcome_uniforms=uniforms,
    )


def linear_predictor(
    data: SimulatedDataset,
    coefs: OutcomeCoefficients = OUTCOME_COEFFICIENTS,
    e: Optional[np.ndarray | int] = None,
) -> np.ndarray:
    """Outcome linear predictor; ``e`` overrides the observed exposure."""
    exposure = data.e if e is None else e
    eta = (
        coefs.intercept
        + coefs.e * np.asarray(exposure, dtype=float)
        + coefs.x1 * data.x1
        + coefs.x2 * data.x2
        + coefs.x3 * data.x3
        + coefs.x4 * data.x4
        + coefs.x5 * data.x5
    )
    if data.x6 is not None:
        eta = eta + coefs.x6 * data.x6
    return np.broadcast_to(eta, (data.n,)).astype(float)


def inverse_link(eta: np.ndarray, link: str) -> np.ndarray:
    if link == "logit":
        return special.expit(eta)
    if link == "cloglog":
        return -np.expm1(-np.exp(eta))
    raise ValueError(f"unknown link {link!r}")


def generate_outcome(
    data: SimulatedDataset,
    spec: ScenarioSpec,
    coefs: OutcomeCoefficients = OUTCOME_COEFFICIENTS,
) -> SimulatedDataset:
    if data.outcome_uniforms is None:
        raise ValueError("dataset carries no outcome uniforms; build it with draw_dataset")
    pi = inverse_link(linear_predictor(data, coefs), spec.link)
    y = (data.outcome_uniforms < pi).astype(np.int8)
    return data.replace(y=y)


def _log_odds(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def true_marginal_log_or(
    data: SimulatedDataset,
    spec: ScenarioSpec,
    coefs: OutcomeCoefficients = OUTCOME_COEFFICIENTS,
) -> float:
    """Dataset-specific marginal log odds ratio under the true outcome model.

    Averages the true outcome probabilities over the sample with everyone
    exposed and with everyone unexposed; no outcome noise enters.
    """
    p1 = inverse_link(linear_predictor(data, coefs, e=1), spec.link).mean()
    p0 = inverse_link(linear_predictor(data, coefs, e=0), spec.link).mean()
    return _log_odds(p1) - _log_odds(p0)


def simulate(spec: ScenarioSpec, coefs: OutcomeCoefficients = OUTCOME_COEFFICIENTS) -> SimulatedDataset:
    """Covariates, outcome and truth for one replicate."""
    data = generate_outcome(draw_dataset(spec), spec, coefs)
    return data.replace(true_log_mor=true_marginal_log_or(data, spec, coefs))


def write_dataset_csv(data: SimulatedDataset, path: str | Path) -> None:
    """Dump a dataset with header ``e,x1,x2,x3,x4,x5[,x6],y``."""
    cols = {"e": data.e, "x1": data.x1, "x2": data.x2, "x3": data.x3, "x4": data.x4, "x5": data.x5}
    if data.x6 is not None:
        cols["x6"] = data.x6
    if data.y is None:
        raise ValueError("dataset has no outcome")
    cols["y"] = data.y
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in zip(*(c.tolist() for c in cols.values())):
            writer.writerow(row)
