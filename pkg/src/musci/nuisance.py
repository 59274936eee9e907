"""Nuisance functions of the influence functions, fit on one fold and
evaluated on another.

* conditional score CDFs ``m(r, x) = P(S <= r | X = x, scope, R = 1)``
* missingness risk ratios ``P(R=0 | x) / P(R=1 | x)`` (target or global)
* covariate density ratios ``p(x | T=0, R=0) / p(x | T=k, R=1)``
* target-site propensity among outcome-missing rows ``P(T=0 | x, R=0)``
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .learners import (
    PROB_CLIP,
    BasisSpec,
    DegenerateClassError,
    LogisticModel,
    as_rows,
    fit_logistic,
    fit_logistic_many,
    monotonize_rows,
)

CLIP = 0.01
DEFAULT_GRID_SIZE = 40


class NuisanceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScoreGrid:
    """Sorted grid points plus one sentinel below and one above."""

    points: np.ndarray
    lower: float
    upper: float

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([[self.lower], self.points, [self.upper]])

    def __len__(self):
        return len(self.points)


def build_grid(scores, G: int = DEFAULT_GRID_SIZE) -> ScoreGrid:
    """``G`` empirical quantiles (levels j/G) of the scores, deduplicated, with
    sentinels at ``min - 1`` and ``max + 1``."""
    s = np.asarray(scores, dtype=float)
    s = s[~np.isnan(s)]
    if s.size == 0:
        raise NuisanceError("cannot build a score grid from no scores")
    distinct = np.unique(s)
    if distinct.size <= G:
        pts = distinct
    else:
        pts = np.unique(np.quantile(s, np.arange(1, G + 1) / G))
    return ScoreGrid(pts, float(distinct[0] - 1.0), float(distinct[-1] + 1.0))


def union_grid(*grids: ScoreGrid) -> np.ndarray:
    """Every grid point and sentinel of the given grids, sorted."""
    return np.unique(np.concatenate([g.full for g in grids]))


@dataclass(frozen=True, eq=False)
class ConditionalCdf:
    """Per-grid-point logistic fits, monotonized in ``r`` by PAV at evaluation.

    Right-continuous step function in ``r``: ``m(r, x)`` equals the value at
    the largest full-grid point ``<= r``; 0 at/below the lower sentinel and 1
    at/above the upper sentinel.
    """

    scope: str
    grid: ScoreGrid
    models: tuple
    train_index: np.ndarray = field(repr=False)
    interpolation: str = "step"

    def matrix(self, xs) -> np.ndarray:
        """Monotone CDF values at ``[lower, *points, upper]`` for each row of xs."""
        xs = as_rows(xs)
        B = self.models[0].basis.expand(xs)
        coef = np.stack([m.coef for m in self.models])
        P = np.clip(expit(B @ coef.T), PROB_CLIP, 1 - PROB_CLIP)
        P = monotonize_rows(P)
        n = P.shape[0]
        return np.hstack([np.zeros((n, 1)), P, np.ones((n, 1))])

    def column_for(self, r) -> np.ndarray:
        """Column of :meth:`matrix` holding ``m(r, .)``; -1 means below the grid (value 0)."""
        return np.searchsorted(self.grid.full, np.asarray(r, dtype=float), side="right") - 1

    def at(self, r, xs, matrix=None) -> np.ndarray:
        """``m(r_j, x_i)`` as an ``(n, len(r))`` array."""
        M = self.matrix(xs) if matrix is None else matrix
        r = np.atleast_1d(np.asarray(r, dtype=float))
        cols = self.column_for(r)
        padded = np.hstack([np.zeros((M.shape[0], 1)), M])
        if self.interpolation == "step":
            return padded[:, cols + 1]
        full = self.grid.full
        j = np.clip(cols, 0, len(full) - 2)
        t = np.clip((r - full[j]) / (full[j + 1] - full[j]), 0.0, 1.0)
        out = M[:, j] * (1 - t) + M[:, j + 1] * t
        return np.where(cols < 0, 0.0, np.where(cols >= len(full) - 1, 1.0, out))

    def __call__(self, r: float, x) -> float:
        return float(self.at([r], np.atleast_2d(np.asarray(x, dtype=float)))[0, 0])


def fit_conditional_cdf(xs, scores, grid: ScoreGrid | None = None, basis=BasisSpec(2),
                        scope: str = "", train_index=None, G: int = DEFAULT_GRID_SIZE,
                        interpolation: str = "step") -> ConditionalCdf:
    """Logistic fit of ``1{S <= r_g}`` on the basis at every grid point ``r_g``."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise NuisanceError(f"no outcome-observed rows to fit the score CDF ({scope or 'scope'})")
    xs = as_rows(xs)
    grid = build_grid(s, G) if grid is None else grid
    labels = s[:, None] <= grid.points[None, :]
    models = fit_logistic_many(xs, labels, basis)
    idx = np.asarray([] if train_index is None else train_index, dtype=int)
    return ConditionalCdf(scope, grid, tuple(models), idx, interpolation)


def _classifier(xs, labels, basis, what):
    try:
        return fit_logistic(xs, labels, basis)
    except DegenerateClassError:
        raise DegenerateClassError(f"{what}: only one class present in the fitting fold") from None


@dataclass(frozen=True, eq=False)
class MissingnessRatio:
    model: LogisticModel
    scope: str
    clip: float = CLIP
    train_index: np.ndarray = field(default_factory=lambda: np.array([], int), repr=False)

    def __call__(self, xs) -> np.ndarray:
        e = self.model.predict_proba(xs)
        return np.clip((1 - e) / e, self.clip, 1 / self.clip)


def fit_missingness_ratio(xs, observed, basis=BasisSpec(2), scope="", train_index=None) -> MissingnessRatio:
    """Odds of a missing outcome, ``(1 - e(x)) / e(x)`` with ``e = P(R=1 | x)``."""
    model = _classifier(
        xs, observed, basis,
        f"missingness model ({scope or 'scope'}) needs both observed and missing outcomes",
    )
    idx = np.asarray([] if train_index is None else train_index, dtype=int)
    return MissingnessRatio(model, scope, CLIP, idx)


@dataclass(frozen=True, eq=False)
class DensityRatio:
    site: int
    model: LogisticModel
    correction: float  # n_B / n_A
    clip: float = CLIP
    train_index: np.ndarray = field(default_factory=lambda: np.array([], int), repr=False)

    def __call__(self, xs) -> np.ndarray:
        pi = self.model.predict_proba(xs)
        return np.clip(pi / (1 - pi) * self.correction, self.clip, 1 / self.clip)


def fit_density_ratio(xs_target_missing, xs_source_observed, site: int, basis=BasisSpec(2),
                      train_index=None) -> DensityRatio:
    """Classifier-odds estimate of ``p(x | T=0, R=0) / p(x | T=k, R=1)``.

    Class A is the target's outcome-missing rows, class B the source's
    outcome-observed rows. A quadratic basis spans the exponential-tilt family
    that covers Gaussian mean and variance shifts.
    """
    xa, xb = as_rows(xs_target_missing), as_rows(xs_source_observed)
    if len(xa) == 0:
        raise NuisanceError(f"density ratio for site {site}: no target rows with missing outcome")
    if len(xb) == 0:
        raise NuisanceError(f"density ratio for site {site}: no site-{site} rows with observed outcome")
    labels = np.r_[np.ones(len(xa), bool), np.zeros(len(xb), bool)]
    model = fit_logistic(np.vstack([xa, xb]), labels, basis)
    idx = np.asarray([] if train_index is None else train_index, dtype=int)
    return DensityRatio(site, model, len(xb) / len(xa), CLIP, idx)


@dataclass(frozen=True, eq=False)
class SitePropensity:
    sites: tuple
    models: tuple
    clip: float = CLIP
    train_index: np.ndarray = field(default_factory=lambda: np.array([], int), repr=False)

    def components(self, xs) -> np.ndarray:
        """Renormalized one-vs-rest probabilities, one column per site in ``sites``."""
        P = np.column_stack([m.predict_proba(xs) for m in self.models])
        return P / P.sum(axis=1, keepdims=True)

    def __call__(self, xs) -> np.ndarray:
        q = self.components(xs)[:, self.sites.index(0)]
        return np.clip(q, self.clip, 1 - self.clip)


def fit_site_propensity(xs_missing, sites_missing, basis=BasisSpec(2), train_index=None) -> SitePropensity:
    """One-vs-rest site classifiers among outcome-missing rows."""
    xs = as_rows(xs_missing)
    sites_missing = np.asarray(sites_missing, dtype=int)
    present = tuple(int(k) for k in np.unique(sites_missing))
    if 0 not in present:
        raise NuisanceError("target site absent among outcome-missing rows")
    if len(present) < 2:
        raise DegenerateClassError("site propensity needs at least two sites among outcome-missing rows")
    models = tuple(_classifier(xs, sites_missing == k, basis, f"site {k} propensity") for k in present)
    idx = np.asarray([] if train_index is None else train_index, dtype=int)
    return SitePropensity(present, models, CLIP, idx)
