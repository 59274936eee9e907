"""Influence functions of the target quantile and their estimating-equation roots.

Three evaluators share one calling convention ``phi(ctx, rows, rs)`` that
returns an ``(n_rows, len(rs))`` matrix:

* :func:`phi_target_matrix`  target-only nonparametric influence function
* :func:`phi_source_matrix`  influence function borrowing source site ``k``
* :func:`phi_ccod_matrix`    efficient influence function under a common
  conditional outcome distribution (pooled sites)

The root of ``r -> mean_i phi(O_i, r)`` is taken as the smallest candidate
threshold where the mean turns non-negative.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import CellProbabilities, Dataset, Observation
from .nuisance import union_grid
from .scores import FittedScore

# Ψ(r) >= -ROOT_TOL counts as a crossing; absorbs rounding in 1 - alpha.
ROOT_TOL = 1e-12


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EvalRows:
    """Rows at which influence functions are evaluated, with their scores."""

    X: np.ndarray
    site: np.ndarray
    observed: np.ndarray
    scores: np.ndarray  # NaN where the outcome is missing
    index: np.ndarray = field(default_factory=lambda: np.array([], int))

    @classmethod
    def from_dataset(cls, data: Dataset, idx, fs: FittedScore) -> "EvalRows":
        idx = np.asarray(idx, dtype=int)
        X = data.X[idx]
        return cls(X, data.site[idx], data.observed[idx], fs.score(X, data.y[idx]), idx)

    @classmethod
    def from_observations(cls, obs: list[Observation], fs: FittedScore) -> "EvalRows":
        X = np.array([o.covariates for o in obs], dtype=float).reshape(len(obs), -1)
        y = np.array([np.nan if o.outcome is None else o.outcome for o in obs])
        return cls(X, np.array([o.site for o in obs]), np.array([o.observed for o in obs]), fs.score(X, y))

    def __len__(self):
        return len(self.site)

    def take(self, mask) -> "EvalRows":
        return EvalRows(self.X[mask], self.site[mask], self.observed[mask], self.scores[mask],
                        self.index[mask] if len(self.index) else self.index)


@dataclass(frozen=True, eq=False)
class InfluenceContext:
    """Miscoverage level, cell probabilities (from the evaluation fold) and nuisances."""

    alpha: float
    cells: CellProbabilities
    score: FittedScore | None = None
    cdfs: dict = field(default_factory=dict)       # site -> ConditionalCdf
    eta0: object = None                            # MissingnessRatio, target scope
    omega: dict = field(default_factory=dict)      # source site -> DensityRatio
    m_bar: object = None                           # ConditionalCdf, pooled R=1
    eta_bar: object = None                         # MissingnessRatio, global
    q0: object = None                              # SitePropensity

    def __post_init__(self):
        # the median (alpha = 0.5) is a well-defined root, so the endpoint is admitted here
        if not 0 < self.alpha <= 0.5:
            raise ValueError(f"miscoverage alpha must lie in (0, 0.5], got {self.alpha}")
        if self.eta0 is not None:
            for cell in ((0, 0), (0, 1)):
                if self.cells[cell] <= 0:
                    raise EstimationError(f"cell P(T={cell[0]}, R={cell[1]}) is zero in the evaluation fold")
        for k in self.omega:
            if self.cells[(0, 0)] <= 0 or self.cells[(k, 1)] <= 0:
                raise EstimationError(f"site {k}: zero cell probability in the evaluation fold")

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise EstimationError(f"influence context lacks nuisances: {', '.join(missing)}")


def _indicator(rows: EvalRows, rs) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return (rows.scores[:, None] <= np.asarray(rs)[None, :]).astype(float)


def phi_target_matrix(ctx: InfluenceContext, rows: EvalRows, rs) -> np.ndarray:
    ctx.require("eta0")
    rs = np.atleast_1d(np.asarray(rs, dtype=float))
    out = np.zeros((len(rows), len(rs)))
    t0 = rows.site == 0
    if not t0.any():
        return out
    sub = rows.take(t0)
    m0 = ctx.cdfs[0].at(rs, sub.X)
    miss = ~sub.observed[:, None]
    term_miss = (m0 - (1 - ctx.alpha)) / ctx.cells[(0, 0)]
    term_obs = ctx.eta0(sub.X)[:, None] * (_indicator(sub, rs) - m0) / ctx.cells[(0, 1)]
    out[t0] = np.where(miss, term_miss, term_obs)
    return out


def phi_source_matrix(ctx: InfluenceContext, rows: EvalRows, rs, k: int) -> np.ndarray:
    if k < 1 or k not in ctx.omega or k not in ctx.cdfs or 0 not in ctx.cdfs:
        raise EstimationError(f"influence context lacks nuisances for source site {k}")
    rs = np.atleast_1d(np.asarray(rs, dtype=float))
    out = np.zeros((len(rows), len(rs)))
    a = (rows.site == 0) & ~rows.observed
    if a.any():
        m0 = ctx.cdfs[0].at(rs, rows.X[a])
        out[a] = (m0 - (1 - ctx.alpha)) / ctx.cells[(0, 0)]
    b = (rows.site == k) & rows.observed
    if b.any():
        sub = rows.take(b)
        mk = ctx.cdfs[k].at(rs, sub.X)
        out[b] = ctx.omega[k](sub.X)[:, None] * (_indicator(sub, rs) - mk) / ctx.cells[(k, 1)]
    return out


def phi_ccod_matrix(ctx: InfluenceContext, rows: EvalRows, rs) -> np.ndarray:
    ctx.require("m_bar", "eta_bar", "q0")
    rs = np.atleast_1d(np.asarray(rs, dtype=float))
    out = np.zeros((len(rows), len(rs)))
    a = (rows.site == 0) & ~rows.observed
    if a.any():
        out[a] = ctx.m_bar.at(rs, rows.X[a]) - (1 - ctx.alpha)
    b = rows.observed
    if b.any():
        sub = rows.take(b)
        mb = ctx.m_bar.at(rs, sub.X)
        weight = ctx.eta_bar(sub.X) * ctx.q0(sub.X)
        out[b] = weight[:, None] * (_indicator(sub, rs) - mb)
    return out


# -- single-observation forms ------------------------------------------------

def _one(ctx, obs: Observation):
    if ctx.score is None:
        raise EstimationError("influence context has no fitted score")
    return EvalRows.from_observations([obs], ctx.score)


def phi_target(obs: Observation, r: float, ctx: InfluenceContext) -> float:
    return float(phi_target_matrix(ctx, _one(ctx, obs), [r])[0, 0])


def phi_source(obs: Observation, r: float, k: int, ctx: InfluenceContext) -> float:
    return float(phi_source_matrix(ctx, _one(ctx, obs), [r], k)[0, 0])


def phi_ccod(obs: Observation, r: float, ctx: InfluenceContext) -> float:
    return float(phi_ccod_matrix(ctx, _one(ctx, obs), [r])[0, 0])


# -- root solving ------------------------------------------------------------

def _evaluator(kind: str, k: int | None):
    if kind == "target":
        return lambda ctx, rows, rs: phi_target_matrix(ctx, rows, rs)
    if kind == "source":
        return lambda ctx, rows, rs: phi_source_matrix(ctx, rows, rs, k)
    if kind == "ccod":
        return lambda ctx, rows, rs: phi_ccod_matrix(ctx, rows, rs)
    raise ValueError(f"unknown influence function {kind!r}")


def candidates(ctx: InfluenceContext, kind: str, k: int | None = None, rows: EvalRows | None = None) -> np.ndarray:
    """Thresholds where Ψ can jump: every point (sentinels included) of the
    grids of the CDFs the evaluator uses, plus the observed scores above the
    lower sentinel of the evaluation rows whose indicator term the evaluator
    uses. Scores beyond the upper sentinel keep a root in range when a few
    evaluation scores exceed every fitting score."""
    if kind == "target":
        grid, active = union_grid(ctx.cdfs[0].grid), None if rows is None else (rows.site == 0) & rows.observed
    elif kind == "source":
        grid = union_grid(ctx.cdfs[0].grid, ctx.cdfs[k].grid)
        active = None if rows is None else (rows.site == k) & rows.observed
    elif kind == "ccod":
        grid, active = union_grid(ctx.m_bar.grid), None if rows is None else rows.observed
    else:
        raise ValueError(f"unknown influence function {kind!r}")
    if active is None or not active.any():
        return grid
    s = rows.scores[active]
    s = s[s > grid[0]]
    return np.unique(np.concatenate([grid, s]))


def psi_curve(kind: str, rows: EvalRows, ctx: InfluenceContext, k: int | None = None):
    """``(candidates, Ψ(candidates))`` with Ψ the fold mean of the influence function."""
    if len(rows) == 0:
        raise EstimationError("empty evaluation fold")
    rs = candidates(ctx, kind, k, rows)
    return rs, _evaluator(kind, k)(ctx, rows, rs).mean(axis=0)


def solve_quantile(kind: str, rows: EvalRows, ctx: InfluenceContext, k: int | None = None,
                   method: str = "scan") -> float:
    """Smallest candidate threshold ``r`` with ``Ψ(r) >= 0``.

    ``method="scan"`` evaluates Ψ on every candidate. ``method="bisect"``
    binary-searches the sign change and is exact only when Ψ is monotone.
    """
    if method == "scan":
        rs, psi = psi_curve(kind, rows, ctx, k)
        hits = np.flatnonzero(psi >= -ROOT_TOL)
        if hits.size == 0:
            raise EstimationError(f"estimating equation ({kind}{'' if k is None else f', site {k}'}) has no root")
        return float(rs[hits[0]])
    if method != "bisect":
        raise ValueError(f"unknown solver method {method!r}")
    if len(rows) == 0:
        raise EstimationError("empty evaluation fold")
    rs = candidates(ctx, kind, k, rows)
    phi = _evaluator(kind, k)

    def psi(j):
        return float(phi(ctx, rows, rs[j : j + 1]).mean())

    lo, hi = 0, len(rs) - 1
    if psi(hi) < -ROOT_TOL:
        raise EstimationError(f"estimating equation ({kind}) has no root")
    if psi(lo) >= -ROOT_TOL:
        return float(rs[lo])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if psi(mid) >= -ROOT_TOL:
            hi = mid
        else:
            lo = mid
    return float(rs[hi])


@dataclass(frozen=True)
class SiteQuantiles:
    """Per-site quantile estimates; index 0 is the target.

    Sources that were dropped (no outcome-observed rows) carry NaN and are
    excluded from aggregation.
    """

    r_hat: np.ndarray
    chi: np.ndarray
    r_ccod: float | None = None

    @property
    def active(self) -> np.ndarray:
        """Boolean mask over sources 1..K-1 that have an estimate."""
        return ~np.isnan(self.r_hat[1:])


def site_quantiles(ctx: InfluenceContext, rows: EvalRows, num_sites: int, ccod: bool = False,
                   sources=None) -> SiteQuantiles:
    """Target quantile, one quantile per usable source, discrepancies ``|r0 - rk|``."""
    r = np.full(num_sites, np.nan)
    r[0] = solve_quantile("target", rows, ctx)
    sources = [k for k in range(1, num_sites) if k in ctx.omega] if sources is None else sources
    for k in sources:
        r[k] = solve_quantile("source", rows, ctx, k)
    chi = np.abs(r[0] - r[1:])
    r_ccod = solve_quantile("ccod", rows, ctx) if ccod else None
    return SiteQuantiles(r, chi, r_ccod)
