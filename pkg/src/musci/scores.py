"""Conformal scores and their inversion into prediction intervals."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .learners import BasisSpec, LinearModel, QuantileModel, fit_linear, fit_quantile

RHO_FLOOR = 0.05
MIN_SCORE_ROWS = 10


class ScoreKind(str, Enum):
    ASR = "asr"
    LOCAL_ASR = "local-asr"
    CQR = "cqr"


class EmptyIntervalError(ValueError):
    """The CQR sublevel set is empty (threshold below minus half the band width)."""


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"interval bounds out of order: [{self.lower}, {self.upper}]")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def __contains__(self, y) -> bool:
        return self.lower <= y <= self.upper


@dataclass(frozen=True)
class FittedScore:
    kind: ScoreKind
    alpha: float
    mu: LinearModel | None = None
    rho: LinearModel | None = None
    q_lo: QuantileModel | None = None
    q_hi: QuantileModel | None = None

    def __post_init__(self):
        need = {
            ScoreKind.ASR: {"mu"},
            ScoreKind.LOCAL_ASR: {"mu", "rho"},
            ScoreKind.CQR: {"q_lo", "q_hi"},
        }[self.kind]
        have = {k for k in ("mu", "rho", "q_lo", "q_hi") if getattr(self, k) is not None}
        if have != need:
            raise ValueError(f"{self.kind.value} score needs models {sorted(need)}, got {sorted(have)}")

    def rho_hat(self, xs) -> np.ndarray:
        return np.maximum(self.rho.predict(xs), RHO_FLOOR)

    def score(self, xs, ys) -> np.ndarray:
        """Vectorized score; NaN outcomes give NaN scores."""
        ys = np.asarray(ys, dtype=float)
        if self.kind is ScoreKind.CQR:
            return np.maximum(self.q_lo.predict(xs) - ys, ys - self.q_hi.predict(xs))
        resid = np.abs(ys - self.mu.predict(xs))
        if self.kind is ScoreKind.LOCAL_ASR:
            resid = resid / self.rho_hat(xs)
        return resid

    def bounds(self, xs, r: float) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper arrays of ``{y : S(x, y) <= r}``; CQR may return lower > upper."""
        if self.kind is ScoreKind.CQR:
            return self.q_lo.predict(xs) - r, self.q_hi.predict(xs) + r
        if r < 0:
            raise ValueError("threshold must be non-negative for residual scores")
        mu = self.mu.predict(xs)
        half = r if self.kind is ScoreKind.ASR else r * self.rho_hat(xs)
        return mu - half, mu + half


def fit_score(xs, ys, kind: ScoreKind | str, alpha: float = 0.1, degree: int = 2) -> FittedScore:
    """Fit the models behind a score on outcome-observed rows."""
    kind = ScoreKind(kind)
    ys = np.asarray(ys, dtype=float)
    if len(ys) < MIN_SCORE_ROWS:
        raise ValueError(f"need at least {MIN_SCORE_ROWS} observed rows to fit a score, got {len(ys)}")
    if np.any(np.isnan(ys)):
        raise ValueError("score models are fit on outcome-observed rows only")
    basis = BasisSpec(degree)
    if kind is ScoreKind.CQR:
        if not 0 < alpha < 0.5:
            raise ValueError(f"CQR miscoverage must lie in (0, 0.5), got {alpha}")
        return FittedScore(
            kind,
            alpha,
            q_lo=fit_quantile(xs, ys, alpha / 2, basis),
            q_hi=fit_quantile(xs, ys, 1 - alpha / 2, basis),
        )
    mu = fit_linear(xs, ys, basis)
    if kind is ScoreKind.ASR:
        return FittedScore(kind, alpha, mu=mu)
    rho = fit_linear(xs, np.abs(ys - mu.predict(xs)), basis)
    return FittedScore(kind, alpha, mu=mu, rho=rho)


def score(fs: FittedScore, x, y) -> float:
    return float(fs.score(np.atleast_2d(np.asarray(x, dtype=float)), np.array([y]))[0])


def invert(fs: FittedScore, x, r: float) -> Interval:
    lo, hi = fs.bounds(np.atleast_2d(np.asarray(x, dtype=float)), r)
    if lo[0] > hi[0]:
        raise EmptyIntervalError(f"empty prediction set at threshold {r}")
    return Interval(float(lo[0]), float(hi[0]))
