"""Federated weights over site quantiles.

The loss is a convex quadratic in the source weights ``w_1..w_S`` plus a
linear discrepancy penalty; it is minimized by projected gradient descent
over ``{0 <= w_k <= cap, sum w_k <= 1}`` and the target takes the remainder.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .estimators import EvalRows, InfluenceContext, SiteQuantiles, phi_source_matrix, phi_target_matrix

DEFAULT_LAMBDA_FACTORS = (0.0, 0.1, 1.0, 10.0, 100.0)
DEFAULT_FOLDS = 5
MAX_ITER = 5000
REL_TOL = 1e-10


class WeightScheme(str, Enum):
    FED1 = "fed1"
    FED2 = "fed2"
    FED3 = "fed3"
    EQUAL = "equal"


@dataclass(frozen=True, eq=False)
class LossComponents:
    a: np.ndarray      # phi_0 at r0 per evaluation row
    B: np.ndarray      # phi_k at r0, one column per source
    chi2: np.ndarray

    @property
    def n(self) -> int:
        return len(self.a)

    @property
    def num_sources(self) -> int:
        return self.B.shape[1]

    def rows(self, idx) -> "LossComponents":
        return LossComponents(self.a[idx], self.B[idx], self.chi2)


@dataclass(frozen=True)
class FederatedWeights:
    w: np.ndarray  # w[0] is the target
    scheme: WeightScheme
    lam: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to one, got {w}")


def build_loss(rows: EvalRows, ctx: InfluenceContext, q: SiteQuantiles) -> LossComponents:
    """Every influence function evaluated at the common anchor ``r_hat_0``."""
    r0 = [q.r_hat[0]]
    a = phi_target_matrix(ctx, rows, r0)[:, 0]
    K = len(q.r_hat)
    B = np.zeros((len(rows), K - 1))
    for k in range(1, K):
        if not np.isnan(q.r_hat[k]):
            B[:, k - 1] = phi_source_matrix(ctx, rows, r0, k)[:, 0]
    chi2 = np.where(np.isnan(q.chi), 0.0, q.chi) ** 2
    return LossComponents(a, B, chi2)


def _design(lc: LossComponents, form: str) -> np.ndarray:
    if form == "algorithm":
        return lc.a[:, None] - lc.B
    if form == "equation":
        return lc.B
    raise ValueError(f"unknown objective form {form!r}")


def objective(w, lc: LossComponents, lam: float, form: str = "algorithm") -> float:
    """``(1/n) sum_i (D_i w - a_i)^2 + (lam/n) sum_k w_k chi2_k`` over source weights."""
    w = np.asarray(w, dtype=float)
    D = _design(lc, form)
    resid = D @ w - lc.a
    return float(resid @ resid / lc.n + lam / lc.n * (lc.chi2 @ w))


def cap_for(scheme: WeightScheme, S: int) -> float:
    return 1.0 / (S + 1) if scheme is WeightScheme.FED3 else 1.0


def project(v, cap: float) -> np.ndarray:
    """Euclidean projection onto ``{0 <= w <= cap, sum w <= 1}``."""
    v = np.asarray(v, dtype=float)
    w = np.clip(v, 0.0, cap)
    if w.sum() <= 1.0:
        return w
    lo, hi = 0.0, float(np.max(v))
    for _ in range(200):
        tau = 0.5 * (lo + hi)
        if np.clip(v - tau, 0.0, cap).sum() > 1.0:
            lo = tau
        else:
            hi = tau
    return np.clip(v - hi, 0.0, cap)


def solve_qp(lc: LossComponents, lam: float, cap: float, form: str = "algorithm",
             active=None) -> np.ndarray:
    """Projected gradient descent with step ``1/L``; inactive sources stay at 0."""
    S = lc.num_sources
    active = np.ones(S, bool) if active is None else np.asarray(active, bool)
    w = np.zeros(S)
    if S == 0 or not active.any() or lc.n == 0:
        return w
    D = _design(lc, form)[:, active]
    a, c = lc.a, lam / lc.n * lc.chi2[active]
    H = 2.0 / lc.n * (D.T @ D)
    g0 = -2.0 / lc.n * (D.T @ a) + c
    L = float(np.linalg.eigvalsh(H)[-1])
    if L <= 0:
        # linear objective: the best vertex is zero or a single capped coordinate
        z = np.zeros(int(active.sum()))
        j = int(np.argmin(g0))
        if g0[j] < 0:
            z[j] = min(cap, 1.0)
        w[active] = z
        return w

    def f(z):
        return 0.5 * z @ H @ z + g0 @ z

    z = project(np.full(D.shape[1], min(cap, 1.0 / (D.shape[1] + 1))), cap)
    fz = f(z)
    for _ in range(MAX_ITER):
        z_new = project(z - (H @ z + g0) / L, cap)
        f_new = f(z_new)
        done = abs(fz - f_new) <= REL_TOL * max(abs(fz), 1e-300)
        z, fz = z_new, f_new
        if done:
            break
    w[active] = z
    return w


def optimize_weights(lc: LossComponents, lam: float, scheme: WeightScheme | str,
                     form: str = "algorithm", active=None) -> FederatedWeights:
    scheme = WeightScheme(scheme)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    S = lc.num_sources
    active = np.ones(S, bool) if active is None else np.asarray(active, bool)
    if scheme is WeightScheme.EQUAL:
        m = int(active.sum()) + 1
        w = np.zeros(S + 1)
        w[0] = 1.0 / m
        w[1:][active] = 1.0 / m
        return FederatedWeights(w, scheme, float(lam))
    ws = solve_qp(lc, lam, cap_for(scheme, S), form, active)
    return finalize(ws, scheme, lam)


def finalize(ws, scheme: WeightScheme | str, lam: float = 0.0) -> FederatedWeights:
    """Turn optimizer output over sources into full weights (FedII shrinks by ``S/(S+1)``)."""
    scheme = WeightScheme(scheme)
    ws = np.clip(np.asarray(ws, dtype=float), 0.0, None)
    if scheme is WeightScheme.FED2:
        ws = ws * len(ws) / (len(ws) + 1)
    return FederatedWeights(np.r_[max(0.0, 1.0 - ws.sum()), ws], scheme, float(lam))


def default_lambda_grid(n: int) -> np.ndarray:
    return np.asarray(DEFAULT_LAMBDA_FACTORS) * n


def _held_out(w, lc: LossComponents, form: str) -> float:
    resid = _design(lc, form) @ w - lc.a
    return float(resid @ resid / max(lc.n, 1))


def cv_lambda(lc: LossComponents, scheme: WeightScheme | str, grid=None, folds: int = DEFAULT_FOLDS,
              seed: int = 0, form: str = "algorithm", active=None) -> float:
    """V-fold choice of lambda by held-out unpenalized loss; ties go to the smaller lambda.

    Training fits rescale lambda by ``n_train / n`` so the penalty carries the
    same weight relative to the mean squared term as in the full fit.
    """
    scheme = WeightScheme(scheme)
    grid = default_lambda_grid(lc.n) if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if folds < 2:
        raise ValueError("need at least two folds")
    grid = np.sort(grid)
    if grid.size == 1 or scheme is WeightScheme.EQUAL:
        return float(grid[0])
    perm = np.random.default_rng(seed).permutation(lc.n)
    parts = np.array_split(perm, folds)
    S = lc.num_sources
    cap = cap_for(scheme, S)
    loss = np.zeros(grid.size)
    for v in range(folds):
        test = parts[v]
        train = np.concatenate([parts[u] for u in range(folds) if u != v])
        tr, te = lc.rows(train), lc.rows(test)
        for j, lam in enumerate(grid):
            w = solve_qp(tr, lam * len(train) / lc.n, cap, form, active)
            loss[j] += _held_out(w, te, form) * len(test)
    loss /= lc.n
    best = np.flatnonzero(loss <= loss.min() + 1e-12 * max(1.0, abs(loss.min())))
    return float(grid[best[0]])


def aggregate(q: SiteQuantiles, fw: FederatedWeights) -> float:
    r = np.where(np.isnan(q.r_hat), 0.0, q.r_hat)
    if len(r) != len(fw.w):
        raise ValueError("weights and site quantiles differ in length")
    return float(fw.w @ r)
