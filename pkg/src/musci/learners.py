"""Small deterministic regression primitives used for every nuisance model.

Everything here works on a polynomial basis of the covariates and is a pure
function of its inputs: least squares, penalized logistic regression (IRLS),
smoothed-pinball quantile regression and pool-adjacent-violators.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LOGISTIC_PENALTY = 1e-6
PROB_CLIP = 1e-6


class RankError(ValueError):
    """Too few rows to identify the basis coefficients."""


class DegenerateClassError(ValueError):
    """A classification target has a single class."""


@dataclass(frozen=True)
class BasisSpec:
    """Per-coordinate polynomial expansion ``1, x, ..., x^d`` (no cross terms)."""

    degree: int = 2

    def __post_init__(self):
        if not 1 <= self.degree <= 4:
            raise ValueError(f"basis degree must be in [1, 4], got {self.degree}")

    def dim(self, p: int) -> int:
        return 1 + p * self.degree

    def expand(self, xs) -> np.ndarray:
        xs = as_rows(xs)
        n, p = xs.shape
        cols = [np.ones(n)]
        for j in range(p):
            for k in range(1, self.degree + 1):
                cols.append(xs[:, j] ** k)
        return np.column_stack(cols)


def as_rows(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 0:
        xs = xs.reshape(1, 1)
    elif xs.ndim == 1:
        xs = xs[:, None]
    return xs


@dataclass(frozen=True)
class LinearModel:
    coef: np.ndarray
    basis: BasisSpec

    def predict(self, xs) -> np.ndarray:
        return self.basis.expand(xs) @ self.coef


@dataclass(frozen=True)
class LogisticModel:
    coef: np.ndarray
    basis: BasisSpec
    iterations: int = 0
    converged: bool = True
    # log-likelihood after each accepted IRLS step (index 0 = start)
    loglik_path: tuple = field(default=(), repr=False, compare=False)

    def decision(self, xs) -> np.ndarray:
        return self.basis.expand(xs) @ self.coef

    def predict_proba(self, xs) -> np.ndarray:
        return np.clip(expit(self.decision(xs)), PROB_CLIP, 1 - PROB_CLIP)

    @classmethod
    def constant(cls, prob: float, basis: BasisSpec, p: int) -> "LogisticModel":
        """Intercept-only model with a clipped probability (single-class labels)."""
        prob = min(max(prob, PROB_CLIP), 1 - PROB_CLIP)
        coef = np.zeros(basis.dim(p))
        coef[0] = np.log(prob / (1 - prob))
        return cls(coef, basis, iterations=0, converged=True)


@dataclass(frozen=True)
class QuantileModel:
    coef: np.ndarray
    basis: BasisSpec
    tau: float
    iterations: int = 0
    converged: bool = True

    def predict(self, xs) -> np.ndarray:
        return self.basis.expand(xs) @ self.coef


@dataclass(frozen=True)
class IsotonicFit:
    values: np.ndarray
    fitted: np.ndarray


def fit_linear(xs, ys, basis: BasisSpec) -> LinearModel:
    """Least squares on the expanded basis (minimum-norm if rank deficient)."""
    B = basis.expand(xs)
    ys = np.asarray(ys, dtype=float)
    n, d = B.shape
    if n < d:
        raise RankError(f"need at least {d} rows for a degree-{basis.degree} basis, got {n}")
    coef = np.linalg.lstsq(B, ys, rcond=None)[0]
    return LinearModel(coef, basis)


def _penalized_loglik(B, Y, beta, penalty):
    # B: (n, d), Y: (n, m), beta: (m, d) -> (m,)
    eta = B @ beta.T
    ll = np.sum(Y * eta - np.logaddexp(0.0, eta), axis=0)
    return ll - 0.5 * penalty * np.sum(beta**2, axis=1)


def irls_many(B, Y, penalty=LOGISTIC_PENALTY, max_iter=100, tol=1e-8, record=False):
    """Penalized logistic regression for several label columns sharing one design.

    Newton steps with step halving, so the penalized log-likelihood never
    decreases. Returns ``(beta, iterations, converged, paths)``; ``paths`` is a
    list of per-column log-likelihood traces when ``record`` is set.
    """
    B = np.asarray(B, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, d = B.shape
    m = Y.shape[1]
    beta = np.zeros((m, d))
    ll = _penalized_loglik(B, Y, beta, penalty)
    iters = np.zeros(m, dtype=int)
    converged = np.zeros(m, dtype=bool)
    active = np.ones(m, dtype=bool)
    paths = [[v] for v in ll] if record else None
    eye = penalty * np.eye(d)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        b = beta[idx]
        p = expit(B @ b.T)
        w = p * (1 - p)
        grad = (B.T @ (Y[:, idx] - p)).T - penalty * b
        H = np.einsum("ni,na,nj->aij", B, w, B) + eye
        step = np.linalg.solve(H, grad[..., None])[..., 0]

        t = np.ones(idx.size)
        new = b + step
        new_ll = _penalized_loglik(B, Y[:, idx], new, penalty)
        for _ in range(60):
            bad = new_ll < ll[idx]
            if not bad.any():
                break
            t[bad] *= 0.5
            new[bad] = b[bad] + t[bad, None] * step[bad]
            new_ll[bad] = _penalized_loglik(B, Y[:, idx[bad]], new[bad], penalty)
        stuck = new_ll < ll[idx]
        new[stuck] = b[stuck]
        new_ll[stuck] = ll[idx][stuck]

        delta = np.max(np.abs(new - b), axis=1)
        beta[idx] = new
        ll[idx] = new_ll
        iters[idx] += 1
        if record:
            for j, col in enumerate(idx):
                paths[col].append(new_ll[j])
        converged[idx[delta < tol]] = True
        active[idx[(delta < tol) | stuck]] = False

    return beta, iters, converged, paths


def fit_logistic(xs, labels, basis: BasisSpec, record=False) -> LogisticModel:
    """L2-penalized (1e-6) logistic regression fit by IRLS."""
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise DegenerateClassError("logistic regression needs both classes present")
    B = basis.expand(xs)
    beta, iters, conv, paths = irls_many(B, labels[:, None].astype(float), record=record)
    return LogisticModel(
        beta[0], basis, int(iters[0]), bool(conv[0]), tuple(paths[0]) if record else ()
    )


def fit_logistic_many(xs, label_matrix, basis: BasisSpec) -> list[LogisticModel]:
    """One logistic fit per column of ``label_matrix``; single-class columns get
    the clipped constant model instead of IRLS."""
    L = np.asarray(label_matrix, dtype=bool)
    xs = as_rows(xs)
    p = xs.shape[1]
    frac = L.mean(axis=0)
    mixed = np.flatnonzero((frac > 0) & (frac < 1))
    models: list[LogisticModel | None] = [None] * L.shape[1]
    if mixed.size:
        beta, iters, conv, _ = irls_many(basis.expand(xs), L[:, mixed].astype(float))
        for j, col in enumerate(mixed):
            models[col] = LogisticModel(beta[j], basis, int(iters[j]), bool(conv[j]))
    for col in range(L.shape[1]):
        if models[col] is None:
            models[col] = LogisticModel.constant(float(frac[col]), basis, p)
    return models


# -- quantile regression -------------------------------------------------------

def smoothed_pinball(u, tau, h):
    """Pinball loss with the kink replaced by a quadratic on ``[-h, h]``."""
    u = np.asarray(u, dtype=float)
    quad = u**2 / (4 * h) + (tau - 0.5) * u + h / 4
    return np.where(np.abs(u) <= h, quad, u * (tau - (u < 0)))


def smoothed_pinball_grad(u, tau, h):
    """Derivative of :func:`smoothed_pinball` with respect to ``u``."""
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= h, u / (2 * h) + tau - 0.5, tau - (u < 0))


def pinball_objective(coef, B, ys, tau, h):
    return float(np.mean(smoothed_pinball(ys - B @ coef, tau, h)))


def pinball_objective_grad(coef, B, ys, tau, h):
    u = ys - B @ coef
    return -(B.T @ smoothed_pinball_grad(u, tau, h)) / len(ys)


def fit_quantile(xs, ys, tau: float, basis: BasisSpec, iterations=2000, smoothing=1e-4) -> QuantileModel:
    """Linear quantile regression by subgradient descent on a smoothed pinball loss.

    The design is orthonormalized (thin SVD) so one step size suits every direction,
    the start is least squares shifted to the ``tau`` residual quantile, steps
    decay like ``1/sqrt(t)`` and the best iterate seen is returned.
    """
    if not 0 < tau < 1:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")
    B = basis.expand(xs)
    ys = np.asarray(ys, dtype=float)
    n, d = B.shape
    if n < d:
        raise RankError(f"need at least {d} rows for a degree-{basis.degree} basis, got {n}")

    # orthonormal coordinates of the column space; null directions are dropped
    U, sv, Vt = np.linalg.svd(B, full_matrices=False)
    keep = sv > sv[0] * 1e-10
    U, sv, Vt = U[:, keep], sv[keep], Vt[keep]
    Z = U * np.sqrt(n)
    beta0 = np.linalg.lstsq(B, ys, rcond=None)[0]
    resid = ys - B @ beta0
    beta0[0] += np.quantile(resid, tau)
    gamma = sv * (Vt @ beta0) / np.sqrt(n)
    scale = float(np.mean(np.abs(resid - np.quantile(resid, tau))))
    scale = max(scale, 1e-8 * max(1.0, float(np.max(np.abs(ys)))))

    best = gamma.copy()
    best_obj = pinball_objective(gamma, Z, ys, tau, smoothing)
    for t in range(iterations):
        g = pinball_objective_grad(gamma, Z, ys, tau, smoothing)
        gamma = gamma - (0.5 * scale / np.sqrt(t + 1.0)) * g
        obj = pinball_objective(gamma, Z, ys, tau, smoothing)
        if obj < best_obj:
            best_obj, best = obj, gamma.copy()
    coef = Vt.T @ (best * np.sqrt(n) / sv)
    return QuantileModel(coef, basis, float(tau), iterations, True)


# -- isotonic regression -------------------------------------------------------

def pav(values, weights=None) -> IsotonicFit:
    """Weighted least-squares projection onto non-decreasing sequences."""
    v = np.asarray(values, dtype=float)
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    if v.shape != w.shape or v.ndim != 1:
        raise ValueError("values and weights must be 1-d arrays of equal length")
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    means, wts, counts = [], [], []
    for vi, wi in zip(v, w):
        means.append(vi)
        wts.append(wi)
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), wts.pop(), counts.pop()
            wsum = wts[-1] + w2
            means[-1] = (means[-1] * wts[-1] + m2 * w2) / wsum
            wts[-1] = wsum
            counts[-1] += c2
    fitted = np.repeat(means, counts)
    return IsotonicFit(v, fitted)


def monotonize_rows(M: np.ndarray) -> np.ndarray:
    """Apply unit-weight PAV to every row of ``M`` that is not already sorted."""
    M = np.array(M, dtype=float, copy=True)
    if M.shape[1] < 2:
        return M
    bad = np.flatnonzero(np.any(np.diff(M, axis=1) < 0, axis=1))
    for i in bad:
        M[i] = pav(M[i]).fitted
    return M
