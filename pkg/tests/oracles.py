"""Reference computations written independently of the package internals.

Each oracle recomputes a quantity from its definition by brute force (loops,
exhaustive grids, numerical integration) so tests do not compare the package
against itself.
"""
import itertools

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm


def monotone_grid_fit(values, weights, step=0.01, lo=None, hi=None):
    """Best non-decreasing sequence with entries on a ``step`` grid, by dynamic
    programming over every grid level (equivalent to enumerating all monotone
    grid sequences). Returns ``(sequence, weighted squared error)``."""
    v = np.asarray(values, float)
    w = np.asarray(weights, float)
    lo = np.floor(v.min() / step) * step if lo is None else lo
    hi = np.ceil(v.max() / step) * step if hi is None else hi
    levels = np.round(np.arange(lo, hi + step / 2, step), 10)
    cost = w[0] * (v[0] - levels) ** 2
    back = []
    for i in range(1, len(v)):
        best_prev = np.minimum.accumulate(cost)
        arg_prev = np.array([int(np.argmin(cost[: j + 1])) for j in range(len(levels))])
        back.append(arg_prev)
        cost = best_prev + w[i] * (v[i] - levels) ** 2
    j = int(np.argmin(cost))
    seq = [j]
    for arg in reversed(back):
        j = arg[j]
        seq.append(j)
    return levels[seq[::-1]], float(cost.min())


def monotone_enumerate(values, weights, levels):
    """Literal enumeration of every non-decreasing sequence over ``levels``."""
    v, w = np.asarray(values, float), np.asarray(weights, float)
    best, arg = np.inf, None
    for combo in itertools.combinations_with_replacement(levels, len(v)):
        err = float(np.sum(w * (v - np.array(combo)) ** 2))
        if err < best:
            best, arg = err, combo
    return np.array(arg), best


def qp_objective(ws, a, B, chi2, lam):
    """Loss over source weights written straight from its definition."""
    n = len(a)
    total = 0.0
    for i in range(n):
        pred = sum(ws[k] * (a[i] - B[i, k]) for k in range(len(ws)))
        total += (pred - a[i]) ** 2
    return total / n + lam / n * sum(ws[k] * chi2[k] for k in range(len(ws)))


def qp_grid_search(a, B, chi2, lam, cap, step=0.01):
    """Minimum of the loss over a two-source feasible grid ``{0..cap}^2, sum <= 1``."""
    levels = np.union1d(np.round(np.arange(0, cap + 1e-12, step), 10), [cap])
    D = a[:, None] - B
    n = len(a)
    W1, W2 = np.meshgrid(levels, levels, indexing="ij")
    feas = W1 + W2 <= 1 + 1e-12
    pred = D[:, 0][:, None, None] * W1 + D[:, 1][:, None, None] * W2
    loss = ((pred - a[:, None, None]) ** 2).mean(axis=0) + lam / n * (chi2[0] * W1 + chi2[1] * W2)
    loss = np.where(feas, loss, np.inf)
    return float(loss.min())


def psi_loop(kind, ctx, X, site, observed, scores, r, k=None):
    """Fold mean of an influence function evaluated one observation at a time."""
    a = 1 - ctx.alpha
    total = 0.0
    for x, t, obs, s in zip(X, site, observed, scores):
        x = np.atleast_2d(x)
        ind = float(obs and s <= r)
        if kind == "target":
            if t != 0:
                continue
            m0 = ctx.cdfs[0](r, x)
            if not obs:
                total += (m0 - a) / ctx.cells[(0, 0)]
            else:
                total += float(ctx.eta0(x)[0]) * (ind - m0) / ctx.cells[(0, 1)]
        elif kind == "source":
            if t == 0 and not obs:
                total += (ctx.cdfs[0](r, x) - a) / ctx.cells[(0, 0)]
            elif t == k and obs:
                mk = ctx.cdfs[k](r, x)
                total += float(ctx.omega[k](x)[0]) * (ind - mk) / ctx.cells[(k, 1)]
        elif kind == "ccod":
            if t == 0 and not obs:
                total += ctx.m_bar(r, x) - a
            elif obs:
                mb = ctx.m_bar(r, x)
                total += float(ctx.eta_bar(x)[0] * ctx.q0(x)[0]) * (ind - mb)
    return total / len(site)


def smallest_root_by_scan(values_at, points):
    """First point (in increasing order) where ``values_at`` is non-negative."""
    for p in sorted(points):
        if values_at(p) >= -1e-12:
            return p
    return None


def asr_true_quantile(mu_hat, level, propensity, error_sd=1.0, draws=200_000, seed=0):
    """Level-``level`` quantile of ``|Y - mu_hat(X)|`` among target rows with a
    missing outcome, under ``X ~ U(0,1)`` reweighted by ``1 - e(X)`` and
    ``Y = 5X + X^2 + N(0, error_sd^2)``; computed by numerical inversion."""
    x = np.random.default_rng(seed).random(draws)
    wt = 1 - propensity(x)
    wt = wt / wt.sum()
    d = mu_hat(x) - (5 * x + x**2)

    def cdf(r):
        return float(np.sum(wt * (norm.cdf((d + r) / error_sd) - norm.cdf((d - r) / error_sd))))

    return brentq(lambda r: cdf(r) - level, 1e-9, 20.0)


def monte_carlo_coverage(lower, upper, x, sd, draws, seed=0):
    rng = np.random.default_rng(seed)
    mu = 5 * x + x**2
    hits = 0
    for lo, hi, m, s in zip(lower, upper, mu, sd):
        y = m + s * rng.standard_normal(draws)
        hits += np.mean((y >= lo) & (y <= hi))
    return hits / len(x)


def lp_quantile_regression(B, y, tau):
    """Exact linear quantile regression as a linear program."""
    from scipy.optimize import linprog

    n, d = B.shape
    c = np.r_[np.zeros(d), tau * np.ones(n), (1 - tau) * np.ones(n)]
    A = np.hstack([B, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * d + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    return res.x[:d]
