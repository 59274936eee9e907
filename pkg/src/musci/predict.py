"""End-to-end fit: split, score models, nuisances, site quantiles, weights.

:func:`fit_methods` runs the shared pipeline once and derives every requested
method from it; :func:`musci_fit` is the single-method entry point.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import Dataset, Fold, cell_probs_from, split
from .estimators import EvalRows, InfluenceContext, SiteQuantiles, site_quantiles, solve_quantile
from .federate import (
    DEFAULT_FOLDS,
    FederatedWeights,
    WeightScheme,
    aggregate,
    build_loss,
    cv_lambda,
    default_lambda_grid,
    optimize_weights,
)
from .learners import BasisSpec, LinearModel, QuantileModel
from .nuisance import (
    DEFAULT_GRID_SIZE,
    fit_conditional_cdf,
    fit_density_ratio,
    fit_missingness_ratio,
    fit_site_propensity,
)
from .scores import FittedScore, Interval, ScoreKind, fit_score, invert


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


class DroppedSiteWarning(UserWarning):
    pass


METHOD_KINDS = ("federated", "target-only", "pooled-ccod", "equal-weights")


@dataclass(frozen=True)
class MethodSpec:
    """``lam=None`` means cross-validated lambda (federated only)."""

    kind: str = "federated"
    scheme: WeightScheme = WeightScheme.FED2
    lam: float | None = None
    form: str = "algorithm"
    folds: int = DEFAULT_FOLDS
    lambda_factors: tuple | None = None

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method {self.kind!r}; expected one of {METHOD_KINDS}")
        object.__setattr__(self, "scheme", WeightScheme(self.scheme))
        if self.kind == "equal-weights":
            object.__setattr__(self, "scheme", WeightScheme.EQUAL)
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.form not in ("algorithm", "equation"):
            raise ValueError(f"unknown objective form {self.form!r}")

    @property
    def label(self) -> str:
        if self.kind == "federated":
            return {"fed1": "FedI", "fed2": "FedII", "fed3": "FedIII"}[self.scheme.value]
        return {"target-only": "TargetOnly", "pooled-ccod": "Pooled", "equal-weights": "Equal"}[self.kind]

    @classmethod
    def parse(cls, name: str, **kw) -> "MethodSpec":
        """Accepts a kind or a label such as ``FedII`` / ``fed2``."""
        key = name.strip().lower()
        alias = {
            "fedi": "fed1", "fedii": "fed2", "fediii": "fed3",
            "targetonly": "target-only", "target": "target-only",
            "pooled": "pooled-ccod", "ccod": "pooled-ccod",
            "equal": "equal-weights",
        }
        key = alias.get(key, key)
        if key in ("fed1", "fed2", "fed3"):
            return cls("federated", WeightScheme(key), **kw)
        return cls(key, **kw)


@dataclass(frozen=True)
class Diagnostics:
    r_sites: tuple
    chi: tuple
    weights: tuple | None = None
    lam: float | None = None
    r_ccod: float | None = None
    dropped: tuple = ()


@dataclass(frozen=True)
class FittedPredictor:
    score: FittedScore
    r_hat: float
    alpha: float
    method: MethodSpec
    diagnostics: Diagnostics
    covariate_dim: int = 1
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.r_hat):
            raise ValueError("threshold must be finite")

    def interval(self, x) -> Interval:
        return predict_interval(self, x)

    def bounds(self, xs):
        return self.score.bounds(xs, self.r_hat)

    # -- JSON --------------------------------------------------------------
    def to_dict(self) -> dict:
        d = self.diagnostics
        doc = {
            "format": "musci-predictor",
            "version": __version__,
            "alpha": self.alpha,
            "seed": self.seed,
            "covariate_dim": self.covariate_dim,
            "method": {
                "kind": self.method.kind,
                "scheme": self.method.scheme.value,
                "lambda": self.method.lam,
                "form": self.method.form,
                "label": self.method.label,
            },
            "score": _score_to_dict(self.score),
            "threshold": self.r_hat,
            "diagnostics": {
                "site_quantiles": [_num(v) for v in d.r_sites],
                "chi": [_num(v) for v in d.chi],
                "lambda": d.lam,
                "ccod_quantile": d.r_ccod,
                "dropped_sites": list(d.dropped),
            },
        }
        if d.weights is not None:
            doc["weights"] = list(d.weights)
        return doc

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedPredictor":
        if doc.get("format") != "musci-predictor":
            raise ValueError("not a predictor document")
        m = doc["method"]
        method = MethodSpec(m["kind"], WeightScheme(m["scheme"]), m.get("lambda"), m.get("form", "algorithm"))
        dg = doc["diagnostics"]
        w = doc.get("weights")
        diag = Diagnostics(
            tuple(_den(v) for v in dg["site_quantiles"]),
            tuple(_den(v) for v in dg["chi"]),
            None if w is None else tuple(w),
            dg.get("lambda"),
            dg.get("ccod_quantile"),
            tuple(dg.get("dropped_sites", ())),
        )
        return cls(_score_from_dict(doc["score"]), float(doc["threshold"]), float(doc["alpha"]), method,
                   diag, int(doc["covariate_dim"]), int(doc.get("seed", 0)))

    @classmethod
    def from_json(cls, text: str) -> "FittedPredictor":
        return cls.from_dict(json.loads(text))


def _num(v):
    return None if v is None or (isinstance(v, float) and np.isnan(v)) else float(v)


def _den(v):
    return float("nan") if v is None else float(v)


def _score_to_dict(fs: FittedScore) -> dict:
    out = {"kind": fs.kind.value, "alpha": fs.alpha}
    for name in ("mu", "rho"):
        m = getattr(fs, name)
        if m is not None:
            out[name] = {"degree": m.basis.degree, "coef": m.coef.tolist()}
    for name in ("q_lo", "q_hi"):
        m = getattr(fs, name)
        if m is not None:
            out[name] = {"degree": m.basis.degree, "coef": m.coef.tolist(), "tau": m.tau}
    return out


def _score_from_dict(d: dict) -> FittedScore:
    kw = {}
    for name in ("mu", "rho"):
        if name in d:
            kw[name] = LinearModel(np.asarray(d[name]["coef"], float), BasisSpec(d[name]["degree"]))
    for name in ("q_lo", "q_hi"):
        if name in d:
            kw[name] = QuantileModel(np.asarray(d[name]["coef"], float), BasisSpec(d[name]["degree"]), d[name]["tau"])
    return FittedScore(ScoreKind(d["kind"]), float(d["alpha"]), **kw)


# -- pipeline ----------------------------------------------------------------

def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def _context(data, plan, fs, alpha, sources, basis, G, pooled, interpolation="step"):
    """Nuisances fit on D1 and cell probabilities on D2 for one fitted score.

    Score CDFs use D12 only, since the score models were fit on D11; the
    covariate-only ratios and propensities use all of D1.
    """
    i12 = plan.indices(Fold.D12)
    i1 = np.sort(np.r_[plan.indices(Fold.D11), i12])
    i2 = plan.indices(Fold.D2)
    X, site, obs = data.X, data.site, data.observed
    s12 = fs.score(X[i12], data.y[i12])
    cells = cell_probs_from(site[i2], obs[i2], data.num_sites, "D2")
    o12, t12 = obs[i12], site[i12]
    o1, t1 = obs[i1], site[i1]

    def cdf(name, mask, scope):
        return _stage(f"nuisance: {name} score CDF", fit_conditional_cdf, X[i12[mask]], s12[mask],
                      basis=basis, scope=scope, train_index=i12[mask], G=G, interpolation=interpolation)

    if pooled:
        m_bar = cdf("pooled", o12, "pooled")
        eta_bar = _stage("nuisance: global missingness ratio", fit_missingness_ratio, X[i1], o1,
                         basis, "global", i1)
        q0 = _stage("nuisance: target propensity", fit_site_propensity, X[i1[~o1]], t1[~o1],
                    basis, i1[~o1])
        return _stage("influence context", InfluenceContext, alpha, cells, fs, m_bar=m_bar,
                      eta_bar=eta_bar, q0=q0)

    cdfs = {0: cdf("target", (t12 == 0) & o12, "site 0")}
    t0 = t1 == 0
    eta0 = _stage("nuisance: target missingness ratio", fit_missingness_ratio, X[i1[t0]], o1[t0],
                  basis, "site 0", i1[t0])
    a = i1[t0 & ~o1]
    omega = {}
    for k in sources:
        cdfs[k] = cdf(f"site {k}", (t12 == k) & o12, f"site {k}")
        b = i1[(t1 == k) & o1]
        omega[k] = _stage(f"nuisance: site {k} density ratio", fit_density_ratio, X[a], X[b], k, basis,
                          np.r_[a, b])
    return _stage("influence context", InfluenceContext, alpha, cells, fs, cdfs=cdfs, eta0=eta0, omega=omega)


def _usable_sources(data, plan, drop_sites):
    i12, i2 = plan.indices(Fold.D12), plan.indices(Fold.D2)
    keep, dropped = [], []
    for k in range(1, data.num_sites):
        ok = all(np.any((data.site[i] == k) & data.observed[i]) for i in (i12, i2))
        if k in drop_sites:
            dropped.append(k)
        elif not ok:
            warnings.warn(f"source site {k} has no observed outcomes in a fitting fold; "
                          "it is dropped and gets weight 0", DroppedSiteWarning, stacklevel=3)
            dropped.append(k)
        else:
            keep.append(k)
    return keep, dropped


def fit_methods(data: Dataset, alpha: float, kind, methods, seed: int = 0, G: int = DEFAULT_GRID_SIZE,
                degree: int = 2, drop_sites=(), interpolation: str = "step") -> dict:
    """Fit several methods on one split; returns ``{method.label: FittedPredictor}``.

    Every method shares the score models fit on the target's observed D11
    rows, so intervals differ only through the threshold.
    """
    if not 0 < alpha < 0.5:
        raise ValueError(f"miscoverage alpha must lie in (0, 0.5), got {alpha}")
    kind = ScoreKind(kind)
    methods = [MethodSpec.parse(m) if isinstance(m, str) else m for m in methods]
    basis = BasisSpec(degree)
    plan = _stage("split", split, data, seed)
    i11, i2 = plan.indices(Fold.D11), plan.indices(Fold.D2)
    X, y, site, obs = data.X, data.y, data.site, data.observed
    p = data.covariate_dim
    out = {}

    r1 = i11[(site[i11] == 0) & obs[i11]]
    fs = _stage("score model", fit_score, X[r1], y[r1], kind, alpha, degree)
    rows = EvalRows.from_dataset(data, i2, fs)

    if any(m.kind != "pooled-ccod" for m in methods):
        sources, dropped = _usable_sources(data, plan, set(drop_sites))
        ctx = _context(data, plan, fs, alpha, sources, basis, G, False, interpolation)
        q = _stage("site quantiles", site_quantiles, ctx, rows, data.num_sites, sources=sources)
        active = ~np.isnan(q.r_hat[1:])
        lc = None
        for m in methods:
            if m.kind == "pooled-ccod":
                continue
            if m.kind == "target-only":
                diag = Diagnostics(tuple(q.r_hat), tuple(q.chi), dropped=tuple(dropped))
                out[m.label] = FittedPredictor(fs, float(q.r_hat[0]), alpha, m, diag, p, seed)
                continue
            if lc is None:
                lc = _stage("weights", build_loss, rows, ctx, q)
            if m.scheme is WeightScheme.EQUAL:
                lam = 0.0
            elif m.lam is not None:
                lam = float(m.lam)
            else:
                grid = (default_lambda_grid(lc.n) if m.lambda_factors is None
                        else np.asarray(m.lambda_factors, float) * lc.n)
                lam = _stage("lambda cross-validation", cv_lambda, lc, m.scheme, grid, m.folds,
                             seed, m.form, active)
            fw = _stage("weights", optimize_weights, lc, lam, m.scheme, m.form, active)
            diag = Diagnostics(tuple(q.r_hat), tuple(q.chi), tuple(fw.w), lam, dropped=tuple(dropped))
            out[m.label] = FittedPredictor(fs, aggregate(q, fw), alpha, m, diag, p, seed)

    for m in methods:
        if m.kind != "pooled-ccod":
            continue
        ctx_p = _context(data, plan, fs, alpha, (), basis, G, True, interpolation)
        r = _stage("pooled quantile", solve_quantile, "ccod", rows, ctx_p)
        out[m.label] = FittedPredictor(fs, r, alpha, m, Diagnostics((), (), r_ccod=r), p, seed)
    return out


def fit_context(data: Dataset, alpha: float, kind, seed: int = 0, G: int = DEFAULT_GRID_SIZE,
                degree: int = 2, pooled: bool = False, interpolation: str = "step"):
    """The fitted nuisances and D2 evaluation rows behind one fit.

    Returns ``(ctx, rows, plan)``; with ``pooled=False`` the context carries
    every usable source site.
    """
    basis = BasisSpec(degree)
    plan = split(data, seed)
    i11 = plan.indices(Fold.D11)
    r1 = i11[(data.site[i11] == 0) & data.observed[i11]]
    fs = fit_score(data.X[r1], data.y[r1], ScoreKind(kind), alpha, degree)
    rows = EvalRows.from_dataset(data, plan.indices(Fold.D2), fs)
    sources = () if pooled else _usable_sources(data, plan, set())[0]
    return _context(data, plan, fs, alpha, sources, basis, G, pooled, interpolation), rows, plan


def musci_fit(data: Dataset, alpha: float, kind, method: MethodSpec | str = "fed2", seed: int = 0,
              **kw) -> FittedPredictor:
    method = MethodSpec.parse(method) if isinstance(method, str) else method
    return fit_methods(data, alpha, kind, [method], seed, **kw)[method.label]


def predict_interval(fp: FittedPredictor, x) -> Interval:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != fp.covariate_dim:
        raise ValueError(f"expected {fp.covariate_dim} covariates, got {x.size}")
    return invert(fp.score, x, fp.r_hat)
