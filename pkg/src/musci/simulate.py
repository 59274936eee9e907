"""Synthetic multi-site experiments: data generation, Monte Carlo runs, metrics."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import __version__
from .dataset import Dataset
from .predict import MethodSpec, fit_methods
from .scores import ScoreKind

log = logging.getLogger(__name__)

NUM_SITES = 5
N_TEST = 2000
ORACLE_WIDTH = 3.29
LOCAL_GRID = 50
LOCAL_BANDWIDTH = 0.1

# latent-covariate (mean, variance) per site
COVARIATE_SHIFTS = {
    "homogeneous": [(0, 1)] * 5,
    "weak": [(0, 1), (0, 1), (2, 1), (2, 4), (3, 1)],
    "strong": [(0, 1), (1, 1), (2, 4), (3, 1), (4, 4)],
}
CONCEPT_SHIFTS = {"holds": 0.0, "weak": 7.0, "strong": 20.0}
ERROR_TYPES = ("homoscedastic", "heteroscedastic")
PROPENSITY_RANGES = ("narrow", "wide")
DEFAULT_METHODS = ("fed1", "fed2", "fed3", "equal", "target-only", "pooled")


@dataclass(frozen=True)
class ScenarioConfig:
    n_k: int = 300
    covariate_shift: str = "homogeneous"
    error_type: str = "homoscedastic"
    concept_shift: str = "holds"
    score: str = "asr"
    alpha: float = 0.1
    methods: tuple = DEFAULT_METHODS
    replications: int = 10
    seed: int = 0
    propensity_range: str = "narrow"
    grid_size: int = 40
    lam: float | None = None  # None: cross-validated
    n_test: int = N_TEST
    interpolation: str = "step"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.n_k < 50:
            raise ValueError("n_k must be at least 50")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if self.covariate_shift not in COVARIATE_SHIFTS:
            raise ValueError(f"covariate_shift must be one of {sorted(COVARIATE_SHIFTS)}")
        if self.concept_shift not in CONCEPT_SHIFTS:
            raise ValueError(f"concept_shift must be one of {sorted(CONCEPT_SHIFTS)}")
        if self.error_type not in ERROR_TYPES:
            raise ValueError(f"error_type must be one of {ERROR_TYPES}")
        if self.propensity_range not in PROPENSITY_RANGES:
            raise ValueError(f"propensity_range must be one of {PROPENSITY_RANGES}")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")
        ScoreKind(self.score)
        for m in self.methods:
            MethodSpec.parse(m)

    @property
    def name(self) -> str:
        return (f"n{self.n_k}-{self.covariate_shift}-{self.error_type}-{self.concept_shift}"
                f"-{self.score}-{self.propensity_range}")

    def method_specs(self) -> list[MethodSpec]:
        return [MethodSpec.parse(m, lam=self.lam) if MethodSpec.parse(m).kind == "federated"
                else MethodSpec.parse(m) for m in self.methods]


# -- data generating process -------------------------------------------------

def propensity(x, kind: str = "narrow"):
    x = np.asarray(x, dtype=float)
    if kind == "narrow":
        return 1.0 / (1.0 + np.exp(-0.1 + 0.5 * x - 0.1 * x**2))
    # stand-in for the wider (0.1, 0.9) range; coefficients are not published
    return np.clip(expit(4 * (x - 0.5) * 2.2), 0.1, 0.9)


def sigma(x, error_type: str):
    x = np.asarray(x, dtype=float)
    return np.ones_like(x) if error_type == "homoscedastic" else -np.log(x)


def target_mean(x):
    x = np.asarray(x, dtype=float)
    return 5 * x + x**2


def draw_latent(cfg: ScenarioConfig, site: int, n: int, rng) -> np.ndarray:
    mean, var = COVARIATE_SHIFTS[cfg.covariate_shift][site]
    return rng.normal(mean, np.sqrt(var), n)


def draw_covariates(cfg: ScenarioConfig, site: int, n: int, rng) -> np.ndarray:
    # the normal CDF rounds to exactly 1.0 above about 8.3; keep X inside (0, 1)
    x = norm.cdf(draw_latent(cfg, site, n, rng))
    return np.clip(x, np.finfo(float).tiny, np.nextafter(1.0, 0.0))


def generate_site_data(cfg: ScenarioConfig, site: int, rng, n: int | None = None):
    """``(X, R, Y)`` for one site; ``Y`` is generated for every row."""
    n = cfg.n_k if n is None else n
    x = draw_covariates(cfg, site, n, rng)
    r = rng.random(n) < propensity(x, cfg.propensity_range)
    delta = CONCEPT_SHIFTS[cfg.concept_shift] * (site != 0)
    y = target_mean(x) + delta + sigma(x, cfg.error_type) * rng.standard_normal(n)
    return x, r, y


def generate_dataset(cfg: ScenarioConfig, rng) -> Dataset:
    xs, ts, rs, ys = [], [], [], []
    for k in range(NUM_SITES):
        x, r, y = generate_site_data(cfg, k, rng)
        xs.append(x)
        ts.append(np.full(len(x), k))
        rs.append(r)
        ys.append(np.where(r, y, np.nan))
    return Dataset(np.concatenate(xs)[:, None], np.concatenate(ts), np.concatenate(rs),
                   np.concatenate(ys), NUM_SITES)


# -- metrics -----------------------------------------------------------------

def exact_coverage(lower, upper, x, error_type: str) -> np.ndarray:
    """Per-x probability that a target outcome at ``x`` falls in ``[lower, upper]``."""
    mu, sd = target_mean(x), sigma(x, error_type)
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    cov = norm.cdf((upper - mu) / sd) - norm.cdf((lower - mu) / sd)
    return np.where(upper >= lower, cov, 0.0)


def local_coverage(x, cov, grid=None, h: float = LOCAL_BANDWIDTH) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian Nadaraya-Watson smoothing of per-x coverage over a grid in (0, 1)."""
    x, cov = np.asarray(x, float), np.asarray(cov, float)
    if x.size == 0:
        raise ValueError("no coverage pairs to smooth")
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    grid = local_grid() if grid is None else np.asarray(grid, float)
    logk = -0.5 * ((grid[:, None] - x[None, :]) / h) ** 2
    logk -= logk.max(axis=1, keepdims=True)
    k = np.exp(logk)
    curve = (k @ cov) / k.sum(axis=1)
    return grid, np.clip(curve, 0.0, 1.0)


def local_grid(m: int = LOCAL_GRID) -> np.ndarray:
    return (np.arange(m) + 0.5) / m


# -- Monte Carlo -------------------------------------------------------------

@dataclass
class MethodResult:
    coverage: float
    width: float
    r_hat: float
    weights: tuple | None
    chi2: tuple
    lam: float | None
    local: np.ndarray = field(repr=False, default=None)


@dataclass
class ReplicationResult:
    rep: int
    seed: int
    methods: dict  # label -> MethodResult
    error: str | None = None


def replication_seed(base: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(base), int(rep)]).generate_state(1)[0])


def run_replication(cfg: ScenarioConfig, rep: int) -> ReplicationResult:
    seed = replication_seed(cfg.seed, rep)
    rng = np.random.default_rng(seed)
    try:
        data = generate_dataset(cfg, rng)
        fits = fit_methods(data, cfg.alpha, cfg.score, cfg.method_specs(), seed=seed, G=cfg.grid_size,
                           interpolation=cfg.interpolation)
    except Exception as exc:  # recorded and excluded from the summary
        log.warning("replication %d failed: %s", rep, exc)
        return ReplicationResult(rep, seed, {}, f"{type(exc).__name__}: {exc}")
    x_test = draw_covariates(cfg, 0, cfg.n_test, rng)
    out = {}
    for label, fp in fits.items():
        lo, hi = fp.bounds(x_test[:, None])
        cov = exact_coverage(lo, hi, x_test, cfg.error_type)
        width = np.maximum(hi - lo, 0.0)
        _, curve = local_coverage(x_test, cov)
        d = fp.diagnostics
        out[label] = MethodResult(float(cov.mean()), float(width.mean()), fp.r_hat, d.weights,
                                  tuple(float(c) ** 2 for c in d.chi), d.lam, curve)
    log.info("replication %d done", rep)
    return ReplicationResult(rep, seed, out)


def _run_one(args):
    return run_replication(*args)


def run_replications(cfg: ScenarioConfig, workers: int = 1) -> list[ReplicationResult]:
    jobs = [(cfg, r) for r in range(cfg.replications)]
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        results = list(ex.map(_run_one, jobs))
    return sorted(results, key=lambda r: r.rep)


@dataclass
class MethodSummary:
    method: str
    n_ok: int
    cp_mean: float
    cp_sd: float
    width_mean: float
    width_sd: float
    local: np.ndarray = field(repr=False, default=None)


@dataclass
class ScenarioSummary:
    config: ScenarioConfig
    methods: dict  # label -> MethodSummary
    failures: int
    replications: list = field(repr=False, default_factory=list)
    oracle_width: float = ORACLE_WIDTH


def summarize(cfg: ScenarioConfig, results: list[ReplicationResult]) -> ScenarioSummary:
    ok = [r for r in results if r.error is None]
    labels = [MethodSpec.parse(m).label for m in cfg.methods]
    methods = {}
    for label in labels:
        rows = [r.methods[label] for r in ok if label in r.methods]
        if not rows:
            continue
        cp = np.array([m.coverage for m in rows])
        wd = np.array([m.width for m in rows])
        sd = (lambda v: float(v.std(ddof=1)) if v.size > 1 else 0.0)
        methods[label] = MethodSummary(label, len(rows), float(cp.mean()), sd(cp), float(wd.mean()), sd(wd),
                                       np.mean([m.local for m in rows], axis=0))
    return ScenarioSummary(cfg, methods, len(results) - len(ok), results)


def run_scenario(cfg: ScenarioConfig, workers: int = 1) -> ScenarioSummary:
    return summarize(cfg, run_replications(cfg, workers))


# -- CSV output ----------------------------------------------------------------

SCENARIO_COLUMNS = ["scenario", "method", "replications", "failures", "cp_mean", "cp_sd",
                    "width_mean", "width_sd", "oracle_width"]
REPLICATION_COLUMNS = ["scenario", "rep", "seed", "method", "coverage", "width", "threshold", "lambda"]
LOCAL_COLUMNS = ["scenario", "method", "x", "coverage"]
WEIGHT_COLUMNS = ["scenario", "rep", "method", "site", "weight", "chi2"]


def _f(v):
    return "" if v is None else repr(float(v))


def write_outputs(summaries: list[ScenarioSummary], out_dir, extra_meta: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def writer(name, header):
        fh = (out / name).open("w", newline="", encoding="utf-8")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        return fh, w

    files = {n: writer(n, h) for n, h in (
        ("scenario.csv", SCENARIO_COLUMNS), ("replications.csv", REPLICATION_COLUMNS),
        ("local_coverage.csv", LOCAL_COLUMNS), ("weights.csv", WEIGHT_COLUMNS))}
    grid = local_grid()
    try:
        for s in summaries:
            name = s.config.name
            for label in [MethodSpec.parse(m).label for m in s.config.methods]:
                m = s.methods.get(label)
                if m is None:  # every replication failed for this method
                    files["scenario.csv"][1].writerow([name, label, 0, s.failures, "", "", "", "",
                                                       _f(s.oracle_width)])
                    continue
                files["scenario.csv"][1].writerow([name, label, m.n_ok, s.failures, _f(m.cp_mean), _f(m.cp_sd),
                                                   _f(m.width_mean), _f(m.width_sd), _f(s.oracle_width)])
                for x, c in zip(grid, m.local):
                    files["local_coverage.csv"][1].writerow([name, label, _f(x), _f(c)])
            for r in s.replications:
                for label, m in r.methods.items():
                    files["replications.csv"][1].writerow([name, r.rep, r.seed, label, _f(m.coverage),
                                                           _f(m.width), _f(m.r_hat), _f(m.lam)])
                    if m.weights is not None:
                        chi2 = (None,) + tuple(m.chi2)
                        for k, wk in enumerate(m.weights):
                            files["weights.csv"][1].writerow([name, r.rep, label, k, _f(wk), _f(chi2[k])])
    finally:
        for fh, _ in files.values():
            fh.close()

    meta = {
        "version": __version__,
        "scenarios": [asdict(s.config) for s in summaries],
        "failures": {s.config.name: [{"rep": r.rep, "seed": r.seed, "error": r.error}
                                     for r in s.replications if r.error] for s in summaries},
    }
    if any(s.config.propensity_range == "wide" for s in summaries):
        meta["propensity_note"] = ("wide propensity range uses a stand-in model: "
                                   "clip(expit(8.8 * (x - 0.5)), 0.1, 0.9)")
    meta.update(extra_meta or {})
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
