"""Multi-site data with missing outcomes: storage, CSV I/O, fold splitting."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    covariates: tuple
    site: int
    observed: bool
    outcome: float | None = None

    def __post_init__(self):
        if self.observed != (self.outcome is not None):
            raise SchemaError("outcome must be present exactly when observed is true")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of ``n`` observations ``(X, T, R, RY)`` from ``num_sites`` sites.

    ``y`` holds NaN where the outcome is missing. Site 0 is the target.
    """

    X: np.ndarray
    site: np.ndarray
    observed: np.ndarray
    y: np.ndarray
    num_sites: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        site = np.asarray(self.site, dtype=int)
        observed = np.asarray(self.observed, dtype=bool)
        y = np.asarray(self.y, dtype=float)
        n = len(site)
        if X.shape[0] != n or observed.shape != (n,) or y.shape != (n,):
            raise SchemaError("column lengths disagree")
        if X.shape[1] < 1:
            raise SchemaError("need at least one covariate")
        if self.num_sites < 1:
            raise SchemaError("need at least one site")
        if n and (site.min() < 0 or site.max() >= self.num_sites):
            raise SchemaError(f"site labels must lie in 0..{self.num_sites - 1}")
        if np.any(np.isnan(y) == observed):
            raise SchemaError("outcome must be present exactly when observed is true")
        if not np.any((site == 0) & ~observed):
            raise SchemaError("target site 0 has no missing outcomes to predict")
        for name, arr in (("X", X), ("site", site), ("observed", observed), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.site)

    @property
    def covariate_dim(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_observations(cls, observations, num_sites=None) -> "Dataset":
        obs = list(observations)
        if not obs:
            raise SchemaError("empty dataset")
        K = num_sites if num_sites is not None else 1 + max(o.site for o in obs)
        p = len(obs[0].covariates)
        if any(len(o.covariates) != p for o in obs):
            raise SchemaError("covariate vectors differ in length")
        return cls(
            X=np.array([o.covariates for o in obs], dtype=float).reshape(len(obs), p),
            site=np.array([o.site for o in obs]),
            observed=np.array([o.observed for o in obs]),
            y=np.array([np.nan if o.outcome is None else o.outcome for o in obs]),
            num_sites=K,
        )

    def observation(self, i: int) -> Observation:
        r = bool(self.observed[i])
        return Observation(
            tuple(float(v) for v in self.X[i]), int(self.site[i]), r, float(self.y[i]) if r else None
        )

    @property
    def observations(self) -> list[Observation]:
        return [self.observation(i) for i in range(self.n)]


# -- CSV ---------------------------------------------------------------------

def load_csv(path) -> Dataset:
    """Read ``site,observed,y,x1..xp``; ``y`` is empty exactly when ``observed`` is 0."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        p = len(header) - 3
        expected = ["site", "observed", "y"] + [f"x{j + 1}" for j in range(p)]
        if p < 1 or header != expected:
            raise SchemaError(f"{path}: header must be site,observed,y,x1..xp; got {','.join(header)}")
        sites, obs, ys, xs = [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != p + 3:
                raise SchemaError(f"{path}:{line}: expected {p + 3} fields, got {len(row)}")
            try:
                s = int(row[0])
                r = int(row[1])
                x = [float(v) for v in row[3:]]
                yv = float(row[2]) if row[2].strip() != "" else None
            except ValueError as exc:
                raise SchemaError(f"{path}:{line}: cannot parse row ({exc})") from None
            if r not in (0, 1):
                raise SchemaError(f"{path}:{line}: observed must be 0 or 1")
            if s < 0:
                raise SchemaError(f"{path}:{line}: negative site label")
            if r == 0 and yv is not None:
                raise SchemaError(f"{path}:{line}: outcome present but observed = 0")
            if r == 1 and yv is None:
                raise SchemaError(f"{path}:{line}: outcome missing but observed = 1")
            sites.append(s)
            obs.append(r == 1)
            ys.append(np.nan if yv is None else yv)
            xs.append(x)
    if not sites:
        raise SchemaError(f"{path}: no data rows")
    K = 1 + max(sites)
    missing = sorted(set(range(K)) - set(sites))
    if missing:
        raise SchemaError(f"{path}: site labels are not contiguous; absent: {missing}")
    return Dataset(np.array(xs).reshape(len(xs), p), np.array(sites), np.array(obs), np.array(ys), K)


def write_csv(data: Dataset, path) -> None:
    """Inverse of :func:`load_csv`; floats use shortest round-trip repr."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "observed", "y"] + [f"x{j + 1}" for j in range(data.covariate_dim)])
        for i in range(data.n):
            r = bool(data.observed[i])
            w.writerow(
                [int(data.site[i]), int(r), repr(float(data.y[i])) if r else ""]
                + [repr(float(v)) for v in data.X[i]]
            )


# -- splitting ---------------------------------------------------------------

class Fold(IntEnum):
    D11 = 0
    D12 = 1
    D2 = 2


@dataclass(frozen=True, eq=False)
class SplitPlan:
    assignment: np.ndarray  # Fold value per observation
    seed: int

    def indices(self, fold: Fold) -> np.ndarray:
        return np.flatnonzero(self.assignment == int(fold))

    def __eq__(self, other):
        return (
            isinstance(other, SplitPlan)
            and self.seed == other.seed
            and np.array_equal(self.assignment, other.assignment)
        )


def _cells(data: Dataset) -> np.ndarray:
    return data.site * 2 + data.observed.astype(int)


def _round_split(counts, total, rng, prefer):
    """Give each cell floor(c/2) or ceil(c/2) so that the parts sum to ``total``.

    Odd cells flagged in ``prefer`` are first in line for the ceil.
    """
    counts = np.asarray(counts)
    base = counts // 2
    odd = np.flatnonzero(counts % 2 == 1)
    extra = total - int(base.sum())
    order = rng.permutation(odd)
    order = np.concatenate([order[prefer[order]], order[~prefer[order]]])
    base[order[:extra]] += 1
    return base


def split(data: Dataset, seed: int) -> SplitPlan:
    """Stratified random split into D11 / D12 / D2 by (site, observed) cell.

    ``|D2| = ceil(n/2)`` and D1 is halved with ``|D11| = floor(|D1|/2)``.
    Cells with at least three members land in every fold whenever the global
    fold sizes allow it.
    """
    n = data.n
    if n < 8:
        raise InsufficientDataError(f"need at least 8 observations to split, got {n}")
    rng = np.random.default_rng(seed)
    cells = _cells(data)
    labels = np.unique(cells)
    members = [np.flatnonzero(cells == c) for c in labels]
    counts = np.array([len(m) for m in members])

    n2 = math.ceil(n / 2)
    n1 = n - n2
    n11 = n1 // 2
    d1 = _round_split(counts, n1, rng, prefer=counts == 3)
    d11 = _round_split(d1, n11, rng, prefer=np.zeros(len(d1), bool))

    assignment = np.empty(n, dtype=int)
    for idx, a, b in zip(members, d11, d1):
        perm = rng.permutation(idx)
        assignment[perm[:a]] = Fold.D11
        assignment[perm[a:b]] = Fold.D12
        assignment[perm[b:]] = Fold.D2
    assignment.setflags(write=False)
    return SplitPlan(assignment, int(seed))


@dataclass(frozen=True)
class CellProbabilities:
    probs: dict  # (site, observed) -> P(T = site, R = observed)
    fold: str = ""

    def __getitem__(self, key) -> float:
        k, r = key
        return self.probs[(int(k), int(r))]


def cell_probs(data: Dataset, plan: SplitPlan | None, fold=None) -> CellProbabilities:
    """Empirical P(T=k, R=r) on one fold (or the whole dataset if ``plan`` is None)."""
    idx = np.arange(data.n) if plan is None else plan.indices(Fold[fold] if isinstance(fold, str) else fold)
    return cell_probs_from(data.site[idx], data.observed[idx], data.num_sites, str(fold or "all"))


def cell_probs_from(site, observed, num_sites, fold="") -> CellProbabilities:
    m = len(site)
    if m == 0:
        raise InsufficientDataError(f"fold {fold} is empty")
    counts = np.zeros((num_sites, 2), dtype=int)
    np.add.at(counts, (np.asarray(site), np.asarray(observed).astype(int)), 1)
    probs = {(k, r): counts[k, r] / m for k in range(num_sites) for r in (0, 1)}
    return CellProbabilities(probs, fold)
