import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from musci.dataset import (
    Dataset,
    Fold,
    InsufficientDataError,
    Observation,
    SchemaError,
    cell_probs,
    cell_probs_from,
    load_csv,
    split,
    write_csv,
)
from musci.simulate import ScenarioConfig, generate_dataset, propensity


def _write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_three_row_file(tmp_path):
    d = load_csv(_write(tmp_path, "site,observed,y,x1\n0,1,1.5,0.2\n0,0,,0.4\n1,1,2.5,0.9\n"))
    assert (d.n, d.num_sites, d.covariate_dim) == (3, 2, 1)
    assert np.isnan(d.y[1]) and d.y[0] == 1.5


def test_outcome_on_unobserved_row_rejected(tmp_path):
    with pytest.raises(SchemaError):
        load_csv(_write(tmp_path, "site,observed,y,x1\n0,0,5.0,0.3\n"))


@pytest.mark.parametrize("text", [
    "",
    "site,observed,y\n0,0,,\n",
    "observed,site,y,x1\n0,0,,0.1\n",
    "site,observed,y,x1\n0,1,,0.1\n",
    "site,observed,y,x1\n0,2,,0.1\n",
    "site,observed,y,x1\n0,0,,abc\n",
    "site,observed,y,x1\n0,0,,0.1,9\n",
    "site,observed,y,x1\n0,0,,0.1\n2,1,1.0,0.2\n",  # site 1 absent
    "site,observed,y,x1\n1,1,1.0,0.1\n0,1,2.0,0.2\n",  # no target row to predict
])
def test_schema_violations(tmp_path, text):
    with pytest.raises(SchemaError):
        load_csv(_write(tmp_path, text))


def test_round_trip_is_byte_identical(tmp_path):
    cfg = ScenarioConfig(n_k=2000, replications=1)
    data = generate_dataset(cfg, np.random.default_rng(5))
    assert data.n == 10_000
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(data, a)
    again = load_csv(a)
    write_csv(again, b)
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(again.X, data.X)
    np.testing.assert_array_equal(again.y, data.y)


def test_observation_invariant():
    with pytest.raises(SchemaError):
        Observation((0.1,), 0, True, None)
    with pytest.raises(SchemaError):
        Observation((0.1,), 0, False, 3.0)


def test_dataset_immutable(small_data):
    with pytest.raises(ValueError):
        small_data.y[0] = 1.0


def _toy(n):
    site = np.array([0, 1] * (n // 2))
    observed = np.arange(n) % 4 >= 2
    observed[0] = False
    y = np.where(observed, 1.0, np.nan)
    return Dataset(np.linspace(0, 1, n)[:, None], site, observed, y, 2)


def test_split_sizes_n8():
    plan = split(_toy(8), seed=1)
    assert [len(plan.indices(f)) for f in (Fold.D11, Fold.D12, Fold.D2)] == [2, 2, 4]


def test_split_too_small():
    with pytest.raises(InsufficientDataError):
        split(_toy(6), 0)


def test_split_deterministic(small_data):
    assert split(small_data, 9) == split(small_data, 9)
    assert split(small_data, 9) != split(small_data, 10)


def test_split_stratified_n1000():
    cfg = ScenarioConfig(n_k=200, replications=1)
    data = generate_dataset(cfg, np.random.default_rng(17))
    plan = split(data, 3)
    share = {f: len(plan.indices(f)) / data.n for f in Fold}
    for k in range(data.num_sites):
        for r in (False, True):
            members = np.flatnonzero((data.site == k) & (data.observed == r))
            for f in Fold:
                frac = np.isin(members, plan.indices(f)).mean()
                assert abs(frac - share[f]) <= 0.10 * share[f] + 1.0 / len(members)


@given(n=st.integers(8, 300), seed=st.integers(0, 2**31 - 1), frac=st.floats(0.05, 0.95))
def test_split_partition(n, seed, frac):
    rng = np.random.default_rng(seed)
    site = rng.integers(0, 3, n)
    site[:3] = [0, 1, 2]
    observed = rng.random(n) < frac
    observed[0] = False
    data = Dataset(rng.random((n, 1)), site, observed, np.where(observed, 0.0, np.nan), 3)
    plan = split(data, seed)
    parts = [plan.indices(f) for f in Fold]
    allidx = np.concatenate(parts)
    assert len(allidx) == n and len(np.unique(allidx)) == n
    assert len(parts[2]) == -(-n // 2)
    assert len(parts[0]) == (n - len(parts[2])) // 2


def test_cell_probs_examples():
    c = cell_probs_from([0, 0, 0, 0], [1, 1, 1, 1], 2)
    assert c[(0, 1)] == 1 and c[(0, 0)] == c[(1, 0)] == c[(1, 1)] == 0
    c = cell_probs_from([0, 0, 1, 1], [0, 0, 1, 1], 2)
    assert c[(0, 0)] == 0.5 and c[(1, 1)] == 0.5
    with pytest.raises(InsufficientDataError):
        cell_probs_from([], [], 2)


def test_cell_probs_match_dgp():
    cfg = ScenarioConfig(n_k=200, replications=1)
    data = generate_dataset(cfg, np.random.default_rng(8))
    c = cell_probs(data, None)
    # homogeneous covariates: X ~ U(0,1); P(R=1) = integral of e(x)
    x = (np.arange(100_000) + 0.5) / 100_000
    p_obs = propensity(x).mean()
    for k in range(5):
        assert abs(c[(k, 1)] - p_obs / 5) < 0.05
        assert abs(c[(k, 0)] - (1 - p_obs) / 5) < 0.05
    assert sum(c.probs.values()) == pytest.approx(1.0)


def test_cell_probs_per_fold_are_integer_ratios(small_data):
    plan = split(small_data, 0)
    c = cell_probs(small_data, plan, "D2")
    m = len(plan.indices(Fold.D2))
    for v in c.probs.values():
        assert abs(v * m - round(v * m)) < 1e-9
    assert sum(c.probs.values()) == pytest.approx(1.0, abs=1e-12)
