import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from seqsearch.population import (
    DEFAULT_TABLE, N_SPINS, SAME_T1_TABLE, TISSUES, TissueTable, nominal_voxels, sample_population,
    spin_grid, stratified_indices,
)


def dense_fid(t2prime, spread, t, n=100_000, seed=0):
    """Monte-Carlo free-induction decay of Lorentzian + flat offsets."""
    rng = np.random.default_rng(seed)
    f = np.zeros(n)
    if np.isfinite(t2prime):
        f += rng.standard_cauchy(n) * 1e3 / (2 * np.pi * t2prime)
    f += rng.uniform(-spread, spread, n)
    return np.abs(np.exp(-2j * np.pi * np.outer(t * 1e-3, f)).mean(axis=1))


def grid_fid(t2prime, spread, t):
    f = spin_grid(np.array([t2prime]), spread)[0]
    return np.abs(np.exp(-2j * np.pi * np.outer(t * 1e-3, f)).mean(axis=1))


# -- spin grid -------------------------------------------------------------------


def test_grid_disabled_is_zero():
    assert np.all(spin_grid(np.inf, 0.0) == 0.0)
    assert spin_grid(np.array([100.0, np.inf]), 30.0).shape == (2, N_SPINS)


def test_linear_spread_midpoints():
    f = spin_grid(np.inf, 30.0)
    assert len(np.unique(f)) == N_SPINS
    assert f.min() == pytest.approx(-30.0 * (N_SPINS - 1) / N_SPINS)
    assert f.max() == pytest.approx(30.0 * (N_SPINS - 1) / N_SPINS)
    np.testing.assert_allclose(np.diff(np.sort(f)), 60.0 / N_SPINS)


@given(st.floats(5.0, 1e4), st.floats(0.0, 60.0))
def test_grid_symmetric(t2p, spread):
    f = np.sort(spin_grid(np.array([t2p]), spread)[0])
    np.testing.assert_allclose(f, -f[::-1], atol=1e-9 * (1 + np.abs(f).max()))


def test_lorentzian_quantiles_scale_with_t2prime():
    a = np.sort(spin_grid(np.array([100.0]), 0.0)[0])
    b = np.sort(spin_grid(np.array([200.0]), 0.0)[0])
    np.testing.assert_allclose(a, 2 * b)
    # midpoint quantiles of a Cauchy with half width 1/(2 pi T2')
    assert np.median(np.abs(a)) == pytest.approx(1e3 / (2 * np.pi * 100.0), rel=0.02)


@pytest.mark.parametrize("t2p", [161.0, 170.0])
def test_lorentzian_fid_matches_dense_oracle(t2p):
    t = np.linspace(0, t2p, 60)
    oracle = dense_fid(t2p, 0.0, t)
    assert np.max(np.abs(oracle - np.exp(-t / t2p))) < 0.01
    assert np.max(np.abs(grid_fid(t2p, 0.0, t) - oracle)) < 0.035


@pytest.mark.xfail(strict=True, reason="256 deterministic spins resolve the Lorentzian cusp to ~2.5%, not 2%")
def test_lorentzian_fid_within_two_percent():
    t = np.linspace(0, 170.0, 200)
    assert np.max(np.abs(grid_fid(170.0, 0.0, t) - np.exp(-t / 170.0))) <= 0.02


def test_combined_fid_early_times():
    t2p = 170.0
    t = np.linspace(0, 0.3 * t2p, 40)
    oracle = dense_fid(t2p, 30.0, t)
    assert np.max(np.abs(grid_fid(t2p, 30.0, t) - oracle)) < 0.035


# -- populations -------------------------------------------------------------------


def test_three_voxels_one_per_tissue():
    b = sample_population(3, 5)
    assert sorted(b.tissue.tolist()) == [0, 1, 2]
    with pytest.raises(ValueError):
        sample_population(2, 5)


def test_deterministic():
    a, b = sample_population(500, 11), sample_population(500, 11)
    for name in ("tissue", "m0", "t1", "t2", "t2prime", "b1", "db0"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.t1, sample_population(500, 12).t1)


@pytest.fixture(scope="module")
def big():
    return sample_population(100_000, 3)


def test_tissue_means(big):
    for code, name in enumerate(TISSUES):
        sel = big.tissue == code
        p = DEFAULT_TABLE.tissues[name]
        for attr, (mean, std) in (("t1", p.t1), ("t2", p.t2), ("t2prime", p.t2prime), ("m0", p.m0)):
            vals = getattr(big, attr)[sel]
            se = std / np.sqrt(sel.sum())
            assert abs(vals.mean() - mean) <= 3 * se + 1e-12, (name, attr)
    gm_t1 = big.t1[big.tissue == 0].mean()
    assert abs(gm_t1 - 1331.0) < 5.0


def test_population_invariants(big):
    assert np.all(big.m0[big.tissue == 2] == 1.0)
    assert np.all((big.t2 > 0) & (big.t2 < big.t1))
    assert np.all(big.t2prime > 0)
    assert np.all((big.m0 > 0) & (big.m0 <= 1.05))
    assert big.b1.min() >= 0.8 and big.b1.max() <= 1.2
    assert big.db0.min() >= -50 and big.db0.max() <= 50
    counts = big.counts()
    assert max(counts.values()) - min(counts.values()) <= 1


def test_same_t1_table():
    for name in ("GM", "WM"):
        assert SAME_T1_TABLE.tissues[name].t1 == (1000.0, 50.0)
    assert SAME_T1_TABLE.tissues["CSF"] == DEFAULT_TABLE.tissues["CSF"]


def test_table_json_round_trip(tmp_path):
    path = tmp_path / "table.json"
    path.write_text(json.dumps(SAME_T1_TABLE.to_dict()))
    assert TissueTable.load(path) == SAME_T1_TABLE
    bad = SAME_T1_TABLE.to_dict()
    del bad["tissues"]["CSF"]
    with pytest.raises(ValueError):
        TissueTable.from_dict(bad)


def test_nominal_voxels(nominal):
    assert nominal.t1.tolist() == [1331.0, 832.0, 4000.0]
    assert nominal.b1.tolist() == [1.0, 1.0, 1.0]
    assert nominal.offsets.shape == (3, N_SPINS)


@given(st.integers(3, 400), st.integers(0, 2 ** 32 - 1))
def test_stratified_indices(size, seed):
    pop = sample_population(30, 0)
    idx = stratified_indices(pop.tissue, size, np.random.default_rng(seed))
    assert len(idx) == size
    t = pop.tissue[idx]
    assert np.sum(t == 0) == np.sum(t == 1) >= 1
    assert np.sum(t == 2) >= 1


def test_with_field_resets_offsets(nominal):
    shifted = nominal.with_field(db0=10.0)
    np.testing.assert_allclose(shifted.offsets - nominal.offsets, 10.0)
    sub = nominal.subset([2, 2])
    assert sub.tissue.tolist() == [2, 2]
