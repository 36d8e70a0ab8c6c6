import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hcm.core import ANGLE_SPREAD_CAP_DEG, LSP_NAMES, Condition, ConfigError, QueryError
from hcm.lsp import (LspField, LspMapSet, correlate_normals, field_from_bytes, field_to_bytes, field_to_csv,
                     generate_lsp_field, generate_map_set, lsps_from_normals, physical_lsps, psd_cholesky,
                     sample_lsps, value_at)
from hcm.rng import substream
from hcm.scenarios import builtin_scenarios

from lsp_oracles import (axis_autocorrelation, decorrelated_subsample, interpolated_structure,
                         random_psd_correlation, sample_correlation)


def _field(seed=0, shape=(800, 800), cell=5.0, d_corr=50.0):
    return generate_lsp_field(shape, (0.0, 0.0), cell, d_corr, substream(seed, "test-field"))


@pytest.fixture(scope="module")
def big_field():
    return _field()


def test_zero_lag_is_one(big_field):
    assert axis_autocorrelation(big_field.grid, 0) == 1.0
    assert np.mean(big_field.grid ** 2) == pytest.approx(1.0)
    assert abs(np.mean(big_field.grid)) < 1e-12


def test_correlation_at_d_corr(big_field):
    # 4000 m x 4000 m, cell 5 m, d_corr 50 m
    assert axis_autocorrelation(big_field.grid, 10) == pytest.approx(math.exp(-1.0), abs=0.05)


def test_independent_streams_uncorrelated(big_field):
    other = _field(seed=1)
    assert abs(sample_correlation(big_field.grid, other.grid)) < 0.02


def test_sampling_rule():
    with pytest.raises(ConfigError):
        generate_lsp_field((10, 10), (0, 0), 30.0, 50.0, substream(0, "x"))


def test_field_deterministic():
    a = _field(seed=3, shape=(64, 64))
    b = _field(seed=3, shape=(64, 64))
    assert np.array_equal(a.grid, b.grid)


def test_ks_on_decorrelated_subsample(big_field):
    # points 250 m = 5 d_corr apart are practically independent
    sample = decorrelated_subsample(big_field.grid, 50)
    assert stats.kstest(sample, "norm").pvalue > 0.01


@pytest.mark.xfail(strict=True, reason="flattened correlated field has ~1e3 effective samples, not 6.4e5; "
                                       "naive KS critical value does not apply")
def test_ks_flattened_field_literal(big_field):
    flat = big_field.grid.ravel()
    d = stats.kstest(flat, "norm").statistic
    assert d < stats.kstwo.ppf(0.99, flat.size)


# -- interpolation ----------------------------------------------------------

def _tiny():
    g = np.arange(12, dtype=float).reshape(3, 4)
    return LspField(g, (10.0, 20.0), 2.0, 100.0, "DS", Condition.LOS)


def test_value_on_grid_point():
    f = _tiny()
    assert value_at(f, (14.0, 22.0)) == f.grid[1, 2]


def test_value_at_cell_centre():
    f = _tiny()
    assert value_at(f, (11.0, 21.0)) == pytest.approx(np.mean(f.grid[0:2, 0:2]))


def test_value_clamped_outside():
    f = _tiny()
    assert value_at(f, (-100.0, -100.0)) == f.grid[0, 0]
    assert value_at(f, (1000.0, 21.0)) == pytest.approx(0.5 * (f.grid[0, 3] + f.grid[1, 3]))
    assert value_at(f, (1000.0, 1000.0)) == f.grid[2, 3]


# -- cross-correlation + transform -----------------------------------------

def _params(matrix=None):
    p = builtin_scenarios()["urban_v2v"].los
    if matrix is not None:
        from dataclasses import replace
        p = replace(p, cross_correlation=np.asarray(matrix, dtype=float))
    return p


def test_identity_median_case():
    p = _params(np.eye(5))
    s = lsps_from_normals(np.zeros(5), p)
    assert s.delay_spread == 10 ** p.lsp["DS"].mu
    assert s.k_factor == p.lsp["K"].mu
    assert s.shadow_fading == 0.0


def test_rank_one_matrix():
    L = psd_cholesky(np.ones((5, 5)))
    assert np.allclose(L @ L.T, np.ones((5, 5)))
    g = correlate_normals([0.7, -1.2, 3.0, 0.1, 0.2], _params(np.ones((5, 5))))
    assert np.allclose(g, g[0])


def test_psd_cholesky_reconstructs():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = random_psd_correlation(rng)
        L = psd_cholesky(m)
        assert np.allclose(L @ L.T, m, atol=1e-12)
        assert np.allclose(L, np.tril(L))


def test_monte_carlo_cross_correlation():
    rng = np.random.default_rng(12)
    target = random_psd_correlation(rng)
    g = correlate_normals(rng.standard_normal((100_000, 5)), _params(target))
    assert np.max(np.abs(np.corrcoef(g.T) - target)) < 0.03


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5))
def test_physical_positivity_and_caps(raw):
    v = physical_lsps(correlate_normals(raw, _params()), _params())
    assert v[0] > 0
    assert 0 < v[2] <= ANGLE_SPREAD_CAP_DEG and 0 < v[3] <= ANGLE_SPREAD_CAP_DEG


# -- map sets ----------------------------------------------------------------

@pytest.fixture(scope="module")
def map_set():
    return generate_map_set("bs0", 0, builtin_scenarios()["urban_v2i"], 200.0, seed=7)


def test_map_set_shares_geometry(map_set):
    shapes = {(f.shape, f.origin, f.cell_size) for f in map_set.fields.values()}
    assert len(map_set.fields) == 10 and len(shapes) == 1


def test_los_nlos_fields_independent():
    sc = builtin_scenarios()["urban_v2i"]
    ms = generate_map_set("bs0", 0, sc, 1500.0, seed=3)
    for name in LSP_NAMES:
        r = sample_correlation(ms.fields[(name, Condition.LOS)].grid, ms.fields[(name, Condition.NLOS)].grid)
        assert abs(r) < 0.02


def test_band_and_tx_give_different_maps(map_set):
    sc = builtin_scenarios()["urban_v2i"]
    other_band = generate_map_set("bs0", 1, sc, 200.0, seed=7)
    other_tx = generate_map_set("bs1", 0, sc, 200.0, seed=7)
    key = ("SF", Condition.LOS)
    assert not np.array_equal(map_set.fields[key].grid, other_band.fields[key].grid)
    assert not np.array_equal(map_set.fields[key].grid, other_tx.fields[key].grid)


def test_sample_lsps(map_set):
    sc = builtin_scenarios()["urban_v2i"]
    s = sample_lsps(map_set, (50.0, 60.0, 1.5), Condition.NLOS, sc)
    assert s.delay_spread > 0
    assert len(s.normals) == 5
    with pytest.raises(QueryError):
        sample_lsps(None, (0, 0, 0), Condition.LOS, sc)
    with pytest.raises(QueryError):
        LspMapSet("x", 0, "y", {}).raw_normals((0, 0, 0), Condition.LOS)


def _pairs(rng, n, lo, hi, sep):
    out = []
    for p in rng.uniform(lo, hi, size=(n, 2)):
        ang = rng.uniform(0, 2 * math.pi)
        out.append((p, p + sep * np.array([math.cos(ang), math.sin(ang)])))
    return out


def _mean_sq_difference(fields, pairs):
    return float(np.mean([(value_at(f, p) - value_at(f, q)) ** 2 for f in fields for p, q in pairs]))


def test_nearby_users_coherent():
    # squared raw-normal difference at 2 m against 2 (1 - rho(2 m)), with d_corr >> 2 m
    d_corr, sep = 50.0, 2.0
    fields = [generate_lsp_field((200, 200), (0.0, 0.0), 1.0, d_corr, substream(k, "near")) for k in range(20)]
    got = _mean_sq_difference(fields, _pairs(np.random.default_rng(1), 50, 20, 180, sep))
    assert got == pytest.approx(2 * (1 - math.exp(-sep / d_corr)), abs=0.05)


@pytest.mark.parametrize("d_corr, cell", [(8.0, 4.0), (8.0, 1.0), (20.0, 2.0)])
def test_interpolated_structure_matches_exact_expectation(d_corr, cell):
    # bilinear lookup lowers the short-lag structure function below 2 (1 - rho);
    # the generated field must match the exact interpolated expectation instead
    sep = 2.0
    n = int(200 / cell) + 1
    pairs = _pairs(np.random.default_rng(2), 60, 20, 180, sep)
    fields = [generate_lsp_field((n, n), (0.0, 0.0), cell, d_corr, substream(k, "interp")) for k in range(30)]
    got = _mean_sq_difference(fields, pairs)
    want = interpolated_structure(pairs, cell, d_corr)
    assert got == pytest.approx(want, rel=0.15, abs=0.005)
    assert want < 2 * (1 - math.exp(-sep / d_corr))


def test_binary_and_csv_export():
    f = _tiny()
    blob = field_to_bytes(f)
    assert blob[:8] == b"HCMLSP01"
    assert len(blob) == 40 + 8 * f.grid.size
    grid, origin, cell = field_from_bytes(blob)
    assert np.array_equal(grid, f.grid) and origin == f.origin and cell == f.cell_size
    lines = field_to_csv(f).splitlines()
    assert lines[0] == "iy,ix,x,y,value" and len(lines) == 13
