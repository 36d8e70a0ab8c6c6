"""Acceptance suite: one test per criterion, each with its runtime budget.

The terminal summary prints one PASS/FAIL line per criterion.
"""

import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from hcm.clusters import (Cluster, ClusterMemory, ClusterSet, cluster_memory_get, cluster_memory_put,
                          generate_dynamic_clusters, generate_static_clusters)
from hcm.config import ClusterSpec, Features
from hcm.core import LSP_NAMES, SPEED_OF_LIGHT, Condition
from hcm.geometry import GRAZING_TOLERANCE, segments_blocked
from hcm.harness import run
from hcm.links import situation_key
from hcm.lsp import generate_lsp_field, generate_map_set, lsps_from_normals
from hcm.mobility import AntennaConfig, Node, Trajectory
from hcm.rng import substream
from hcm.scenarios import builtin_scenarios
from hcm.synthesizer import synthesize_sample

from helpers import engine, layers, lsp_set, record, state
from lsp_oracles import axis_autocorrelation, decorrelated_subsample, random_psd_correlation
from path_oracles import two_segment_oracle

URBAN_V2V = builtin_scenarios()["urban_v2v"]
URBAN_V2I = builtin_scenarios()["urban_v2i"]
ISO = AntennaConfig.isotropic()


@contextmanager
def within(seconds):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    assert elapsed < seconds, f"took {elapsed:.2f} s, budget {seconds} s"


# -- 1 ----------------------------------------------------------------------

def _interior_samples(a, b, center, half, yaw, n_points):
    """Dense point-sampling oracle: number of samples strictly inside each box."""
    s = np.linspace(0.0, 1.0, n_points)[1:-1]
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    rel = pts - center[:, None, :]
    c, sn = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    lx = c * rel[..., 0] + sn * rel[..., 1]
    ly = -sn * rel[..., 0] + c * rel[..., 1]
    inside = (np.abs(lx) < half[:, None, 0]) & (np.abs(ly) < half[:, None, 1]) \
        & (np.abs(rel[..., 2]) < half[:, None, 2])
    return inside.sum(axis=1)


@pytest.mark.criterion(1, "LOS oracle equivalence")
def test_c01_los_oracle_equivalence():
    n_cases, n_points, chunk = 10_000, 10_001, 200
    rng = np.random.default_rng(1001)
    a = rng.uniform([-30, -30, 0], [30, 30, 20], (n_cases, 3))
    b = rng.uniform([-30, -30, 0], [30, 30, 20], (n_cases, 3))
    center = rng.uniform([-10, -10, 0], [10, 10, 10], (n_cases, 3))
    half = rng.uniform(1.0, 15.0, (n_cases, 3))
    yaw = rng.uniform(-math.pi, math.pi, n_cases)
    with within(10):
        fast = segments_blocked(a, b, center, half, yaw)
        oracle = np.concatenate([
            _interior_samples(a[i:i + chunk], b[i:i + chunk], center[i:i + chunk], half[i:i + chunk],
                              yaw[i:i + chunk], n_points) > 0
            for i in range(0, n_cases, chunk)])
    # the case mix must exercise both outcomes
    assert 0.2 < fast.mean() < 0.8
    disagree = np.flatnonzero(fast != oracle)
    assert disagree.size / n_cases < 1e-3
    # each disagreement is a clip thinner than the oracle step, or a graze within the face tolerance
    length = np.linalg.norm(b - a, axis=1)
    for i in disagree:
        sl = slice(i, i + 1)
        fine = 1_000_001
        chord = _interior_samples(a[sl], b[sl], center[sl], half[sl], yaw[sl], fine)[0] * length[i] / (fine - 1)
        grazing = (_interior_samples(a[sl], b[sl], center[sl], half[sl] - GRAZING_TOLERANCE, yaw[sl],
                                     n_points)[0] > 0) == fast[i]
        assert chord <= 2 * length[i] / (n_points - 1) or grazing


# -- 2 ----------------------------------------------------------------------

@pytest.mark.criterion(2, "LSP field statistics")
def test_c02_lsp_field_statistics():
    d_corr, cell = 50.0, 5.0
    lags_m = (5, 25, 50, 100)
    with within(60):
        acf = np.zeros(len(lags_m))
        pooled = []
        for k in range(20):
            f = generate_lsp_field((800, 800), (0.0, 0.0), cell, d_corr, substream(k, "acceptance-field"))
            acf += [axis_autocorrelation(f.grid, int(round(d / cell))) for d in lags_m]
            # stride of 250 m = 5 d_corr gives practically independent samples
            pooled.append(decorrelated_subsample(f.grid, 50))
        acf /= 20
        pvalue = stats.kstest(np.concatenate(pooled), "norm").pvalue
    for d, r in zip(lags_m, acf):
        assert r == pytest.approx(math.exp(-d / d_corr), abs=0.05), d
    assert pvalue > 0.01


# -- 3 ----------------------------------------------------------------------

@pytest.mark.criterion(3, "cross-correlation")
def test_c03_cross_correlation():
    rng = np.random.default_rng(303)
    target = random_psd_correlation(rng)
    params = replace(URBAN_V2V.nlos, cross_correlation=target)
    with within(30):
        raw = rng.standard_normal((100_000, 5))
        g = np.array([lsps_from_normals(r, params).normals for r in raw])
        got = np.corrcoef(g.T)
    assert np.max(np.abs(got - target)) <= 0.03


# -- 4 ----------------------------------------------------------------------

@pytest.mark.criterion(4, "delay-spread consistency")
def test_c04_delay_spread_consistency():
    ds = 100e-9
    with within(10):
        spreads = []
        for k in range(2000):
            cs = generate_static_clusters(lsp_set(ds=ds), state(los=Condition.NLOS), URBAN_V2V.nlos,
                                          substream(k, "acceptance-ds"))
            p = np.array([c.power for c in cs.clusters])
            d = np.array([c.delay for c in cs.clusters])
            m = np.sum(p * d)
            spreads.append(math.sqrt(np.sum(p * d * d) - m * m))
    assert np.median(spreads) == pytest.approx(ds, rel=0.15)


# -- 5 ----------------------------------------------------------------------

@pytest.mark.criterion(5, "K-factor split exactness")
def test_c05_k_factor_split():
    with within(1):
        for k_db in (0.0, 3.0, 10.0):
            cs = generate_static_clusters(lsp_set(k=k_db), state(los=Condition.LOS), URBAN_V2V.los,
                                          substream(int(k_db), "acceptance-k"))
            direct = sum(c.power for c in cs.clusters if c.kind == "direct")
            scatter = sum(c.power for c in cs.clusters if c.kind == "static")
            assert direct / scatter == pytest.approx(10 ** (k_db / 10), rel=1e-12)


# -- 6 ----------------------------------------------------------------------

@pytest.mark.criterion(6, "Doppler analytic check")
def test_c06_head_on_doppler():
    v, f, h = 30.0, 5.9e9, 1e-6
    direct = Cluster("los", "direct", 0.0, 1.0, 0.0, 180.0)

    def tap(t):
        st = state(t=t, tx=(0, 0, 1.5), rx=(200.0 - v * t, 0.0, 1.5), v_rx=(-v, 0, 0))
        cs = ClusterSet(0, t, (direct,), st.los, "urban_v2v", st.distance_3d / SPEED_OF_LIGHT)
        return synthesize_sample(cs, st, ISO, ISO, f, shadow_fading_db=0.0).amplitudes[0, 0, 0]

    with within(1):
        nu = np.angle(tap(0.25 + h) * np.conj(tap(0.25))) / (2 * math.pi * h)
    analytic = v * f / SPEED_OF_LIGHT
    assert analytic == pytest.approx(590.0, rel=1e-12)
    assert nu == pytest.approx(analytic, rel=1e-6)


# -- 7 ----------------------------------------------------------------------

@pytest.mark.criterion(7, "dynamic cluster geometry")
def test_c07_dynamic_cluster_geometry():
    rng = np.random.default_rng(707)
    empty = layers()
    rec = record()
    with within(5):
        for _ in range(1000):
            tx, rx, s = (tuple(rng.uniform([-100, -100, 0], [100, 100, 5])) for _ in range(3))
            scat = Node("s", "scatterer_object", "traffic", is_scatterer=True,
                        trajectory=Trajectory.stationary(s))
            (c,) = generate_dynamic_clusters(state(tx=tx, rx=rx), rec, [scat], empty, seed=0)
            ref = two_segment_oracle(tx, rx, s)
            for got, want in zip((c.delay, c.aod, c.aoa), ref):
                assert got == pytest.approx(want, rel=1e-12, abs=1e-300)


# -- 8 ----------------------------------------------------------------------

@pytest.mark.criterion(8, "transition continuity")
def test_c08_transition_continuity():
    ramp, dt = 0.1, 0.01
    with within(5):
        eng = engine(settings=ClusterSpec(ramp_s=ramp), features=Features(dynamic_scatterers=False))
        sets, cs = [], None
        for k in range(40):
            st = state(t=k * dt, los=Condition.LOS if k < 10 else Condition.NLOS)
            cs = eng.start(st, lsp_set()) if cs is None else eng.evolve(cs, st, lsp_set(), dt)
            sets.append(cs)
    assert eng.stats["transitions"] == 1
    assert any(c.ramping for s in sets for c in s.clusters)
    raw_total = []
    for s in sets:
        assert s.effective_powers().sum() == pytest.approx(1.0, abs=1e-12)
        raw_total.append(float(np.sum(np.array([c.power for c in s.clusters]) * s.weights())))
    assert np.max(np.abs(np.diff(raw_total))) <= dt / ramp + 1e-12


# -- 9 ----------------------------------------------------------------------

def _uniform_d_corr(scenario, d_corr):
    def cond(p):
        return replace(p, lsp={n: replace(v, d_corr=d_corr) for n, v in p.lsp.items()})
    return replace(scenario, los=cond(scenario.los), nlos=cond(scenario.nlos))


@pytest.mark.criterion(9, "nearby-user coherence")
def test_c09_nearby_user_coherence():
    sep, eps, d_corr, cell = 2.0, 1.0, 50.0, 1.0
    scenario = _uniform_d_corr(URBAN_V2I, d_corr)
    rng = np.random.default_rng(909)
    with within(10):
        sq = []
        for seed in range(6):
            maps = generate_map_set("bs0", 0, scenario, 200.0, seed=seed, cell=cell)
            for p in rng.uniform(10, 190, size=(200, 2)):
                ang = rng.uniform(0, 2 * math.pi)
                q = p + sep * np.array([math.cos(ang), math.sin(ang)])
                a, b = np.append(p, 1.5), np.append(q, 1.5)
                # 2 m apart never share a 1 m cell, so the LSP branch is the one that applies
                ka = situation_key(state(tx=(0, 0, 10), rx=a), record(), eps)
                kb = situation_key(state(tx=(0, 0, 10), rx=b), record(), eps)
                assert ka != kb
                for cond in (Condition.LOS, Condition.NLOS):
                    sq.append((maps.raw_normals(a, cond) - maps.raw_normals(b, cond)) ** 2)
        msd = np.mean(sq, axis=0)

        # replay: identical situation keys give identical cluster lists
        eng = engine(features=Features(dynamic_scatterers=False))
        cs = eng.start(state(t=0.0, los=Condition.LOS), lsp_set())
        first = [(c.id, c.delay, c.power, c.aod, c.aoa, c.phases) for c in cs.clusters]
        cs = eng.evolve(cs, state(t=0.01, los=Condition.NLOS), lsp_set(), 0.01)
        cs = eng.evolve(cs, state(t=0.02, los=Condition.LOS), lsp_set(), 0.01)
        replay = [(c.id, c.delay, c.power, c.aod, c.aoa, c.phases) for c in cs.clusters if c.birth_t == 0.02]

        # memory API: separately built but equal keys address the same entry
        memory = ClusterMemory()
        cluster_memory_put(situation_key(state(rx=(50.2, 3.7, 1.5)), record(), eps), cs, memory, 0.0)
        hit = cluster_memory_get(situation_key(state(rx=(50.9, 3.1, 1.5)), record(), eps), memory, 1.0)
    expected = 2 * (1 - math.exp(-sep / d_corr))
    assert len(msd) == len(LSP_NAMES)
    assert np.all(np.abs(msd - expected) <= 0.05), msd
    assert eng.stats["memory_hits"] == 1
    assert replay == first
    assert hit is cs


# -- 10 ---------------------------------------------------------------------

_RUN = """
seed = 17
duration_s = 10.0
time_step_s = 0.01
bands_hz = [5.9e9]
{features}
[[nodes]]
name = "bs"
role = "infrastructure"
positions = [[100.0, 100.0, 10.0]]
[[nodes]]
name = "car"
count = 2
speed_mps = 10.0
height_m = 1.5
[[nodes]]
name = "traffic"
kind = "scatterer"
count = 3
speed_mps = 10.0
"""


@pytest.mark.criterion(10, "end-to-end determinism and parity")
def test_c10_determinism_and_parity(tmp_path):
    full = tmp_path / "full.toml"
    full.write_text(_RUN.format(features=""), encoding="utf-8")
    parity = tmp_path / "parity.toml"
    parity.write_text(_RUN.format(features='[features]\npreset = "winner"'), encoding="utf-8")
    with within(60):
        first = run(full, tmp_path / "a")
        second = run(full, tmp_path / "b")
        par = run(parity, tmp_path / "p")
    assert len(first.bands) == 1
    links = (tmp_path / "a" / "links.csv").read_text().splitlines()[1:]
    assert len(links) == 2
    assert first.files == second.files
    assert par.winner_parity
    rows = (tmp_path / "p" / "clusters_b0.csv").read_text().splitlines()
    header = rows[0].split(",")
    kind, weight = header.index("kind"), header.index("ramp_weight")
    body = [r.split(",") for r in rows[1:]]
    assert body
    assert sum(r[kind] == "dynamic" for r in body) == 0
    assert all(float(r[weight]) == 1.0 for r in body)
    assert par.cluster_stats.get("transitions", 0) == 0


# -- 11 ---------------------------------------------------------------------

@pytest.mark.criterion(11, "mean-power calibration")
def test_c11_mean_power_calibration():
    st = state(los=Condition.NLOS)
    base = generate_static_clusters(lsp_set(), st, URBAN_V2I.nlos, substream(0, "acceptance-power"))
    assert sum(c.power for c in base.clusters) == pytest.approx(1.0, abs=1e-12)
    rng = substream(1, "acceptance-phases")
    with within(10):
        total = []
        for _ in range(10_000):
            clusters = tuple(replace(c, phases=tuple(rng.uniform(0, 2 * math.pi, c.n_subpaths)))
                             for c in base.clusters)
            s = synthesize_sample(replace(base, clusters=clusters), st, ISO, ISO, 5.9e9, shadow_fading_db=0.0)
            total.append(s.total_power()[0, 0])
    assert np.mean(total) == pytest.approx(1.0, rel=0.03)
