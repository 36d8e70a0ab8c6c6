import numpy as np
import pytest

from hcm.config import V2X_ONLY_FEATURES, SimConfig, config_from_dict, dump_config, load_config
from hcm.core import ConfigError
from hcm.rng import child_seed, substream, substream_id
from hcm.scenarios import builtin_scenarios, load_scenarios

MINIMAL = "seed = 1\nduration_s = 2.0\n"


def test_minimal_document_gets_defaults():
    cfg = load_config(MINIMAL)
    assert cfg.seed == 1 and cfg.duration_s == 2.0
    assert cfg.time_step_s == 0.01
    assert cfg.bands_hz == [5.9e9]
    assert cfg.playground.extent_m == 500.0
    assert cfg.clusters.ramp_s == 0.1
    assert cfg.clusters.memory_ttl_s == 30.0
    assert cfg.clusters.memory_capacity == 4096
    assert cfg.clusters.capture_radius_m == 300.0
    assert cfg.clusters.reflection_loss_db == 13.0
    assert cfg.clusters.situation_eps_m == 1.0
    assert not cfg.winner_parity_mode


def test_zero_time_step_names_field():
    with pytest.raises(ConfigError) as exc:
        load_config(MINIMAL + "time_step_s = 0\n")
    assert exc.value.field == "time_step_s"


@pytest.mark.parametrize("doc, field", [
    ("seed = 1\n", "duration_s"),
    (MINIMAL + "bands_hz = []\n", "bands_hz"),
    (MINIMAL + "[playground]\nextent_m = -1\n", "playground.extent_m"),
    (MINIMAL + "duration_s_typo = 3\n", "duration_s_typo"),
    (MINIMAL + "[features]\nwarp_drive = true\n", "features.warp_drive"),
    (MINIMAL + "time_step_s = 5.0\n", "duration_s"),
    (MINIMAL + "[features]\nreoccurring_situations = false\n", "features.cluster_memory"),
])
def test_validation_errors(doc, field):
    with pytest.raises(ConfigError) as exc:
        load_config(doc)
    assert exc.value.field == field


def test_parse_error():
    with pytest.raises(ConfigError):
        load_config("seed = = 1")


def test_winner_column_flags_give_parity_mode():
    lines = [MINIMAL, "[features]"] + [f"{name} = false" for name in V2X_ONLY_FEATURES]
    assert load_config("\n".join(lines) + "\n").winner_parity_mode
    assert load_config(MINIMAL + '[features]\npreset = "winner"\n').winner_parity_mode
    # one V2X feature left on breaks parity
    assert not load_config(MINIMAL + '[features]\npreset = "winner"\ntrajectories = true\n').winner_parity_mode


def test_round_trip_is_structural_identity():
    doc = MINIMAL + """
bands_hz = [5.9e9, 2.4e9]
[playground]
extent_m = 300.0
building_height_m = [12.0, 20.0]
[features]
dynamic_scatterers = false
[[nodes]]
name = "rsu"
role = "infrastructure"
positions = [[10.0, 10.0, 6.0]]
[[nodes]]
name = "car"
count = 3
speed_mps = 8.0
road_bound = true
antenna = { array = "ula", n = 2, spacing_m = 0.025 }
[pairing]
tx = ["rsu"]
rx = ["car"]
"""
    cfg = load_config(doc)
    again = load_config(dump_config(cfg))
    assert again == cfg
    assert config_from_dict(cfg.to_dict()) == cfg


def test_replace_revalidates():
    cfg = load_config(MINIMAL)
    with pytest.raises(ConfigError):
        cfg.replace(time_step_s=-1.0)
    assert isinstance(cfg.replace(seed=9), SimConfig)


def test_time_grid_spans_duration():
    cfg = load_config(MINIMAL)
    g = cfg.time_grid()
    assert len(g) == 201
    assert g[0] == 0.0 and g[-1] == pytest.approx(2.0)


# -- scenarios ---------------------------------------------------------------

def test_builtin_scenarios_present_and_valid():
    table = builtin_scenarios()
    assert {"urban_v2i", "urban_v2v", "highway_v2v"} <= set(table)
    for sc in table.values():
        for cond in (sc.los, sc.nlos):
            assert cond.n_clusters >= 1 and cond.r_tau > 1
            m = cond.cross_correlation
            assert np.allclose(m, m.T) and np.allclose(np.diag(m), 1.0)
            assert np.linalg.eigvalsh(m).min() >= -1e-9
            assert all(cond.d_corr(n) > 0 for n in ("DS", "K", "ASD", "ASA", "SF"))


def _scenario_doc(matrix):
    rows = ",\n".join("[" + ", ".join(str(v) for v in r) + "]" for r in matrix)
    cond = f"""
pathloss = {{ A = 20.0, B = 40.0, C = 20.0 }}
n_clusters = 4
r_tau = 2.0
per_cluster_shadow_sigma = 3.0
c_phi = 5.0
lsp.DS = {{ mu = -7.0, sigma = 0.2, d_corr = 10.0 }}
lsp.K = {{ mu = 5.0, sigma = 3.0, d_corr = 10.0 }}
lsp.ASD = {{ mu = 1.0, sigma = 0.2, d_corr = 10.0 }}
lsp.ASA = {{ mu = 1.3, sigma = 0.2, d_corr = 10.0 }}
lsp.SF = {{ mu = 0.0, sigma = 3.0, d_corr = 10.0 }}
cross_correlation = [{rows}]
"""
    return f"[custom.los]{cond}\n[custom.nlos]{cond}"


def test_negative_eigenvalue_rejected():
    # eigenvalues of this matrix: 1 + 4a (once) and 1 - a (four times); a = -0.2625 gives -0.05
    a = -0.2625
    m = np.full((5, 5), a) + np.eye(5) * (1 - a)
    assert np.linalg.eigvalsh(m).min() == pytest.approx(-0.05)
    with pytest.raises(ConfigError):
        load_scenarios(_scenario_doc(m))


def test_tiny_negative_eigenvalue_clamped():
    a = -0.25 - 1e-10         # smallest eigenvalue 1 + 4a = -4e-10
    m = np.full((5, 5), a) + np.eye(5) * (1 - a)
    table = load_scenarios(_scenario_doc(m))
    fixed = table["custom"].los.cross_correlation
    assert np.linalg.eigvalsh(fixed).min() >= -1e-12
    assert np.allclose(np.diag(fixed), 1.0)


def test_identity_scenario_loads():
    assert "custom" in load_scenarios(_scenario_doc(np.eye(5)))


# -- rng ------------------------------------------------------------------

def test_substreams_are_named_and_independent():
    assert substream_id("lsp", "bs0", 1) == "lsp/bs0/1"
    assert child_seed(5, "a", 1) == child_seed(5, "a", 1)
    assert child_seed(5, "a", 1) != child_seed(5, "a", 2)
    assert child_seed(5, "a") != child_seed(6, "a")
    x = substream(3, "nodes", "car").random(4)
    y = substream(3, "nodes", "car").random(4)
    assert np.array_equal(x, y)
