"""Cluster layer: quasi-static and dynamic clusters and their evolution.

Delay convention: a :class:`ClusterSet` carries ``reference_delay``, the
direct-path propagation delay ``d(t)/c`` at its time stamp, and every
cluster stores its *excess* delay relative to that.  Static clusters keep
their excess delay between redraws, so their absolute delay drifts with the
link distance; dynamic clusters are recomputed from geometry each step.
"""

from __future__ import annotations

import functools
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional

import numpy as np
from scipy import optimize

from .core import SPEED_OF_LIGHT, Condition, ContractError, azimuth_deg, wrap_deg
from .geometry import GeometryLayers, is_los
from .links import LinkRecord, LinkState, SituationKey, assign_scenario, situation_key
from .lsp import LspSet
from .mobility import Node
from .rng import substream
from .scenarios import ConditionParams, ScenarioParams
from .tomlio import loads

log = logging.getLogger(__name__)

#: Equal-power sub-path offsets (degrees) for a unit cluster angle spread.
SUBPATH_OFFSETS = np.array([
    0.0447, -0.0447, 0.1413, -0.1413, 0.2492, -0.2492, 0.3715, -0.3715,
    0.5129, -0.5129, 0.6797, -0.6797, 0.8844, -0.8844, 1.1481, -1.1481,
    1.5195, -1.5195, 2.1551, -2.1551,
])
N_SUBPATHS = len(SUBPATH_OFFSETS)


@dataclass(frozen=True)
class Cluster:
    id: str
    kind: str                         # "static" | "dynamic" | "direct"
    delay: float                      # excess delay [s]
    power: float                      # linear, relative to its own draw
    aod: float                        # degrees, global frame
    aoa: float
    aod_offsets: tuple[float, ...] = (0.0,)
    aoa_offsets: tuple[float, ...] = (0.0,)
    phases: tuple[float, ...] = (0.0,)
    source: Optional[str] = None      # scatterer node id for dynamic clusters
    draw: int = -1                    # static draw index, -1 for dynamic
    t_ref: float = 0.0                # phase reference (birth of its draw)
    birth_t: float = -math.inf
    death_t: float = math.inf
    ramp_duration: float = 0.0
    path_length: float = 0.0          # dynamic: |tx-s| + |s-rx| [m]

    def __post_init__(self):
        if self.delay < 0 or self.power < 0:
            raise ValueError(f"cluster {self.id}: delay and power must be >= 0")
        if not len(self.phases) == len(self.aod_offsets) == len(self.aoa_offsets):
            raise ValueError(f"cluster {self.id}: sub-path arrays differ in length")

    @property
    def n_subpaths(self) -> int:
        return len(self.phases)

    def ramp_weight(self, t: float) -> float:
        """Linear fade-in after ``birth_t`` times linear fade-out after ``death_t``."""
        if self.ramp_duration <= 0:
            return 1.0 if t < self.death_t else 0.0
        w_in = min(max((t - self.birth_t) / self.ramp_duration, 0.0), 1.0)
        w_out = min(max(1.0 - (t - self.death_t) / self.ramp_duration, 0.0), 1.0)
        return w_in * w_out

    @property
    def ramping(self) -> bool:
        return math.isfinite(self.birth_t) or math.isfinite(self.death_t)


@dataclass(frozen=True)
class ClusterSet:
    link_id: int
    t: float
    clusters: tuple[Cluster, ...]
    condition: Condition
    scenario_id: str = ""
    reference_delay: float = 0.0
    lsps: Optional[LspSet] = None
    key: Optional[SituationKey] = None

    def weights(self) -> np.ndarray:
        return np.array([c.ramp_weight(self.t) for c in self.clusters])

    def effective_powers(self) -> np.ndarray:
        """Ramp-weighted powers normalised to unit sum over the combined set."""
        if not self.clusters:
            return np.zeros(0)
        p = np.array([c.power for c in self.clusters]) * self.weights()
        total = p.sum()
        return p / total if total > 0 else p

    def absolute_delays(self) -> np.ndarray:
        return self.reference_delay + np.array([c.delay for c in self.clusters])

    def of_kind(self, kind: str) -> list[Cluster]:
        return [c for c in self.clusters if c.kind == kind]


# ---------------------------------------------------------------------------
# angle-mapping constant

def angle_spread(powers, angles_deg) -> float:
    """Power-weighted rms spread about the power-weighted mean (degrees)."""
    p = np.asarray(powers, dtype=float)
    a = np.asarray(angles_deg, dtype=float)
    p = p / p.sum()
    mean = np.sum(p * a)
    return float(math.sqrt(max(np.sum(p * (a - mean) ** 2), 0.0)))


def _cluster_powers(rng, n, r_tau, zeta, size):
    u = 1.0 - rng.random((size, n))
    tau = np.sort(-r_tau * np.log(u), axis=1)
    tau -= tau[:, :1]
    z = rng.normal(0.0, zeta, (size, n)) if zeta > 0 else np.zeros((size, n))
    p = np.exp(-tau * (r_tau - 1.0) / r_tau) * 10.0 ** (-z / 10.0)
    return p / p.sum(axis=1, keepdims=True)


def calibrate_angle_constant(n_clusters: int, r_tau: float, zeta: float, draws: int = 4000,
                             seed: int = 20240501, sigma: float = 10.0) -> float:
    """Constant C making the median generated angle spread equal sigma.

    Uses common random numbers across the root search; delay spread
    cancels out of the power profile, so only (n, r_tau, zeta) matter.
    """
    if n_clusters < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    p = _cluster_powers(rng, n_clusters, r_tau, zeta, draws)
    base = np.sqrt(-np.log(p / p.max(axis=1, keepdims=True))) * sigma
    sign = rng.choice([-1.0, 1.0], size=p.shape)
    jitter = rng.normal(0.0, sigma / 7.0, size=p.shape)

    def median_spread(c):
        ang = c * base * sign + jitter
        mean = np.sum(p * ang, axis=1, keepdims=True)
        return float(np.median(np.sqrt(np.sum(p * (ang - mean) ** 2, axis=1))))

    return float(optimize.brentq(lambda c: median_spread(c) - sigma, 0.0, 20.0, xtol=1e-6))


def _calibration_key(n: int, r_tau: float, zeta: float) -> tuple[int, float, float]:
    return int(n), round(float(r_tau), 6), round(float(zeta), 6)


@functools.lru_cache(maxsize=1)
def _calibration_table() -> dict:
    text = resources.files("hcm").joinpath("data/angle_calibration.toml").read_text(encoding="utf-8")
    return {_calibration_key(e["n_clusters"], e["r_tau"], e["zeta"]): float(e["C"])
            for e in loads(text).get("entry", [])}


@functools.lru_cache(maxsize=128)
def angle_constant(n_clusters: int, r_tau: float, zeta: float) -> float:
    key = _calibration_key(n_clusters, r_tau, zeta)
    table = _calibration_table()
    if key in table:
        return table[key]
    log.warning("no stored angle calibration for %s; calibrating on the fly", key)
    return calibrate_angle_constant(*key)


# ---------------------------------------------------------------------------
# generation

def los_azimuths(state: LinkState) -> tuple[float, float]:
    """(aod, aoa) of the direct path in degrees."""
    d = state.rx_position - state.tx_position
    return float(azimuth_deg(d)), float(azimuth_deg(-d))


def generate_static_clusters(lsps: LspSet, state: LinkState, params: ConditionParams,
                             rng: np.random.Generator, link_id: int = 0, draw: int = 0,
                             sub_paths: bool = True, scenario_id: str = "",
                             angle_c: float | None = None) -> ClusterSet:
    """One quasi-static drop of ``params.n_clusters`` clusters (plus direct path in LOS)."""
    n = params.n_clusters
    ds = lsps.delay_spread
    r_tau = params.r_tau
    zeta = params.per_cluster_shadow_sigma

    u = 1.0 - rng.random(n)                       # (0, 1]
    tau = np.sort(-r_tau * ds * np.log(u))
    tau -= tau[0]
    z = rng.normal(0.0, zeta, n) if zeta > 0 else np.zeros(n)
    p = np.exp(-tau * (r_tau - 1.0) / (r_tau * ds)) * 10.0 ** (-z / 10.0)
    p /= p.sum()

    c = angle_constant(n, r_tau, zeta) if angle_c is None else angle_c
    aod_los, aoa_los = los_azimuths(state)
    shape = np.sqrt(-np.log(p / p.max()))
    angles = []
    for sigma, phi_los in ((lsps.asd, aod_los), (lsps.asa, aoa_los)):
        x = rng.choice([-1.0, 1.0], size=n)
        y = rng.normal(0.0, sigma / 7.0, size=n)
        angles.append(wrap_deg(c * shape * sigma * x + y + phi_los))
    aod, aoa = angles

    perms = [rng.permutation(N_SUBPATHS) for _ in range(n)]
    phases = rng.uniform(0.0, 2 * math.pi, size=(n, N_SUBPATHS))

    los = state.los is Condition.LOS
    k_lin = 10.0 ** (lsps.k_factor / 10.0) if los else 0.0
    scatter_scale = 1.0 / (k_lin + 1.0)
    offsets = SUBPATH_OFFSETS * params.c_phi

    clusters = []
    if los:
        clusters.append(Cluster(f"los.{draw}", "direct", 0.0, k_lin / (k_lin + 1.0), aod_los, aoa_los,
                                draw=draw, t_ref=state.t))
    for i in range(n):
        if sub_paths:
            sub = dict(aod_offsets=tuple(offsets), aoa_offsets=tuple(offsets[perms[i]]),
                       phases=tuple(phases[i]))
        else:
            sub = dict(phases=(float(phases[i, 0]),))
        clusters.append(Cluster(f"s{draw}.{i}", "static", float(tau[i]), float(p[i] * scatter_scale),
                                float(aod[i]), float(aoa[i]), draw=draw, t_ref=state.t, **sub))
    return ClusterSet(link_id, state.t, tuple(clusters), state.los, scenario_id,
                      state.distance_3d / SPEED_OF_LIGHT, lsps)


def dynamic_cluster_geometry(p_tx, p_rx, p_s):
    """Excess delay [s], aod, aoa [deg] and path length [m] via a scatterer."""
    p_tx, p_rx, p_s = (np.asarray(v, dtype=float) for v in (p_tx, p_rx, p_s))
    u, w = p_s - p_tx, p_s - p_rx
    d1 = float(np.linalg.norm(u))
    d2 = float(np.linalg.norm(w))
    d0 = float(np.linalg.norm(p_tx - p_rx))
    if d1 > 0 and d2 > 0:
        # d1 + d2 - d0 = d1 d2 |u/d1 + w/d2|^2 / (d1 + d2 + d0), free of cancellation
        h = u / d1 + w / d2
        extra = d1 * d2 * float(h @ h) / (d1 + d2 + d0)
    else:
        extra = 0.0
    excess = extra / SPEED_OF_LIGHT
    return excess, float(azimuth_deg(p_s - p_tx)), float(azimuth_deg(p_s - p_rx)), d1 + d2


def generate_dynamic_clusters(state: LinkState, record: LinkRecord, nodes, layers: GeometryLayers,
                              seed: int, capture_radius: float = 300.0, reflection_loss_db: float = 13.0,
                              c_phi: float = 5.0, sub_paths: bool = True) -> list[Cluster]:
    """Single-bounce clusters off visible scatterer nodes.

    Relative power is ``10^(-L/10) * (d0 / (d1 + d2))^2`` (image-source
    free-space ratio against the direct path) and is renormalised together
    with the static part by :meth:`ClusterSet.effective_powers`.
    """
    out = []
    d0 = state.distance_3d
    loss = 10.0 ** (-reflection_loss_db / 10.0)
    for node in nodes:
        if not node.is_scatterer or node.id in (record.tx, record.rx):
            continue
        p_s = node.position_at(state.t)
        d1 = float(np.linalg.norm(p_s - state.tx_position))
        d2 = float(np.linalg.norm(p_s - state.rx_position))
        if min(d1, d2) > capture_radius or min(d1, d2) < 1e-6:
            continue
        if not (is_los(state.tx_position, p_s, layers) and is_los(p_s, state.rx_position, layers)):
            continue
        excess, aod, aoa, length = dynamic_cluster_geometry(state.tx_position, state.rx_position, p_s)
        rng = substream(seed, "dynamic", record.link_id, node.id, record.band_index)
        perm = rng.permutation(N_SUBPATHS)
        phases = rng.uniform(0.0, 2 * math.pi, N_SUBPATHS)
        offsets = SUBPATH_OFFSETS * (c_phi / 4.0)
        if sub_paths:
            sub = dict(aod_offsets=tuple(offsets), aoa_offsets=tuple(offsets[perm]), phases=tuple(phases))
        else:
            sub = dict(phases=(float(phases[0]),))
        out.append(Cluster(f"d.{node.id}", "dynamic", excess, loss * (d0 / length) ** 2, aod, aoa,
                           source=node.id, t_ref=state.t, path_length=length, **sub))
    return out


# ---------------------------------------------------------------------------
# cluster memory

class ClusterMemory:
    """LRU cache of cluster drops keyed by :class:`SituationKey` with expiry."""

    def __init__(self, capacity: int = 4096, ttl: float = 30.0):
        if capacity < 1:
            raise ValueError("capacity must be > 0")
        self.capacity = capacity
        self.ttl = ttl
        self._store: OrderedDict[SituationKey, tuple[float, ClusterSet]] = OrderedDict()

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key: SituationKey, t: float) -> Optional[ClusterSet]:
        entry = self._store.get(key)
        if entry is None:
            return None
        stored_t, value = entry
        if t - stored_t >= self.ttl:
            del self._store[key]
            return None
        self._store.move_to_end(key)
        return value

    def put(self, key: SituationKey, value: ClusterSet, t: float) -> None:
        self._store[key] = (t, value)
        self._store.move_to_end(key)
        while len(self._store) > self.capacity:
            self._store.popitem(last=False)


def cluster_memory_get(key, memory: ClusterMemory, t: float):
    return memory.get(key, t)


def cluster_memory_put(key, value, memory: ClusterMemory, t: float) -> None:
    memory.put(key, value, t)


# ---------------------------------------------------------------------------
# evolution

@dataclass
class ClusterEngine:
    """Cluster generator for one link.

    Holds the per-link mutable state (draw counter, cluster memory); all
    cluster sets it returns are immutable.  ``features`` and ``settings``
    are the ``features`` and ``clusters`` sections of the run configuration.
    """

    record: LinkRecord
    scenarios: dict[str, ScenarioParams]
    nodes: dict[str, Node]
    layers: GeometryLayers
    features: object
    settings: object
    seed: int
    class_map: Optional[dict] = None
    infrastructure_height_m: float = 5.0
    memory: Optional[ClusterMemory] = None
    draws: int = 0
    stats: dict = field(default_factory=lambda: {"draws": 0, "memory_hits": 0, "transitions": 0})

    def __post_init__(self):
        if self.memory is None and self.features.cluster_memory:
            self.memory = ClusterMemory(self.settings.memory_capacity, self.settings.memory_ttl_s)
        self._scatterers = [n for n in self.nodes.values() if n.is_scatterer]

    # -- helpers --------------------------------------------------------
    def current_scenario(self, t: float) -> str:
        if not self.features.situation_transition:
            return self.record.scenario_id
        return assign_scenario(self.nodes[self.record.tx], self.nodes[self.record.rx], self.layers,
                               self.class_map, self.infrastructure_height_m, t)

    def _key(self, state: LinkState, scenario_id: str) -> Optional[SituationKey]:
        if not self.features.reoccurring_situations:
            return None
        return situation_key(state, self.record, self.settings.situation_eps_m, scenario_id)

    def _dynamic(self, state: LinkState, scenario_id: str) -> list[Cluster]:
        if not self.features.dynamic_scatterers or not self._scatterers:
            return []
        c_phi = self.scenarios[scenario_id].for_condition(state.los).c_phi
        return generate_dynamic_clusters(
            state, self.record, self._scatterers, self.layers, self.seed,
            self.settings.capture_radius_m, self.settings.reflection_loss_db, c_phi,
            self.features.sub_path_generation)

    def _fresh(self, state: LinkState, lsps: LspSet, scenario_id: str) -> ClusterSet:
        """Static drop for the current situation, from memory when possible."""
        key = self._key(state, scenario_id)
        if self.memory is not None and key is not None:
            hit = self.memory.get(key, state.t)
            if hit is not None:
                self.stats["memory_hits"] += 1
                return hit
        rng = substream(self.seed, "clusters", self.record.link_id, self.draws, self.record.band_index)
        params = self.scenarios[scenario_id].for_condition(state.los)
        drop = generate_static_clusters(lsps, state, params, rng, self.record.link_id, self.draws,
                                        self.features.sub_path_generation, scenario_id)
        drop = replace(drop, key=key)
        self.draws += 1
        self.stats["draws"] += 1
        if self.memory is not None and key is not None:
            self.memory.put(key, drop, state.t)
        return drop

    def _remember(self, state: LinkState, drop_clusters, scenario_id: str, lsps) -> None:
        if self.memory is None:
            return
        key = self._key(state, scenario_id)
        if key is None or self.memory.get(key, state.t) is not None:
            return
        self.memory.put(key, ClusterSet(self.record.link_id, state.t, tuple(drop_clusters), state.los,
                                        scenario_id, 0.0, lsps, key), state.t)

    # -- public ---------------------------------------------------------
    def start(self, state: LinkState, lsps: LspSet) -> ClusterSet:
        scenario_id = self.current_scenario(state.t)
        drop = self._fresh(state, lsps, scenario_id)
        static = tuple(replace(c, t_ref=state.t) for c in drop.clusters)
        static = self._relocate_direct(static, state)
        return ClusterSet(self.record.link_id, state.t, static + tuple(self._dynamic(state, scenario_id)),
                          state.los, scenario_id, state.distance_3d / SPEED_OF_LIGHT, drop.lsps, drop.key)

    @staticmethod
    def _relocate_direct(clusters, state: LinkState):
        aod, aoa = los_azimuths(state)
        return tuple(replace(c, aod=aod, aoa=aoa) if c.kind == "direct" else c for c in clusters)

    def evolve(self, prev: ClusterSet, state: LinkState, lsps: LspSet, dt: float) -> ClusterSet:
        """Advance ``prev`` by ``dt`` to the instant described by ``state``."""
        if prev.link_id != self.record.link_id:
            raise ContractError(f"cluster set of link {prev.link_id} passed to link {self.record.link_id}")
        if not dt > 0:
            raise ContractError("dt must be > 0")
        t = prev.t + dt
        if abs(t - state.t) > 1e-9 * max(1.0, abs(t)):
            raise ContractError(f"state time {state.t} does not match {prev.t} + {dt}")
        t = state.t
        feats = self.features

        kept = [c for c in prev.clusters if c.kind != "dynamic" and not _faded_out(c, t)]
        scenario_id = self.current_scenario(t)
        if feats.time_evolution:
            reference = state.distance_3d / SPEED_OF_LIGHT
            kept = list(self._relocate_direct(kept, state))
        else:
            reference = prev.reference_delay

        lsp_used, key = prev.lsps, prev.key
        changed = state.los is not prev.condition or scenario_id != prev.scenario_id
        if changed:
            self.stats["transitions"] += 1
            drop = self._fresh(state, lsps, scenario_id)
            new = self._relocate_direct(tuple(replace(c, t_ref=t) for c in drop.clusters), state)
            if feats.situation_transition:
                ramp = self.settings.ramp_s
                kept = [c if math.isfinite(c.death_t) else replace(c, death_t=t, ramp_duration=ramp)
                        for c in kept]
                new = tuple(replace(c, birth_t=t, ramp_duration=ramp) for c in new)
                kept = kept + list(new)
            else:
                kept = list(new)
            lsp_used, key = drop.lsps, drop.key
        elif feats.cluster_memory and feats.reoccurring_situations:
            newest = max((c.draw for c in kept if c.draw >= 0), default=None)
            if newest is not None:
                drop = [replace(c, birth_t=-math.inf, death_t=math.inf, ramp_duration=0.0)
                        for c in kept if c.draw == newest]
                self._remember(state, drop, scenario_id, lsp_used)

        dynamic = self._dynamic(state, scenario_id) if feats.time_evolution else prev.of_kind("dynamic")
        return ClusterSet(self.record.link_id, t, tuple(kept) + tuple(dynamic), state.los, scenario_id,
                          reference, lsp_used, key)


def _faded_out(c: Cluster, t: float) -> bool:
    return math.isfinite(c.death_t) and t >= c.death_t + c.ramp_duration


def evolve_cluster_set(prev: ClusterSet, state: LinkState, lsps: LspSet, dt: float,
                       engine: ClusterEngine) -> ClusterSet:
    return engine.evolve(prev, state, lsps, dt)
