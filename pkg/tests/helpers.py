"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from hcm.core import Condition
from hcm.geometry import Building, EnvironmentGrid, GeometryLayers
from hcm.links import LinkRecord, LinkState
from hcm.lsp import LspSet


def layers(buildings=(), roads=(), extent=500.0, label="urban"):
    return GeometryLayers(tuple(buildings), tuple(roads), EnvironmentGrid.uniform(extent, 50.0, label), extent)


def state(t=0.0, tx=(0.0, 0.0, 1.5), rx=(100.0, 0.0, 1.5), v_tx=(0, 0, 0), v_rx=(0, 0, 0), los=Condition.LOS):
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    return LinkState(t, los, float(np.linalg.norm(rx - tx)), tx, rx,
                     np.asarray(v_tx, dtype=float), np.asarray(v_rx, dtype=float))


def lsp_set(ds=100e-9, k=9.0, asd=10.0, asa=20.0, sf=0.0):
    return LspSet(ds, k, asd, asa, sf, np.zeros(5))


def record(link_id=0, tx="a", rx="b", band=5.9e9, scenario="urban_v2v", span=(0.0, 10.0)):
    return LinkRecord(link_id, tx, rx, band, 0, scenario, (span,))


def building(center, size, yaw=0.0, bid=0):
    return Building(bid, tuple(center), tuple(size), yaw)


class FixedUniformRng:
    """Generator wrapper whose ``random`` returns preset values."""

    def __init__(self, uniforms, seed=0):
        self._u = np.asarray(uniforms, dtype=float)
        self._rng = np.random.default_rng(seed)

    def random(self, size=None):
        return self._u.copy()

    def __getattr__(self, name):
        return getattr(self._rng, name)


def engine(features=None, settings=None, nodes=None, link_id=0, scenario="urban_v2v", memory=None):
    from hcm.clusters import ClusterEngine
    from hcm.config import ClusterSpec, Features
    from hcm.mobility import AntennaConfig, Node, Trajectory
    from hcm.scenarios import builtin_scenarios

    if nodes is None:
        nodes = {
            "a": Node("a", "station", "g", trajectory=Trajectory.stationary((0, 0, 1.5)),
                      antenna=AntennaConfig.isotropic()),
            "b": Node("b", "station", "g", trajectory=Trajectory.stationary((100, 0, 1.5)),
                      antenna=AntennaConfig.isotropic()),
        }
    return ClusterEngine(record(link_id=link_id, scenario=scenario), builtin_scenarios(), nodes, layers(),
                         features or Features(), settings or ClusterSpec(), seed=11, memory=memory)
