"""Mesh layer: the time-dependent link table and per-instant link state."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import Condition, ConfigError, QueryError
from .geometry import GeometryLayers, environment_cell_index, environment_class_at, is_los
from .mobility import Node


@dataclass(frozen=True)
class LinkRecord:
    link_id: int
    tx: str
    rx: str
    band_hz: float
    band_index: int
    scenario_id: str
    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.tx == self.rx:
            raise ValueError("link endpoints must differ")
        for (a0, a1), (b0, _) in zip(self.intervals, self.intervals[1:]):
            if not a1 < b0:
                raise ValueError("intervals must be sorted and disjoint")
        if any(a > b for a, b in self.intervals):
            raise ValueError("interval start after end")

    def is_active(self, t: float, tol: float = 1e-9) -> bool:
        return any(a - tol <= t <= b + tol for a, b in self.intervals)


@dataclass(frozen=True)
class LinkState:
    t: float
    los: Condition
    distance_3d: float
    tx_position: np.ndarray
    rx_position: np.ndarray
    tx_velocity: np.ndarray
    rx_velocity: np.ndarray


@dataclass(frozen=True)
class SituationKey:
    tx_cell: tuple[int, int, int]
    rx_cell: tuple[int, int, int]
    los: Condition
    scenario_id: str


def _runs(mask: np.ndarray, times: np.ndarray) -> tuple[tuple[float, float], ...]:
    out = []
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(int)))
    for start, stop in zip(edges[::2], edges[1::2]):
        out.append((float(times[start]), float(times[stop - 1])))
    return tuple(out)


def _candidate_pairs(stations: list[Node], pairing) -> list[tuple[Node, Node]]:
    if pairing.mode == "tx_rx":
        txs = [n for n in stations if n.group in pairing.tx]
        rxs = [n for n in stations if n.group in pairing.rx]
        return [(a, b) for a in txs for b in rxs if a.id != b.id]
    if len(stations) < 2:
        return []
    return list(itertools.combinations(stations, 2))


def build_link_table(stations: list[Node], pairing, bands_hz, times, layers: GeometryLayers,
                     scenario_of=None) -> list[LinkRecord]:
    """One record per admissible (tx, rx, band).

    ``times`` is the simulation grid; with ``max_range`` pairing the active
    intervals are the maximal grid runs with distance <= range.  The
    ``scenario_of(tx, rx)`` callback assigns scenario ids (defaults to
    :func:`assign_scenario` with built-in class mapping).
    """
    times = np.asarray(times, dtype=float)
    span = ((float(times[0]), float(times[-1])),)
    stations = [n for n in stations if n.is_station]
    if scenario_of is None:
        def scenario_of(a, b):
            return assign_scenario(a, b, layers)
    records = []
    link_id = 0
    for band_index, band in enumerate(bands_hz):
        for tx, rx in _candidate_pairs(stations, pairing):
            if pairing.mode == "max_range":
                d = np.linalg.norm(tx.position_at(times) - rx.position_at(times), axis=-1)
                intervals = _runs(d <= pairing.max_range_m, times)
                if not intervals:
                    continue
            else:
                intervals = span
            records.append(LinkRecord(link_id, tx.id, rx.id, float(band), band_index,
                                      scenario_of(tx, rx), intervals))
            link_id += 1
    return records


def classify_link_state(record: LinkRecord, t: float, nodes: dict[str, Node],
                        layers: GeometryLayers, classify: bool = True) -> LinkState:
    """Positions, velocities and LOS state of a link at grid time ``t``.

    With ``classify=False`` (link-state classification disabled) every link
    is treated as nLOS.
    """
    if not record.is_active(t):
        raise QueryError(f"link {record.link_id} is not active at t={t}")
    tx, rx = nodes[record.tx], nodes[record.rx]
    ptx, prx = tx.position_at(t), rx.position_at(t)
    distance = float(np.linalg.norm(ptx - prx))
    if distance <= 0:
        raise QueryError(f"link {record.link_id}: endpoints coincide at t={t}")
    los = Condition.LOS if classify and is_los(ptx, prx, layers) else Condition.NLOS
    return LinkState(float(t), los, distance, ptx, prx, tx.velocity_at(t), rx.velocity_at(t))


def is_infrastructure(node: Node, t: float = 0.0, height_threshold: float = 5.0) -> bool:
    return node.role == "infrastructure" or float(node.position_at(t)[2]) > height_threshold


def assign_scenario(tx: Node, rx: Node, layers: GeometryLayers, class_map: dict | None = None,
                    infrastructure_height_m: float = 5.0, t: float = 0.0) -> str:
    """Scenario id from the environment class at the link midpoint.

    The class maps to a scenario family (``class_map``) and the suffix is
    ``_v2i`` when either endpoint is infrastructure, else ``_v2v``.
    """
    if class_map is None:
        from .config import ScenarioSpec

        class_map = ScenarioSpec().class_map
    mid = 0.5 * (tx.position_at(t) + rx.position_at(t))
    label = environment_class_at(mid, layers)
    if label not in class_map:
        raise ConfigError(f"environment class {label!r} has no scenario", "scenarios.class_map")
    infra = is_infrastructure(tx, t, infrastructure_height_m) or is_infrastructure(rx, t, infrastructure_height_m)
    return f"{class_map[label]}_{'v2i' if infra else 'v2v'}"


def situation_key(state: LinkState, record: LinkRecord, eps: float = 1.0,
                  scenario_id: str | None = None) -> SituationKey:
    """Floor-quantise both endpoint positions to ``eps`` cells."""
    if not eps > 0:
        raise ValueError("eps must be > 0")

    def cell(p):
        return tuple(int(math.floor(float(v) / eps)) for v in p)

    return SituationKey(cell(state.tx_position), cell(state.rx_position), state.los,
                        scenario_id or record.scenario_id)


# ---------------------------------------------------------------------------
# CSV exports

def export_link_table(records: list[LinkRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["link_id", "tx", "rx", "band_hz", "scenario", "t_start", "t_end"])
    for r in records:
        for a, b in r.intervals:
            w.writerow([r.link_id, r.tx, r.rx, repr(r.band_hz), r.scenario_id, repr(a), repr(b)])
    return buf.getvalue()


def export_state_trace(rows) -> str:
    """``rows``: iterable of (link_id, LinkState)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["link_id", "t", "los", "distance_m"])
    for link_id, s in rows:
        w.writerow([link_id, repr(s.t), s.los.value, repr(s.distance_3d)])
    return buf.getvalue()


__all__ = [
    "LinkRecord", "LinkState", "SituationKey", "build_link_table", "classify_link_state",
    "assign_scenario", "situation_key", "is_infrastructure", "export_link_table",
    "export_state_trace", "environment_cell_index",
]
