"""Node layer: stations and scatterer objects moving against global time."""

from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import GeometryError
from .geometry import GeometryLayers, project_to_road
from .rng import substream


@dataclass(frozen=True)
class PatternGrid:
    """Complex element gain sampled on a uniform azimuth grid starting at 0 deg."""

    gains: tuple[complex, ...]

    def __post_init__(self):
        if len(self.gains) < 1 or 360 % len(self.gains) != 0:
            raise ValueError("pattern sample count must divide 360")

    @functools.cached_property
    def _array(self) -> np.ndarray:
        return np.asarray(self.gains, dtype=complex)

    def gain(self, azimuth_deg) -> np.ndarray:
        """Linear interpolation on the wrapped grid (body-frame azimuth)."""
        g = self._array
        n = len(g)
        pos = (np.asarray(azimuth_deg, dtype=float) % 360.0) / (360.0 / n)
        i0 = np.floor(pos).astype(int) % n
        w = pos - np.floor(pos)
        return (1.0 - w) * g[i0] + w * g[(i0 + 1) % n]

    @classmethod
    def isotropic(cls):
        return cls((1.0 + 0j,))

    @classmethod
    def directional(cls, n: int = 360):
        """Cardioid with unit mean power gain: |g|^2 = 1 + cos(az)."""
        az = np.radians(np.arange(n) * 360.0 / n)
        return cls(tuple(complex(v) for v in np.sqrt(1.0 + np.cos(az))))

    def scaled(self, gamma: complex) -> "PatternGrid":
        return PatternGrid(tuple(complex(gamma * g) for g in self.gains))


@dataclass(frozen=True)
class AntennaElement:
    offset: tuple[float, float, float]   # body frame, meters
    boresight_yaw: float = 0.0           # radians
    pattern: PatternGrid = field(default_factory=PatternGrid.isotropic)


@dataclass(frozen=True)
class AntennaConfig:
    elements: tuple[AntennaElement, ...]

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @classmethod
    def isotropic(cls):
        return cls((AntennaElement((0.0, 0.0, 0.0)),))

    @classmethod
    def from_spec(cls, spec) -> "AntennaConfig":
        if spec.pattern == "isotropic":
            pattern = PatternGrid.isotropic()
        elif spec.pattern == "directional":
            pattern = PatternGrid.directional()
        else:
            pattern = PatternGrid(tuple(complex(g) for g in spec.pattern_gains))
        # uniform linear array along body y, broadside to the body x axis
        ys = (np.arange(spec.n) - (spec.n - 1) / 2) * spec.spacing_m
        yaw = math.radians(spec.boresight_deg)
        return cls(tuple(AntennaElement((0.0, float(y), 0.0), yaw, pattern) for y in ys))


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear path through ``(time, position)`` waypoints."""

    times: tuple[float, ...]
    points: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        if len(self.times) != len(self.points) or not self.times:
            raise ValueError("trajectory needs matching, non-empty times and points")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @functools.cached_property
    def _t(self) -> np.ndarray:
        return np.asarray(self.times, dtype=float)

    @functools.cached_property
    def _p(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float).reshape(-1, 3)

    @classmethod
    def stationary(cls, p) -> "Trajectory":
        return cls((0.0,), (tuple(float(v) for v in p),))

    def covers(self, t0: float, t1: float) -> bool:
        """False when the span needs clamped holding at either end."""
        return self.times[0] <= t0 and self.times[-1] >= t1

    def position_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self._t, self._p[:, k]) for k in range(3)], axis=-1)
        return out

    def velocity_at(self, t) -> np.ndarray:
        """Difference quotient of the segment to the right of ``t``.

        Zero before the first and at/after the last waypoint.
        """
        tt = np.asarray(t, dtype=float)
        if len(self.times) == 1:
            return np.zeros(tt.shape + (3,))
        idx = np.searchsorted(self._t, tt, side="right") - 1
        valid = (idx >= 0) & (idx < len(self.times) - 1)
        i = np.clip(idx, 0, len(self.times) - 2)
        vel = (self._p[i + 1] - self._p[i]) / (self._t[i + 1] - self._t[i])[..., None]
        return np.where(valid[..., None], vel, 0.0)


@dataclass(frozen=True)
class Node:
    id: str
    kind: str                       # "station" | "scatterer_object"
    group: str
    role: str = "vehicle"
    dimensions: tuple[float, float, float] = (4.5, 1.8, 1.5)
    is_scatterer: bool = False
    road_bound: bool = False
    trajectory: Trajectory = field(default_factory=lambda: Trajectory.stationary((0.0, 0.0, 0.0)))
    antenna: Optional[AntennaConfig] = None
    yaw: float = 0.0                 # body heading while stationary, radians

    def __post_init__(self):
        if self.kind not in ("station", "scatterer_object"):
            raise ValueError(f"node {self.id}: unknown kind {self.kind!r}")
        if self.kind == "scatterer_object" and self.antenna is not None:
            raise ValueError(f"node {self.id}: scatterer objects carry no antenna")
        if any(not d > 0 for d in self.dimensions):
            raise ValueError(f"node {self.id}: dimensions must be positive")

    @property
    def is_station(self) -> bool:
        return self.kind == "station"

    def position_at(self, t) -> np.ndarray:
        return self.trajectory.position_at(t)

    def velocity_at(self, t) -> np.ndarray:
        return self.trajectory.velocity_at(t)

    def heading_at(self, t: float) -> float:
        """Body heading (radians): direction of travel, or ``yaw`` when still."""
        v = self.velocity_at(t)
        if math.hypot(v[0], v[1]) > 0:
            return math.atan2(v[1], v[0])
        return self.yaw


# ---------------------------------------------------------------------------
# trajectory generation

def straight_trajectory(start, velocity, duration: float) -> Trajectory:
    start = np.asarray(start, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    if not np.any(velocity) or duration <= 0:
        return Trajectory.stationary(start)
    end = start + velocity * duration
    return Trajectory((0.0, float(duration)), (tuple(start), tuple(float(v) for v in end)))


def road_walk(layers: GeometryLayers, segment_id: int, arc_length: float, direction: int,
              speed: float, duration: float, rng: np.random.Generator, height: float = 0.0) -> Trajectory:
    """Constant-speed random walk on the road graph.

    At each junction the next segment is drawn uniformly from the segments
    linked at that end.  The walker only reverses on a dead end.
    """
    lift = np.array([0.0, 0.0, height])
    seg = layers.road(segment_id)
    s = min(max(float(arc_length), 0.0), seg.length)
    start = seg.point_at(s) + lift
    total = speed * duration
    if total <= 0:
        return Trajectory.stationary(start)

    times = [0.0]
    points = [tuple(start)]
    travelled = 0.0
    direction = 1 if direction >= 0 else -1

    while True:
        cum = seg.cumulative
        if direction > 0:
            ahead = np.flatnonzero(cum > s + 1e-12)
        else:
            ahead = np.flatnonzero(cum < s - 1e-12)[::-1]
        for k in ahead:
            ds = abs(cum[k] - s)
            if travelled + ds >= total - 1e-12:
                s_final = s + direction * (total - travelled)
                times.append(float(duration))
                points.append(tuple(seg.point_at(s_final) + lift))
                return Trajectory(tuple(times), tuple(points))
            travelled += ds
            s = float(cum[k])
            times.append(travelled / speed)
            points.append(tuple(seg.points[k] + lift))

        # junction
        end = "end" if direction > 0 else "start"
        here = seg.points[-1] if direction > 0 else seg.points[0]
        options = sorted(set(seg.links_at(end)) - {seg.id})
        if not options:
            direction = -direction
            continue
        nxt = layers.road(int(options[rng.integers(len(options))]))
        if np.allclose(nxt.points[0, :2], here[:2], atol=1e-6):
            seg, s, direction = nxt, 0.0, 1
        else:
            seg, s, direction = nxt, nxt.length, -1


def generate_trajectory(start, layers: GeometryLayers | None, speed_mps: float, duration: float,
                        rng: np.random.Generator, road_bound: bool = False,
                        heading_deg: float | None = None) -> Trajectory:
    """Road walk for road-bound nodes, straight constant-velocity path otherwise.

    The random draws (heading, then walk choices) are made in the same order
    whatever the branch so the stream layout stays stable.
    """
    start = np.asarray(start, dtype=float)
    heading = math.radians(heading_deg) if heading_deg is not None else float(rng.uniform(0, 2 * math.pi))
    flip = int(rng.integers(2))
    if speed_mps <= 0:
        return Trajectory.stationary(start)
    if road_bound:
        if layers is None or not layers.roads:
            raise GeometryError("road-bound trajectory requested but the road graph is empty")
        proj = project_to_road(start, layers)
        return road_walk(layers, proj.segment_id, proj.arc_length, 1 if flip else -1,
                         speed_mps, duration, rng, height=float(start[2]))
    velocity = speed_mps * np.array([math.cos(heading), math.sin(heading), 0.0])
    return straight_trajectory(start, velocity, duration)


# ---------------------------------------------------------------------------
# placement

def _random_road_point(layers: GeometryLayers, rng: np.random.Generator) -> np.ndarray:
    lengths = np.array([r.length for r in layers.roads])
    k = int(rng.choice(len(lengths), p=lengths / lengths.sum()))
    r = layers.roads[k]
    return r.point_at(float(rng.uniform(0.0, r.length)))


def _free_point(layers: GeometryLayers, rng: np.random.Generator, max_tries: int = 100_000) -> np.ndarray:
    for _ in range(max_tries):
        x, y = rng.uniform(0.0, layers.extent, size=2)
        if not any(b.contains_xy(x, y) for b in layers.buildings):
            return np.array([x, y, 0.0])
    raise GeometryError("could not find a free position outside all buildings")


def place_nodes(config, layers: GeometryLayers) -> list[Node]:
    """Instantiate the configured population, trajectories included.

    Scatterer groups are skipped when nodes without antennas are disabled.
    Road-bound groups fall back to free placement and straight paths when
    the road layer is switched off (WINNER-style simple movement).
    """
    features = config.features
    nodes: list[Node] = []
    for group in config.nodes:
        if group.kind == "scatterer" and not features.nodes_without_antennas:
            continue
        use_roads = group.road_bound and features.road_layer
        if use_roads and not layers.roads:
            raise GeometryError(f"group {group.name!r} is road-bound but the road graph is empty")
        rng = substream(config.seed, "nodes", group.name)
        for i in range(group.count):
            node_id = f"{group.name}{i}"
            if group.positions is not None:
                p = np.asarray(group.positions[i], dtype=float)
                if use_roads:
                    proj = project_to_road(p, layers)
                    p = np.append(layers.road(proj.segment_id).point_at(proj.arc_length)[:2], p[2])
            elif use_roads:
                p = _random_road_point(layers, rng)
                p[2] = group.height_m
            else:
                p = _free_point(layers, rng)
                p[2] = group.height_m
            traj = generate_trajectory(
                p, layers, group.speed_mps, config.duration_s,
                substream(config.seed, "trajectory", node_id),
                road_bound=use_roads and features.trajectories,
                heading_deg=group.heading_deg,
            )
            station = group.kind == "station"
            if station:
                antenna = AntennaConfig.from_spec(group.antenna) if features.antenna_embedding \
                    else AntennaConfig.isotropic()
            else:
                antenna = None
            nodes.append(Node(
                id=node_id,
                kind="station" if station else "scatterer_object",
                group=group.name,
                role=group.role,
                dimensions=tuple(group.dimensions_m),
                is_scatterer=group.scatterer,
                road_bound=use_roads,
                trajectory=traj,
                antenna=antenna,
                yaw=math.radians(group.heading_deg or 0.0),
            ))
    return nodes


# ---------------------------------------------------------------------------
# CSV exchange

def export_trajectories(nodes: list[Node]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node_id", "t", "x", "y", "z"])
    for n in nodes:
        for t, p in zip(n.trajectory.times, n.trajectory.points):
            w.writerow([n.id, repr(float(t)), *(repr(float(v)) for v in p)])
    return buf.getvalue()


def import_trajectories(text: str) -> dict[str, Trajectory]:
    rows: dict[str, list] = {}
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["node_id", "t", "x", "y", "z"]:
        raise ValueError("expected columns node_id,t,x,y,z")
    for row in reader:
        rows.setdefault(row["node_id"], []).append(
            (float(row["t"]), (float(row["x"]), float(row["y"]), float(row["z"]))))
    return {nid: Trajectory(tuple(t for t, _ in r), tuple(p for _, p in r)) for nid, r in rows.items()}
