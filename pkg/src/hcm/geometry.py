"""Geometry layer: buildings, road graph and environment classes.

Everything here is immutable after construction.  Buildings are closed,
yaw-rotated cuboids and are the only objects that block line of sight.
Roads form an undirected graph of polylines at ground level; each segment
stores the ids of the segments touching each of its two ends.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import ENVIRONMENT_CLASSES, GeometryError, QueryError

#: Overlaps shallower than this (meters) do not block a ray.
GRAZING_TOLERANCE = 1e-9

Point = tuple[float, float, float]


@dataclass(frozen=True)
class Building:
    id: int
    center: Point
    size: Point          # (len_x, len_y, height) in the building's own frame
    yaw: float = 0.0     # radians about +z

    def __post_init__(self):
        if any(not s > 0 for s in self.size):
            raise GeometryError(f"building {self.id}: size components must be > 0")
        if not all(math.isfinite(v) for v in (*self.center, *self.size, self.yaw)):
            raise GeometryError(f"building {self.id}: non-finite value")

    def contains_xy(self, x, y) -> np.ndarray:
        """Vectorised footprint test (closed footprint, ignores height)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.asarray(x) - self.center[0]
        dy = np.asarray(y) - self.center[1]
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return (np.abs(lx) <= self.size[0] / 2) & (np.abs(ly) <= self.size[1] / 2)


@dataclass(frozen=True)
class RoadSegment:
    id: int
    polyline: tuple[Point, ...]
    width: float
    start_links: tuple[int, ...] = ()
    end_links: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.polyline) < 2:
            raise GeometryError(f"road {self.id}: needs at least 2 polyline points")
        if not self.width > 0:
            raise GeometryError(f"road {self.id}: width must be > 0")
        for p, q in zip(self.polyline, self.polyline[1:]):
            if p == q:
                raise GeometryError(f"road {self.id}: consecutive points coincide")

    @functools.cached_property
    def points(self) -> np.ndarray:
        return np.asarray(self.polyline, dtype=float)

    @functools.cached_property
    def cumulative(self) -> np.ndarray:
        """Arc length at every polyline vertex."""
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        return np.array([np.interp(s, self.cumulative, self.points[:, k]) for k in range(3)])

    def links_at(self, end: str) -> tuple[int, ...]:
        return self.start_links if end == "start" else self.end_links


@dataclass(frozen=True)
class EnvironmentGrid:
    origin: tuple[float, float]
    cell_size: float
    cells: tuple[tuple[str, ...], ...]   # cells[iy][ix]

    def __post_init__(self):
        if not self.cell_size > 0:
            raise GeometryError("environment cell_size must be > 0")
        if not self.cells or not self.cells[0]:
            raise GeometryError("environment grid is empty")
        width = len(self.cells[0])
        for row in self.cells:
            if len(row) != width:
                raise GeometryError("environment grid rows differ in length")
            for label in row:
                if label not in ENVIRONMENT_CLASSES:
                    raise GeometryError(f"unknown environment class {label!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.cells), len(self.cells[0])

    @classmethod
    def uniform(cls, extent: float, cell_size: float, label: str, origin=(0.0, 0.0)):
        n = max(1, math.ceil(extent / cell_size - 1e-12))
        return cls(tuple(origin), float(cell_size), tuple(tuple([label] * n) for _ in range(n)))


@dataclass(frozen=True)
class GeometryLayers:
    buildings: tuple[Building, ...]
    roads: tuple[RoadSegment, ...]
    environment: EnvironmentGrid
    extent: float

    def __post_init__(self):
        ids = [r.id for r in self.roads]
        if len(set(ids)) != len(ids):
            raise GeometryError("duplicate road ids")
        known = set(ids)
        by_id = {r.id: r for r in self.roads}
        for r in self.roads:
            for ref in (*r.start_links, *r.end_links):
                if ref not in known:
                    raise GeometryError(f"road {r.id}: link to unknown road {ref}")
                other = by_id[ref]
                if r.id not in (*other.start_links, *other.end_links):
                    raise GeometryError(f"road {r.id}: link to road {ref} is not symmetric")
        bids = [b.id for b in self.buildings]
        if len(set(bids)) != len(bids):
            raise GeometryError("duplicate building ids")

    def road(self, road_id: int) -> RoadSegment:
        return self._road_index[road_id]

    @functools.cached_property
    def _road_index(self) -> dict[int, RoadSegment]:
        return {r.id: r for r in self.roads}

    @functools.cached_property
    def _building_arrays(self):
        if not self.buildings:
            return None
        center = np.array([b.center for b in self.buildings], dtype=float)
        half = np.array([b.size for b in self.buildings], dtype=float) / 2
        yaw = np.array([b.yaw for b in self.buildings], dtype=float)
        return center, half, yaw

    @functools.cached_property
    def _road_pieces(self):
        p0, p1, seg, s0 = [], [], [], []
        for r in sorted(self.roads, key=lambda r: r.id):
            pts = r.points
            p0.append(pts[:-1, :2])
            p1.append(pts[1:, :2])
            seg.append(np.full(len(pts) - 1, r.id))
            s0.append(r.cumulative[:-1])
        return np.concatenate(p0), np.concatenate(p1), np.concatenate(seg), np.concatenate(s0)


# ---------------------------------------------------------------------------
# generation

def manhattan_layout(extent: float, block: float, road: float):
    """Block and road-line coordinates of a centred Manhattan grid.

    Returns ``(block_starts, road_centers)``: the lower edge of each block
    along one axis and the centre line of each road between blocks.  Raises
    :class:`GeometryError` if not even one block fits.
    """
    n_blocks = int(math.floor((extent + road) / (block + road) + 1e-12))
    if n_blocks < 1:
        raise GeometryError(f"extent {extent} m cannot fit one {block} m block")
    used = n_blocks * block + (n_blocks - 1) * road
    margin = (extent - used) / 2
    starts = margin + np.arange(n_blocks) * (block + road)
    centers = starts[:-1] + block + road / 2
    return starts, centers


def generate_random_environment(config, rng: np.random.Generator) -> GeometryLayers:
    """Manhattan-style playground: rectangular blocks separated by roads.

    Roads run between adjacent blocks and are split into segments at every
    intersection; only intersection-to-intersection pieces are kept.  Each
    block receives a building with probability ``building_density`` and a
    height drawn uniformly from ``building_height_m``.
    """
    pg = config.playground
    features = config.features
    starts, centers = manhattan_layout(pg.extent_m, pg.block_m, pg.road_width_m)

    buildings = []
    lo, hi = pg.building_height_m
    # draws are made for every block regardless of the layer flag so that the
    # stream position does not depend on it
    keep = rng.random((len(starts), len(starts))) < pg.building_density
    heights = rng.uniform(lo, hi, size=(len(starts), len(starts)))
    if features.building_layer:
        for iy, y0 in enumerate(starts):
            for ix, x0 in enumerate(starts):
                if not keep[iy, ix]:
                    continue
                h = float(heights[iy, ix])
                buildings.append(Building(
                    id=len(buildings),
                    center=(float(x0 + pg.block_m / 2), float(y0 + pg.block_m / 2), h / 2),
                    size=(pg.block_m, pg.block_m, h),
                ))

    roads = grid_roads(centers, pg.road_width_m) if features.road_layer else ()
    env = EnvironmentGrid.uniform(pg.extent_m, pg.environment_cell_m, pg.environment_class)
    return GeometryLayers(tuple(buildings), roads, env, float(pg.extent_m))


def grid_roads(centers, width: float) -> tuple[RoadSegment, ...]:
    """Road segments between consecutive intersections of a square grid."""
    n = len(centers)
    if n < 2:
        return ()
    per_line = n - 1
    n_h = n * per_line

    def h_id(j, i):   # horizontal line y = centers[j], piece between x_i and x_{i+1}
        return j * per_line + i

    def v_id(i, j):   # vertical line x = centers[i], piece between y_j and y_{j+1}
        return n_h + i * per_line + j

    def incident(i, j):
        """Segment ids meeting at intersection (x_i, y_j)."""
        out = []
        if i > 0:
            out.append(h_id(j, i - 1))
        if i < per_line:
            out.append(h_id(j, i))
        if j > 0:
            out.append(v_id(i, j - 1))
        if j < per_line:
            out.append(v_id(i, j))
        return out

    segs = {}
    for j in range(n):
        for i in range(per_line):
            sid = h_id(j, i)
            segs[sid] = RoadSegment(
                sid,
                ((float(centers[i]), float(centers[j]), 0.0), (float(centers[i + 1]), float(centers[j]), 0.0)),
                float(width),
                tuple(s for s in incident(i, j) if s != sid),
                tuple(s for s in incident(i + 1, j) if s != sid),
            )
    for i in range(n):
        for j in range(per_line):
            sid = v_id(i, j)
            segs[sid] = RoadSegment(
                sid,
                ((float(centers[i]), float(centers[j]), 0.0), (float(centers[i]), float(centers[j + 1]), 0.0)),
                float(width),
                tuple(s for s in incident(i, j) if s != sid),
                tuple(s for s in incident(i, j + 1) if s != sid),
            )
    return tuple(segs[k] for k in sorted(segs))


# ---------------------------------------------------------------------------
# exchange format

def export_geometry(layers: GeometryLayers) -> str:
    env = layers.environment
    doc = {
        "format": "hcm-geometry",
        "version": 1,
        "extent_m": layers.extent,
        "buildings": [
            {"id": b.id, "center": list(b.center), "size": list(b.size), "yaw": b.yaw}
            for b in layers.buildings
        ],
        "roads": [
            {
                "id": r.id,
                "polyline": [list(p) for p in r.polyline],
                "width": r.width,
                "start_links": list(r.start_links),
                "end_links": list(r.end_links),
            }
            for r in layers.roads
        ],
        "environment": {
            "origin": list(env.origin),
            "cell_size": env.cell_size,
            "classes": [list(row) for row in env.cells],
        },
    }
    return json.dumps(doc, indent=1)


def _footprint_to_box(fp, height: float, where: str):
    pts = np.asarray(fp, dtype=float)
    if pts.shape != (4, 2):
        raise GeometryError(f"{where}: footprint must be 4 [x, y] corners")
    edges = np.roll(pts, -1, axis=0) - pts
    lengths = np.linalg.norm(edges, axis=1)
    if np.any(lengths <= 0):
        raise GeometryError(f"{where}: degenerate footprint")
    for k in range(4):
        cosang = np.dot(edges[k], edges[(k + 1) % 4]) / (lengths[k] * lengths[(k + 1) % 4])
        if abs(cosang) > 1e-6:
            raise GeometryError(f"{where}: footprint is not a rectangle")
    center = pts.mean(axis=0)
    yaw = math.atan2(edges[0][1], edges[0][0])
    return (float(center[0]), float(center[1]), height / 2), (float(lengths[0]), float(lengths[1]), height), yaw


def _infer_links(polylines: dict[int, list]) -> dict[int, tuple[list, list]]:
    ends = {rid: (tuple(pl[0]), tuple(pl[-1])) for rid, pl in polylines.items()}
    out = {}
    for rid, (a, b) in ends.items():
        links = ([], [])
        for other, (oa, ob) in ends.items():
            if other == rid:
                continue
            for k, p in enumerate((a, b)):
                if np.allclose(p, oa, atol=1e-6) or np.allclose(p, ob, atol=1e-6):
                    links[k].append(other)
        out[rid] = links
    return out


def import_geometry(document: str | dict) -> GeometryLayers:
    """Build layers from a geometry-exchange JSON document."""
    try:
        doc = json.loads(document) if isinstance(document, str) else document
    except json.JSONDecodeError as exc:
        raise GeometryError(f"parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise GeometryError("document must be a JSON object")
    extra = set(doc) - {"format", "version", "extent_m", "buildings", "roads", "environment"}
    if extra:
        raise GeometryError(f"unknown top-level keys {sorted(extra)}")

    buildings = []
    for k, entry in enumerate(doc.get("buildings", [])):
        bid = entry.get("id", k)
        where = f"building {bid}"
        if "footprint" in entry:
            center, size, yaw = _footprint_to_box(entry["footprint"], float(entry["height"]), where)
        else:
            try:
                center = tuple(float(v) for v in entry["center"])
                size = tuple(float(v) for v in entry["size"])
            except KeyError as exc:
                raise GeometryError(f"{where}: missing {exc}") from exc
            yaw = float(entry.get("yaw", 0.0))
            if len(center) != 3 or len(size) != 3:
                raise GeometryError(f"{where}: center and size need 3 components")
        buildings.append(Building(bid, center, size, yaw))

    raw_roads = doc.get("roads", [])
    polylines = {}
    for k, entry in enumerate(raw_roads):
        rid = entry.get("id", k)
        pl = [tuple(float(v) for v in (list(p) + [0.0])[:3]) if len(p) == 2 else tuple(float(v) for v in p)
              for p in entry.get("polyline", [])]
        polylines[rid] = pl
    inferred = None
    if any("start_links" not in e or "end_links" not in e for e in raw_roads):
        inferred = _infer_links(polylines)
    roads = []
    for k, entry in enumerate(raw_roads):
        rid = entry.get("id", k)
        if "start_links" in entry and "end_links" in entry:
            links = (entry["start_links"], entry["end_links"])
        else:
            links = inferred[rid]
        roads.append(RoadSegment(rid, tuple(polylines[rid]), float(entry.get("width", 0.0)),
                                 tuple(int(v) for v in links[0]), tuple(int(v) for v in links[1])))

    extent = doc.get("extent_m")
    if extent is None:
        coords = [0.0]
        for b in buildings:
            coords += [abs(b.center[0]) + max(b.size[:2]), abs(b.center[1]) + max(b.size[:2])]
        for r in roads:
            coords += [abs(v) for p in r.polyline for v in p[:2]]
        extent = max(coords) or 1.0
    extent = float(extent)

    env_doc = doc.get("environment")
    if env_doc:
        env = EnvironmentGrid(
            tuple(float(v) for v in env_doc.get("origin", (0.0, 0.0))),
            float(env_doc["cell_size"]),
            tuple(tuple(row) for row in env_doc["classes"]),
        )
    else:
        env = EnvironmentGrid.uniform(extent, 50.0, "urban")
    return GeometryLayers(tuple(buildings), tuple(roads), env, extent)


# ---------------------------------------------------------------------------
# queries

def segments_blocked(a, b, center, half, yaw, tol: float = GRAZING_TOLERANCE) -> np.ndarray:
    """Element-wise test whether open segments (a, b) enter rotated boxes.

    All arguments broadcast against each other along the leading axis
    (``a``, ``b``, ``center``, ``half``: ``(..., 3)``; ``yaw``: ``(...)``).
    The box is shrunk by ``tol`` so that touching or grazing a face does not
    count as blocking.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    rel = a - center
    d = b - a
    # rotate into the box frame (rotation by -yaw)
    ox = c * rel[..., 0] + s * rel[..., 1]
    oy = -s * rel[..., 0] + c * rel[..., 1]
    dx = c * d[..., 0] + s * d[..., 1]
    dy = -s * d[..., 0] + c * d[..., 1]
    o = np.stack(np.broadcast_arrays(ox, oy, rel[..., 2]), axis=-1)
    dv = np.stack(np.broadcast_arrays(dx, dy, d[..., 2]), axis=-1)
    h = np.asarray(half, dtype=float) - tol

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t1 = (-h - o) / dv
        t2 = (h - o) / dv
    parallel = np.abs(dv) < 1e-300
    inside_slab = np.abs(o) < h
    tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = np.maximum(np.max(tmin, axis=-1), 0.0)
    t_exit = np.minimum(np.min(tmax, axis=-1), 1.0)
    return (t_exit > t_enter) & np.all(h > 0, axis=-1)


def is_los(a, b, layers: GeometryLayers) -> bool:
    """True unless the open segment a-b passes through a building interior."""
    arrays = layers._building_arrays
    if arrays is None:
        return True
    a = tuple(np.asarray(a, dtype=float))
    b = tuple(np.asarray(b, dtype=float))
    if b < a:   # canonical order makes the test exactly symmetric
        a, b = b, a
    center, half, yaw = arrays
    return not bool(np.any(segments_blocked(np.array(a), np.array(b), center, half, yaw)))


def environment_cell_index(p, env: EnvironmentGrid) -> tuple[int, int]:
    """(iy, ix) of the cell containing ``p``.

    A point exactly on a boundary belongs to the lower-index cell; points
    outside the grid are clamped to the nearest edge cell.
    """
    ny, nx = env.shape
    fx = (float(p[0]) - env.origin[0]) / env.cell_size
    fy = (float(p[1]) - env.origin[1]) / env.cell_size
    ix = min(max(math.ceil(fx) - 1, 0), nx - 1)
    iy = min(max(math.ceil(fy) - 1, 0), ny - 1)
    return iy, ix


def environment_class_at(p, layers: GeometryLayers) -> str:
    iy, ix = environment_cell_index(p, layers.environment)
    return layers.environment.cells[iy][ix]


@dataclass(frozen=True)
class RoadProjection:
    segment_id: int
    arc_length: float
    lateral_offset: float   # signed, positive to the left of travel direction
    distance: float


def project_to_road(p, layers: GeometryLayers, tie_tol: float = 1e-9) -> RoadProjection:
    """Closest point on any road centreline (horizontal plane).

    Ties within ``tie_tol`` meters go to the lowest segment id.
    """
    if not layers.roads:
        raise QueryError("road graph is empty")
    p0, p1, seg, s0 = layers._road_pieces
    q = np.asarray(p, dtype=float)[:2]
    d = p1 - p0
    L2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", q - p0, d) / L2, 0.0, 1.0)
    foot = p0 + t[:, None] * d
    dist = np.linalg.norm(q - foot, axis=1)
    cand = np.flatnonzero(dist <= dist.min() + tie_tol)
    k = cand[np.lexsort((cand, seg[cand]))[0]]
    L = math.sqrt(L2[k])
    rel = q - foot[k]
    cross = (d[k, 0] * rel[1] - d[k, 1] * rel[0]) / L
    return RoadProjection(int(seg[k]), float(s0[k] + t[k] * L), float(cross), float(dist[k]))
