"""Simulation configuration.

The configuration document is TOML: a handful of top-level keys plus named
sections.  Every key has a default except ``seed`` and ``duration_s``, and unknown
keys are rejected.  The full grammar is documented in ``docs/config.md``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .core import ENVIRONMENT_CLASSES, ConfigError
from .tomlio import dumps, loads

MAX_SEED = 2**64 - 1


@dataclass(frozen=True)
class PlaygroundSpec:
    extent_m: float = 500.0
    source: str = "random"
    geometry_file: Optional[str] = None
    block_m: float = 80.0
    road_width_m: float = 20.0
    building_density: float = 1.0
    building_height_m: tuple[float, float] = (10.0, 30.0)
    environment_class: str = "urban"
    environment_cell_m: float = 50.0

    def validate(self, path: str) -> None:
        if not self.extent_m > 0:
            raise ConfigError("must be > 0", f"{path}.extent_m")
        if self.source not in ("random", "file"):
            raise ConfigError("must be 'random' or 'file'", f"{path}.source")
        if self.source == "file" and not self.geometry_file:
            raise ConfigError("required when source = 'file'", f"{path}.geometry_file")
        if not self.block_m > 0:
            raise ConfigError("must be > 0", f"{path}.block_m")
        if not self.road_width_m > 0:
            raise ConfigError("must be > 0", f"{path}.road_width_m")
        if not 0.0 <= self.building_density <= 1.0:
            raise ConfigError("must be in [0, 1]", f"{path}.building_density")
        lo, hi = self.building_height_m
        if not 0 < lo <= hi:
            raise ConfigError("needs 0 < min <= max", f"{path}.building_height_m")
        if self.environment_class not in ENVIRONMENT_CLASSES:
            raise ConfigError(f"must be one of {ENVIRONMENT_CLASSES}", f"{path}.environment_class")
        if not self.environment_cell_m > 0:
            raise ConfigError("must be > 0", f"{path}.environment_cell_m")


#: Features that appear only in the V2X column of the module feature matrix.
V2X_ONLY_FEATURES = (
    "dynamic_scatterers",
    "situation_transition",
    "cluster_memory",
    "reoccurring_situations",
    "nodes_without_antennas",
    "trajectories",
    "building_layer",
    "road_layer",
    "import_geometry",
)


@dataclass(frozen=True)
class Features:
    # shared by both columns
    antenna_embedding: bool = True
    sub_path_generation: bool = True
    time_evolution: bool = True
    link_state_classification: bool = True
    # V2X only
    dynamic_scatterers: bool = True
    situation_transition: bool = True
    cluster_memory: bool = True
    reoccurring_situations: bool = True
    nodes_without_antennas: bool = True
    trajectories: bool = True
    building_layer: bool = True
    road_layer: bool = True
    import_geometry: bool = True

    @property
    def winner_parity(self) -> bool:
        """True when every V2X-only feature is switched off."""
        return not any(getattr(self, name) for name in V2X_ONLY_FEATURES)

    def validate(self, path: str) -> None:
        if self.cluster_memory and not self.reoccurring_situations:
            raise ConfigError("cluster_memory requires reoccurring_situations", f"{path}.cluster_memory")


PRESETS = {
    "v2x": {},
    "winner": {name: False for name in V2X_ONLY_FEATURES},
}


@dataclass(frozen=True)
class AntennaSpec:
    array: str = "single"
    n: int = 1
    spacing_m: float = 0.0254
    pattern: str = "isotropic"
    boresight_deg: float = 0.0
    pattern_gains: Optional[list[float]] = None

    def validate(self, path: str) -> None:
        if self.array not in ("single", "ula"):
            raise ConfigError("must be 'single' or 'ula'", f"{path}.array")
        if self.n < 1 or (self.array == "single" and self.n != 1):
            raise ConfigError("invalid element count", f"{path}.n")
        if self.pattern not in ("isotropic", "directional", "table"):
            raise ConfigError("must be 'isotropic', 'directional' or 'table'", f"{path}.pattern")
        if self.pattern == "table":
            g = self.pattern_gains or []
            if len(g) < 2 or 360 % len(g) != 0:
                raise ConfigError("needs a count dividing 360", f"{path}.pattern_gains")


@dataclass(frozen=True)
class NodeGroup:
    name: str
    count: int = 1
    kind: str = "station"
    role: str = "vehicle"
    positions: Optional[list[list[float]]] = None
    height_m: float = 1.5
    speed_mps: float = 0.0
    heading_deg: Optional[float] = None
    road_bound: bool = False
    is_scatterer: Optional[bool] = None
    dimensions_m: tuple[float, float, float] = (4.5, 1.8, 1.5)
    antenna: AntennaSpec = field(default_factory=AntennaSpec)

    @property
    def scatterer(self) -> bool:
        return self.kind == "scatterer" if self.is_scatterer is None else self.is_scatterer

    def validate(self, path: str) -> None:
        if not self.name:
            raise ConfigError("must be non-empty", f"{path}.name")
        if self.count < 0:
            raise ConfigError("must be >= 0", f"{path}.count")
        if self.kind not in ("station", "scatterer"):
            raise ConfigError("must be 'station' or 'scatterer'", f"{path}.kind")
        if self.role not in ("vehicle", "infrastructure"):
            raise ConfigError("must be 'vehicle' or 'infrastructure'", f"{path}.role")
        if self.positions is not None:
            if len(self.positions) != self.count:
                raise ConfigError("length must equal count", f"{path}.positions")
            for p in self.positions:
                if len(p) != 3:
                    raise ConfigError("each position needs 3 components", f"{path}.positions")
        if self.speed_mps < 0:
            raise ConfigError("must be >= 0", f"{path}.speed_mps")
        if any(d <= 0 for d in self.dimensions_m):
            raise ConfigError("must be positive", f"{path}.dimensions_m")
        self.antenna.validate(f"{path}.antenna")


def _default_nodes() -> list[NodeGroup]:
    return [
        NodeGroup(name="bs", count=1, role="infrastructure", height_m=10.0),
        NodeGroup(name="car", count=2, speed_mps=10.0, road_bound=True),
        NodeGroup(name="traffic", count=4, kind="scatterer", speed_mps=12.0, road_bound=True),
    ]


@dataclass(frozen=True)
class PairingSpec:
    mode: str = "tx_rx"
    tx: list[str] = field(default_factory=lambda: ["bs"])
    rx: list[str] = field(default_factory=lambda: ["car"])
    max_range_m: float = 200.0

    def validate(self, path: str) -> None:
        if self.mode not in ("all_pairs", "tx_rx", "max_range"):
            raise ConfigError("must be all_pairs, tx_rx or max_range", f"{path}.mode")
        if self.mode == "max_range" and not self.max_range_m > 0:
            raise ConfigError("must be > 0", f"{path}.max_range_m")


@dataclass(frozen=True)
class ScenarioSpec:
    file: Optional[str] = None
    class_map: dict[str, str] = field(default_factory=lambda: {
        "dense_urban": "urban",
        "urban": "urban",
        "suburban": "urban",
        "rural": "highway",
        "highway": "highway",
    })
    infrastructure_height_m: float = 5.0

    def validate(self, path: str) -> None:
        for k in self.class_map:
            if k not in ENVIRONMENT_CLASSES:
                raise ConfigError(f"unknown environment class {k!r}", f"{path}.class_map")


@dataclass(frozen=True)
class LspSpec:
    cell_m: float = 0.0   # 0 = half the smallest correlation distance
    margin_m: float = 50.0

    def validate(self, path: str) -> None:
        if self.cell_m < 0:
            raise ConfigError("must be >= 0", f"{path}.cell_m")
        if self.margin_m < 0:
            raise ConfigError("must be >= 0", f"{path}.margin_m")


@dataclass(frozen=True)
class ClusterSpec:
    ramp_s: float = 0.1
    memory_ttl_s: float = 30.0
    memory_capacity: int = 4096
    capture_radius_m: float = 300.0
    reflection_loss_db: float = 13.0
    situation_eps_m: float = 1.0

    def validate(self, path: str) -> None:
        for name in ("ramp_s", "memory_ttl_s", "capture_radius_m", "situation_eps_m"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", f"{path}.{name}")
        if self.memory_capacity < 1:
            raise ConfigError("must be >= 1", f"{path}.memory_capacity")


@dataclass(frozen=True)
class OutputSpec:
    cir_csv: bool = True
    lsp_binary: bool = True
    lsp_csv: bool = False


@dataclass(frozen=True)
class SimConfig:
    seed: int
    duration_s: float
    time_step_s: float = 0.01
    bands_hz: list[float] = field(default_factory=lambda: [5.9e9])
    playground: PlaygroundSpec = field(default_factory=PlaygroundSpec)
    features: Features = field(default_factory=Features)
    nodes: list[NodeGroup] = field(default_factory=_default_nodes)
    pairing: PairingSpec = field(default_factory=PairingSpec)
    scenarios: ScenarioSpec = field(default_factory=ScenarioSpec)
    lsp: LspSpec = field(default_factory=LspSpec)
    clusters: ClusterSpec = field(default_factory=ClusterSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    @property
    def winner_parity_mode(self) -> bool:
        return self.features.winner_parity

    @property
    def n_steps(self) -> int:
        """Number of grid instants ``t_k = k * time_step_s`` in [0, duration]."""
        return int(round(self.duration_s / self.time_step_s + 1e-9)) + 1

    def time_grid(self):
        import numpy as np

        return np.arange(self.n_steps) * self.time_step_s

    def validate(self) -> None:
        if not 0 <= self.seed <= MAX_SEED:
            raise ConfigError("must be a 64-bit unsigned integer", "seed")
        if not self.time_step_s > 0:
            raise ConfigError("must be > 0", "time_step_s")
        if not self.duration_s >= self.time_step_s:
            raise ConfigError("must be >= time_step_s", "duration_s")
        if not self.bands_hz:
            raise ConfigError("needs at least one band", "bands_hz")
        if any(not b > 0 for b in self.bands_hz):
            raise ConfigError("carrier frequencies must be > 0", "bands_hz")
        self.playground.validate("playground")
        self.features.validate("features")
        names = [g.name for g in self.nodes]
        if len(set(names)) != len(names):
            raise ConfigError("group names must be unique", "nodes")
        for i, g in enumerate(self.nodes):
            g.validate(f"nodes[{i}]")
        self.pairing.validate("pairing")
        for side in ("tx", "rx"):
            for name in getattr(self.pairing, side):
                if name not in names:
                    raise ConfigError(f"unknown node group {name!r}", f"pairing.{side}")
        self.scenarios.validate("scenarios")
        self.lsp.validate("lsp")
        self.clusters.validate("clusters")
        if self.playground.source == "file" and not self.features.import_geometry:
            raise ConfigError("source = 'file' needs features.import_geometry", "playground.source")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def replace(self, **changes) -> "SimConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# generic dict <-> dataclass conversion

def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                continue
            out[f.name] = _to_plain(value)
        return out
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)][0]
        return None if value is None else _coerce(value, inner, path)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError("expected a section", path)
        return _build(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected a boolean", path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string", path)
        return value
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError("expected an array", path)
        if origin is tuple:
            if len(value) != len(args):
                raise ConfigError(f"expected {len(args)} values", path)
            return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError("expected a table", path)
        return {str(k): _coerce(v, args[1], f"{path}.{k}") for k, v in value.items()}
    raise TypeError(f"unsupported config type {hint!r}")  # pragma: no cover


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        where = f"{path}.{sorted(extra)[0]}" if path else sorted(extra)[0]
        raise ConfigError("unknown key", where)
    kwargs = {}
    for f in dataclasses.fields(cls):
        where = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], where)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError("required key missing", where)
    return cls(**kwargs)


def config_from_dict(data: dict) -> SimConfig:
    data = dict(data)
    features = data.get("features")
    if isinstance(features, dict) and "preset" in features:
        features = dict(features)
        preset = features.pop("preset")
        if preset not in PRESETS:
            raise ConfigError(f"must be one of {sorted(PRESETS)}", "features.preset")
        data["features"] = {**PRESETS[preset], **features}
    cfg = _build(SimConfig, data, "")
    cfg.validate()
    return cfg


def load_config(text: str) -> SimConfig:
    """Parse and validate a configuration document."""
    return config_from_dict(loads(text))


def load_config_file(path: str | Path) -> SimConfig:
    return load_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: SimConfig) -> str:
    return dumps(cfg.to_dict())
