"""Pipeline orchestration, file exports and the statistics report.

Stage order follows the data flow between layers::

    geometry -> nodes -> links -> lsp -> clusters -> synthesis

No stage reads a layer written by a later one.  All files are first
written to a scratch directory inside the output directory and moved into
place only when every stage succeeded.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .clusters import ClusterEngine, ClusterSet
from .config import SimConfig, dump_config, load_config_file
from .core import LSP_NAMES, Condition, ConfigError, HcmError
from .links import (LinkRecord, LinkState, assign_scenario, build_link_table, classify_link_state,
                    export_link_table, export_state_trace)
from .lsp import LspMapSet, field_to_bytes, field_to_csv, generate_map_set, sample_lsps
from .mobility import Node, export_trajectories, place_nodes
from .rng import substream, substream_id
from .scenarios import ScenarioParams, builtin_scenarios, load_scenario_file
from .synthesizer import CIR_CSV_HEADER, CirWriter, cir_csv_rows, read_cir, synthesize_sample

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "HCM_OUTPUT_DIR"
MANIFEST = "manifest.json"

CLUSTER_TRACE_HEADER = ["link_id", "t", "cluster_id", "kind", "delay_s", "power", "aod_deg",
                        "aoa_deg", "ramp_weight"]


STAGES = ("geometry", "nodes", "links", "lsp", "clusters", "synthesis")

#: Stages whose output may depend on each V2X-only feature flag; every
#: stage downstream of a consumer is a consumer too.
FLAG_CONSUMERS = {
    "dynamic_scatterers": ("clusters", "synthesis"),
    "situation_transition": ("lsp", "clusters", "synthesis"),
    "cluster_memory": ("clusters", "synthesis"),
    "reoccurring_situations": ("clusters", "synthesis"),
    "nodes_without_antennas": ("nodes", "clusters", "synthesis"),
    "trajectories": STAGES[1:],
    "building_layer": STAGES,
    "road_layer": STAGES,
    "import_geometry": STAGES,
}


def stage_of_file(rel: str) -> str:
    """Stage that produced an output file (paths relative to the run directory)."""
    if rel == "geometry.json":
        return "geometry"
    if rel == "trajectories.csv":
        return "nodes"
    if rel in ("links.csv", "link_states.csv"):
        return "links"
    if rel.startswith("lsp/"):
        return "lsp"
    if rel.startswith("clusters_b"):
        return "clusters"
    if rel.startswith("cir/"):
        return "synthesis"
    return "config"


class RunError(HcmError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class ReportError(HcmError):
    pass


@dataclass
class RunManifest:
    config: dict
    substreams: list[str]
    files: dict[str, str]                    # relative path -> sha256
    stages: list[dict] = field(default_factory=list)
    bands: list[dict] = field(default_factory=list)
    time_step_s: float = 0.0
    winner_parity: bool = False
    cluster_stats: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stages

def build_geometry(cfg: SimConfig, base_dir: Path | None = None) -> geo.GeometryLayers:
    pg = cfg.playground
    if pg.source == "file":
        path = Path(pg.geometry_file)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        layers = geo.import_geometry(path.read_text(encoding="utf-8"))
        layers = geo.GeometryLayers(
            layers.buildings if cfg.features.building_layer else (),
            layers.roads if cfg.features.road_layer else (),
            layers.environment, layers.extent)
        return layers
    return geo.generate_random_environment(cfg, substream(cfg.seed, "geometry"))


def load_scenario_table(cfg: SimConfig, base_dir: Path | None = None) -> dict[str, ScenarioParams]:
    table = builtin_scenarios()
    if cfg.scenarios.file:
        path = Path(cfg.scenarios.file)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        table.update(load_scenario_file(path))
    return table


@dataclass
class LinkTrace:
    record: LinkRecord
    steps: list[tuple[LinkState, str]]      # (state, current scenario id)


def _link_grid(record: LinkRecord, times: np.ndarray) -> np.ndarray:
    mask = np.zeros(len(times), dtype=bool)
    for a, b in record.intervals:
        mask |= (times >= a - 1e-9) & (times <= b + 1e-9)
    return times[mask]


def trace_links(cfg: SimConfig, records, nodes: dict[str, Node], layers, scenarios) -> list[LinkTrace]:
    traces = []
    times = cfg.time_grid()
    for rec in records:
        steps = []
        for t in _link_grid(rec, times):
            state = classify_link_state(rec, float(t), nodes, layers, cfg.features.link_state_classification)
            if cfg.features.situation_transition:
                sid = assign_scenario(nodes[rec.tx], nodes[rec.rx], layers, cfg.scenarios.class_map,
                                      cfg.scenarios.infrastructure_height_m, float(t))
            else:
                sid = rec.scenario_id
            if sid not in scenarios:
                raise ConfigError(f"scenario {sid!r} is not defined", "scenarios")
            steps.append((state, sid))
        traces.append(LinkTrace(rec, steps))
    return traces


def _interval_starts(steps, dt: float) -> set[int]:
    starts = {0}
    for i in range(1, len(steps)):
        if steps[i][0].t - steps[i - 1][0].t > dt * 1.5:
            starts.add(i)
    return starts


# ---------------------------------------------------------------------------
# run

def run(config_path: str | Path, out_dir: str | Path | None = None, seed_override: int | None = None,
        band_filter: list[float] | None = None, config: SimConfig | None = None) -> RunManifest:
    """Execute every stage and write all exports into ``out_dir``."""
    base_dir = None
    if config is None:
        config_path = Path(config_path)
        base_dir = config_path.parent
        cfg = load_config_file(config_path)
    else:
        cfg = config
    if seed_override is not None:
        cfg = cfg.replace(seed=int(seed_override))
    if out_dir is None:
        out_dir = os.environ.get(OUTPUT_DIR_ENV)
        if not out_dir:
            raise ConfigError("no output directory given", "--out")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
    try:
        manifest = _run_into(cfg, scratch, base_dir, band_filter)
        for child in scratch.iterdir():
            target = out / child.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            child.rename(target)
        (out / MANIFEST).write_text(manifest.to_json(), encoding="utf-8")
        return manifest
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def _run_into(cfg: SimConfig, out: Path, base_dir, band_filter) -> RunManifest:
    stages: list[dict] = []
    substreams: list[str] = []
    written: list[Path] = []

    def write_text(rel: str, text: str) -> None:
        p = out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8", newline="")
        written.append(p)

    class Stage:
        def __init__(self, name, reads, writes):
            self.entry = {"name": name, "reads": reads, "writes": writes}

        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            self.entry["seconds"] = round(time.perf_counter() - self.t0, 6)
            stages.append(self.entry)
            if exc is not None and not isinstance(exc, RunError):
                raise RunError(self.entry["name"], exc) from exc
            return False

    bands = [(i, b) for i, b in enumerate(cfg.bands_hz)
             if band_filter is None or any(abs(b - f) <= 1.0 for f in band_filter)]
    if not bands:
        raise ConfigError("band filter removed every band", "--band-filter")

    write_text("config.toml", dump_config(cfg))

    with Stage("geometry", [], ["geometry"]):
        layers = build_geometry(cfg, base_dir)
        scenarios = load_scenario_table(cfg, base_dir)
        if cfg.playground.source == "random":
            substreams.append(substream_id("geometry"))
        write_text("geometry.json", geo.export_geometry(layers))

    with Stage("nodes", ["geometry"], ["nodes"]):
        node_list = place_nodes(cfg, layers)
        nodes = {n.id: n for n in node_list}
        for g in cfg.nodes:
            substreams.append(substream_id("nodes", g.name))
        substreams += [substream_id("trajectory", n.id) for n in node_list]
        write_text("trajectories.csv", export_trajectories(node_list))

    with Stage("links", ["geometry", "nodes"], ["mesh"]):
        stations = [n for n in node_list if n.is_station]
        # the table covers every configured band so link ids and band indices,
        # and with them all per-link randomness, do not depend on the filter
        records = build_link_table(
            stations, cfg.pairing, cfg.bands_hz, cfg.time_grid(), layers,
            lambda a, b: assign_scenario(a, b, layers, cfg.scenarios.class_map,
                                         cfg.scenarios.infrastructure_height_m))
        kept_bands = {i for i, _ in bands}
        records = [r for r in records if r.band_index in kept_bands]
        for r in records:
            if r.scenario_id not in scenarios:
                raise ConfigError(f"scenario {r.scenario_id!r} is not defined", "scenarios")
        traces = trace_links(cfg, records, nodes, layers, scenarios)
        write_text("links.csv", export_link_table(records))
        write_text("link_states.csv", export_state_trace(
            (tr.record.link_id, s) for tr in traces for s, _ in tr.steps))

    with Stage("lsp", ["geometry", "nodes", "mesh"], ["lsp"]):
        maps: dict[tuple[str, int, str], LspMapSet] = {}
        for tr in traces:
            for _, sid in tr.steps:
                key = (tr.record.tx, tr.record.band_index, sid)
                if key in maps:
                    continue
                maps[key] = generate_map_set(tr.record.tx, tr.record.band_index, scenarios[sid],
                                             layers.extent, cfg.seed, cfg.lsp.margin_m, cfg.lsp.cell_m)
                for (name, cond), f in maps[key].fields.items():
                    substreams.append(substream_id("lsp", key[0], sid, name, cond.value, key[1]))
                    stem = f"lsp/{key[0]}_b{key[1]}_{sid}_{name}_{cond.value}"
                    if cfg.output.lsp_binary:
                        p = out / f"{stem}.bin"
                        p.parent.mkdir(parents=True, exist_ok=True)
                        p.write_bytes(field_to_bytes(f))
                        written.append(p)
                    if cfg.output.lsp_csv:
                        write_text(f"{stem}.csv", field_to_csv(f))

    cluster_stats = {}
    with Stage("clusters", ["geometry", "nodes", "mesh", "lsp"], ["clusters"]):
        per_link: dict[int, list[tuple[ClusterSet, float]]] = {}
        trace_rows: dict[int, list] = {i: [] for i, _ in bands}
        dt = cfg.time_step_s
        for tr in traces:
            rec = tr.record
            engine = ClusterEngine(rec, scenarios, nodes, layers, cfg.features, cfg.clusters, cfg.seed,
                                   cfg.scenarios.class_map, cfg.scenarios.infrastructure_height_m)
            starts = _interval_starts(tr.steps, dt)
            sets = []
            prev = None
            for i, (state, sid) in enumerate(tr.steps):
                lsps = sample_lsps(maps[(rec.tx, rec.band_index, sid)], state.rx_position, state.los,
                                   scenarios[sid])
                if prev is None or i in starts:
                    prev = engine.start(state, lsps)
                else:
                    prev = engine.evolve(prev, state, lsps, state.t - prev.t)
                sets.append((prev, lsps.shadow_fading))
                powers = prev.effective_powers()
                absd = prev.absolute_delays()
                for c, p, d in zip(prev.clusters, powers, absd):
                    trace_rows[rec.band_index].append([
                        rec.link_id, repr(prev.t), c.id, c.kind, repr(float(d)), repr(float(p)),
                        repr(float(c.aod)), repr(float(c.aoa)), repr(c.ramp_weight(prev.t))])
            substreams += [substream_id("clusters", rec.link_id, k, rec.band_index) for k in range(engine.draws)]
            per_link[rec.link_id] = sets
            cluster_stats[str(rec.link_id)] = dict(engine.stats)
        for b, rows in trace_rows.items():
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(CLUSTER_TRACE_HEADER)
            w.writerows(rows)
            write_text(f"clusters_b{b}.csv", buf.getvalue())

    with Stage("synthesis", ["nodes", "mesh", "clusters"], ["cir"]):
        (out / "cir").mkdir(exist_ok=True)
        for tr in traces:
            rec = tr.record
            tx, rx = nodes[rec.tx], nodes[rec.rx]
            path = out / "cir" / f"link{rec.link_id}.bin"
            csv_rows = []
            with open(path, "wb") as fh:
                writer = CirWriter(fh, rec.link_id, rx.antenna.n_elements, tx.antenna.n_elements, len(tr.steps))
                for (state, sid), (cset, sf) in zip(tr.steps, per_link[rec.link_id]):
                    sample = synthesize_sample(
                        cset, state, tx.antenna, rx.antenna, rec.band_hz,
                        tx_heading=tx.heading_at(state.t), rx_heading=rx.heading_at(state.t),
                        scenario=scenarios[cset.scenario_id], shadow_fading_db=sf)
                    writer.write(sample)
                    if cfg.output.cir_csv:
                        csv_rows.extend(cir_csv_rows(sample))
            written.append(path)
            if cfg.output.cir_csv:
                buf = io.StringIO()
                w = csv.writer(buf, lineterminator="\n")
                w.writerow(CIR_CSV_HEADER)
                w.writerows(csv_rows)
                write_text(f"cir/link{rec.link_id}.csv", buf.getvalue())

    files = {str(p.relative_to(out)).replace(os.sep, "/"): sha256_file(p) for p in sorted(written)}
    return RunManifest(
        config=cfg.to_dict(),
        substreams=substreams,
        files=files,
        stages=stages,
        bands=[{"index": i, "band_hz": b} for i, b in bands],
        time_step_s=cfg.time_step_s,
        winner_parity=cfg.winner_parity_mode,
        cluster_stats=cluster_stats,
    )


def verify_digests(out_dir: str | Path) -> dict[str, bool]:
    out = Path(out_dir)
    manifest = RunManifest.from_json((out / MANIFEST).read_text(encoding="utf-8"))
    return {rel: (out / rel).exists() and sha256_file(out / rel) == digest
            for rel, digest in manifest.files.items()}


# ---------------------------------------------------------------------------
# summary

SUMMARY_HEADER = ["link_id", "tx", "rx", "band_hz", "scenario", "n_steps", "los_fraction",
                  "rms_delay_spread_s", "mean_path_gain_db", "doppler_mean_hz", "doppler_spread_hz"]


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise ReportError(f"missing output file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def rms_delay_spread(delays, powers) -> float:
    p = np.asarray(powers, dtype=float)
    if p.size == 0 or p.sum() <= 0:
        return 0.0
    d = np.asarray(delays, dtype=float)
    p = p / p.sum()
    m = np.sum(p * d)
    return float(math.sqrt(max(np.sum(p * d * d) - m * m, 0.0)))


def doppler_from_strongest_tap(times, tap_lists) -> np.ndarray:
    """Instantaneous frequency of the strongest tap between consecutive steps.

    ``tap_lists[k]`` is an ``(n, 3)`` array of ``(delay, re, im)``; at step k
    the strongest tap is matched to the step-(k+1) tap nearest in delay.
    Pairs spanning an interval gap (more than 1.5 steps apart) are skipped.
    """
    out = []
    if len(times) < 2:
        return np.zeros(0)
    dt_nom = float(np.min(np.diff(times)))
    for k in range(len(times) - 1):
        a, b = tap_lists[k], tap_lists[k + 1]
        dt = times[k + 1] - times[k]
        if len(a) == 0 or len(b) == 0 or dt > 1.5 * dt_nom:
            continue
        i = int(np.argmax(a[:, 1] ** 2 + a[:, 2] ** 2))
        j = int(np.argmin(np.abs(b[:, 0] - a[i, 0])))
        za = complex(a[i, 1], a[i, 2])
        zb = complex(b[j, 1], b[j, 2])
        out.append(np.angle(zb * za.conjugate()) / (2 * math.pi * dt))
    return np.asarray(out)


@dataclass
class LinkSummary:
    link_id: int
    tx: str
    rx: str
    band_hz: float
    scenario: str
    times: np.ndarray
    los: np.ndarray
    delay_spread: np.ndarray
    path_gain_db: np.ndarray
    doppler: np.ndarray

    def row(self) -> list:
        gain_lin = 10.0 ** (self.path_gain_db / 10.0)
        mean_gain = 10 * math.log10(gain_lin.mean()) if gain_lin.size and gain_lin.mean() > 0 else -math.inf
        dop_mean = float(self.doppler.mean()) if self.doppler.size else 0.0
        dop_spread = float(self.doppler.std()) if self.doppler.size else 0.0
        return [self.link_id, self.tx, self.rx, self.band_hz, self.scenario, len(self.times),
                float(self.los.mean()) if self.los.size else 0.0,
                float(self.delay_spread.mean()) if self.delay_spread.size else 0.0,
                mean_gain, dop_mean, dop_spread]


def link_summaries(out_dir: str | Path) -> list[LinkSummary]:
    out = Path(out_dir)
    links = _read_csv(out / "links.csv")
    states = _read_csv(out / "link_states.csv")
    seen = {}
    for r in links:
        seen.setdefault(int(r["link_id"]), r)
    los_by_link: dict[int, list] = {}
    for s in states:
        los_by_link.setdefault(int(s["link_id"]), []).append(s["los"] == Condition.LOS.value)

    result = []
    for link_id, r in sorted(seen.items()):
        path = out / "cir" / f"link{link_id}.bin"
        if not path.exists():
            raise ReportError(f"missing output file: {path}")
        cir = read_cir(path.read_bytes())
        times = np.array([t for t, _ in cir["samples"]])
        first = [taps[0][0] for _, taps in cir["samples"]]
        ds = np.array([rms_delay_spread(tp[:, 0], tp[:, 1] ** 2 + tp[:, 2] ** 2) for tp in first])
        gains = []
        for _, taps in cir["samples"]:
            tot = np.mean([np.sum(tp[:, 1] ** 2 + tp[:, 2] ** 2) for row in taps for tp in row])
            gains.append(10 * math.log10(tot) if tot > 0 else -math.inf)
        result.append(LinkSummary(link_id, r["tx"], r["rx"], float(r["band_hz"]), r["scenario"], times,
                                  np.array(los_by_link.get(link_id, []), dtype=float), ds,
                                  np.array(gains), doppler_from_strongest_tap(times, first)))
    return result


def summarize(out_dir: str | Path, figures: bool = True) -> list[list]:
    """Write ``summary.csv`` and ``summary.txt`` (and figures) for a finished run."""
    out = Path(out_dir)
    if not (out / MANIFEST).exists():
        raise ReportError(f"missing output file: {out / MANIFEST}")
    summaries = link_summaries(out)
    rows = [s.row() for s in summaries]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    w.writerows(rows)
    (out / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")

    lines = ["HCM run summary", "=" * 15, ""]
    for s, row in zip(summaries, rows):
        lines += [
            f"link {s.link_id}: {s.tx} -> {s.rx} @ {s.band_hz / 1e9:.3f} GHz ({s.scenario})",
            f"  steps              {row[5]}",
            f"  LOS fraction       {row[6]:.3f}",
            f"  rms delay spread   {row[7] * 1e9:.2f} ns",
            f"  mean path gain     {row[8]:.2f} dB",
            f"  Doppler mean       {row[9]:.2f} Hz",
            f"  Doppler spread     {row[10]:.2f} Hz",
            "",
        ]
    lines.append("Doppler figures come from strongest-tap phase steps; for static nodes the")
    lines.append("estimate is exactly 0 up to floating-point rounding (~1e-9 Hz).")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if figures:
        from .plotting import render_figures

        render_figures(out, summaries)
    return rows


__all__ = ["run", "STAGES", "FLAG_CONSUMERS", "stage_of_file", "summarize", "RunManifest", "RunError", "ReportError", "verify_digests",
           "rms_delay_spread", "doppler_from_strongest_tap", "LSP_NAMES"]
