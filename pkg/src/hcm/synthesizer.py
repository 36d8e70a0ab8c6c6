"""Channel synthesizer: clusters + antennas + motion -> tapped delay line.

Phase conventions per cluster kind:

* static: random initial sub-path phase plus the explicit Doppler term
  ``2*pi*nu*(t - t_ref)`` with ``nu = (v_rx.u_aoa + v_tx.u_aod) f / c``;
* direct: exact geometric phase ``-k d(t)``, which carries the Doppler
  shift of both endpoints;
* dynamic: random sub-path phase plus ``-k (d1 + d2)(t)``, recomputed every
  step, so scatterer motion enters through geometry only.

Narrowband taps: sub-path delay differences inside a cluster only affect
phase.  Tap delays are absolute propagation delays.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .clusters import ClusterSet
from .core import SPEED_OF_LIGHT, Condition, ContractError
from .links import LinkState
from .mobility import AntennaConfig
from .scenarios import ConditionParams, ScenarioParams

CIR_MAGIC = b"HCMCIR01"
CIR_VERSION = 1
_CIR_HEADER = struct.Struct("<8sIIIII")   # magic, version, link id, n_rx, n_tx, n_steps
_F64 = struct.Struct("<d")
_U32 = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class ChannelSample:
    link_id: int
    t: float
    delays: np.ndarray          # (n_taps,) seconds, shared by all element pairs
    amplitudes: np.ndarray      # (n_rx, n_tx, n_taps) complex

    @property
    def n_rx(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def n_tx(self) -> int:
        return self.amplitudes.shape[1]

    def total_power(self) -> np.ndarray:
        """Sum of tap powers per (u, s)."""
        return np.sum(np.abs(self.amplitudes) ** 2, axis=-1)


def path_loss_db(distance: float, band_hz: float, scenario: ScenarioParams | ConditionParams,
                 condition: Condition | str | None = None) -> float:
    """``A log10(d) + B + C log10(f / 5 GHz)`` for the condition's (A, B, C)."""
    if not distance > 0:
        raise ValueError("distance must be > 0")
    params = scenario.for_condition(condition) if isinstance(scenario, ScenarioParams) else scenario
    return (params.pathloss_A * math.log10(distance) + params.pathloss_B
            + params.pathloss_C * math.log10(band_hz / 5e9))


def _element_terms(antenna: AntennaConfig, heading: float, az_rad: np.ndarray, k: float) -> np.ndarray:
    """Pattern gain times array phase factor, shape (n_elements, N, M)."""
    c, s = math.cos(heading), math.sin(heading)
    ux, uy = np.cos(az_rad), np.sin(az_rad)
    out = np.empty((antenna.n_elements,) + az_rad.shape, dtype=complex)
    for e, el in enumerate(antenna.elements):
        ox, oy, _ = el.offset
        gx, gy = c * ox - s * oy, s * ox + c * oy
        body_az = np.degrees(az_rad - heading - el.boresight_yaw)
        out[e] = el.pattern.gain(body_az) * np.exp(1j * k * (gx * ux + gy * uy))
    return out


def synthesize_sample(cset: ClusterSet, state: LinkState, tx_antenna: AntennaConfig | None,
                      rx_antenna: AntennaConfig | None, band_hz: float, t: float | None = None,
                      tx_heading: float = 0.0, rx_heading: float = 0.0,
                      scenario: ScenarioParams | ConditionParams | None = None,
                      shadow_fading_db: float | None = None) -> ChannelSample:
    """Per-antenna-pair complex taps for one instant.

    Path loss is applied when ``scenario`` is given; shadow fading defaults
    to the value in ``cset.lsps``.
    """
    if tx_antenna is None or rx_antenna is None:
        raise ContractError("both link ends need an antenna configuration")
    t = state.t if t is None else t
    if abs(t - cset.t) > 1e-9 or abs(t - state.t) > 1e-9:
        raise ContractError("cluster set, link state and synthesis time disagree")

    powers = cset.effective_powers()
    keep = [i for i, p in enumerate(powers) if p > 0]
    clusters = [cset.clusters[i] for i in keep]
    n_rx, n_tx = rx_antenna.n_elements, tx_antenna.n_elements
    if not clusters:
        return ChannelSample(cset.link_id, t, np.zeros(0), np.zeros((n_rx, n_tx, 0), dtype=complex))

    k = 2 * math.pi * band_hz / SPEED_OF_LIGHT
    M = max(c.n_subpaths for c in clusters)
    N = len(clusters)
    amp = np.zeros((N, M))
    aod = np.zeros((N, M))
    aoa = np.zeros((N, M))
    base = np.zeros((N, M))
    static_rows = []
    for n, c in enumerate(clusters):
        m = c.n_subpaths
        amp[n, :m] = math.sqrt(powers[keep[n]] / m)
        aod[n, :m] = c.aod + np.asarray(c.aod_offsets)
        aoa[n, :m] = c.aoa + np.asarray(c.aoa_offsets)
        aod[n, m:] = c.aod
        aoa[n, m:] = c.aoa
        if c.kind == "direct":
            base[n, :m] = -k * state.distance_3d
        elif c.kind == "dynamic":
            base[n, :m] = np.asarray(c.phases) - k * c.path_length
        else:
            base[n, :m] = c.phases
            static_rows.append(n)

    aod_r = np.radians(aod)
    aoa_r = np.radians(aoa)
    if static_rows:
        rows = np.array(static_rows)
        vt, vr = state.tx_velocity, state.rx_velocity
        nu = ((vr[0] * np.cos(aoa_r[rows]) + vr[1] * np.sin(aoa_r[rows]))
              + (vt[0] * np.cos(aod_r[rows]) + vt[1] * np.sin(aod_r[rows]))) * band_hz / SPEED_OF_LIGHT
        t_ref = np.array([clusters[n].t_ref for n in rows])[:, None]
        base[rows] += 2 * math.pi * nu * (t - t_ref)

    rx_terms = _element_terms(rx_antenna, rx_heading, aoa_r, k)
    tx_terms = _element_terms(tx_antenna, tx_heading, aod_r, k)
    h = np.einsum("unm,snm,nm->usn", rx_terms, tx_terms, amp * np.exp(1j * base))

    loss_db = 0.0
    if scenario is not None:
        loss_db += path_loss_db(state.distance_3d, band_hz, scenario, cset.condition)
    if shadow_fading_db is None:
        shadow_fading_db = cset.lsps.shadow_fading if cset.lsps is not None else 0.0
    loss_db += shadow_fading_db
    h *= 10.0 ** (-loss_db / 20.0)

    delays = cset.reference_delay + np.array([c.delay for c in clusters])
    return ChannelSample(cset.link_id, t, delays, h)


def frequency_response(sample: ChannelSample, freq_offsets) -> np.ndarray:
    """``H[u, s, f] = sum_taps a * exp(-j 2 pi f tau)``."""
    f = np.asarray(freq_offsets, dtype=float)
    phasor = np.exp(-2j * math.pi * np.outer(sample.delays, f))
    return sample.amplitudes @ phasor


# ---------------------------------------------------------------------------
# CIR exchange

class CirWriter:
    """Streaming writer of the ``HCMCIR01`` binary format.

    Layout (little endian): header ``magic[8] version:u32 link_id:u32
    n_rx:u32 n_tx:u32 n_steps:u32``; then per time step ``t:f64`` followed,
    for every (u, s) in row-major order, by ``n_taps:u32`` and ``n_taps``
    triples ``(delay, re, im)`` of f64.
    """

    def __init__(self, fh: BinaryIO, link_id: int, n_rx: int, n_tx: int, n_steps: int):
        self.fh = fh
        self.n_rx, self.n_tx, self.n_steps = n_rx, n_tx, n_steps
        self.written = 0
        fh.write(_CIR_HEADER.pack(CIR_MAGIC, CIR_VERSION, link_id, n_rx, n_tx, n_steps))

    def write(self, sample: ChannelSample) -> None:
        if (sample.n_rx, sample.n_tx) != (self.n_rx, self.n_tx):
            raise ContractError("element counts differ from header")
        if self.written >= self.n_steps:
            raise ContractError("more samples than announced in header")
        parts = [_F64.pack(sample.t)]
        n = len(sample.delays)
        for u in range(self.n_rx):
            for s in range(self.n_tx):
                a = sample.amplitudes[u, s]
                block = np.empty((n, 3), dtype="<f8")
                block[:, 0] = sample.delays
                block[:, 1] = a.real
                block[:, 2] = a.imag
                parts.append(_U32.pack(n))
                parts.append(block.tobytes())
        self.fh.write(b"".join(parts))
        self.written += 1


def read_cir(data: bytes) -> dict:
    """Parse an ``HCMCIR01`` blob into header fields and a list of samples.

    Each sample is ``(t, taps)`` with ``taps[u][s]`` an ``(n, 3)`` array of
    ``(delay, re, im)``.
    """
    magic, version, link_id, n_rx, n_tx, n_steps = _CIR_HEADER.unpack_from(data)
    if magic != CIR_MAGIC:
        raise ValueError("not a CIR file")
    pos = _CIR_HEADER.size
    samples = []
    for _ in range(n_steps):
        (t,) = _F64.unpack_from(data, pos)
        pos += 8
        taps = []
        for _u in range(n_rx):
            row = []
            for _s in range(n_tx):
                (n,) = _U32.unpack_from(data, pos)
                pos += 4
                row.append(np.frombuffer(data, dtype="<f8", count=3 * n, offset=pos).reshape(n, 3))
                pos += 24 * n
            taps.append(row)
        samples.append((t, taps))
    return {"version": version, "link_id": link_id, "n_rx": n_rx, "n_tx": n_tx, "samples": samples}


def cir_csv_rows(sample: ChannelSample):
    for u in range(sample.n_rx):
        for s in range(sample.n_tx):
            for tap, (d, a) in enumerate(zip(sample.delays, sample.amplitudes[u, s])):
                yield [sample.link_id, repr(sample.t), u, s, tap, repr(float(d)),
                       repr(float(a.real)), repr(float(a.imag))]


CIR_CSV_HEADER = ["link_id", "t", "u", "s", "tap", "delay_s", "re", "im"]


def cir_to_csv(samples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CIR_CSV_HEADER)
    for s in samples:
        w.writerows(cir_csv_rows(s))
    return buf.getvalue()
