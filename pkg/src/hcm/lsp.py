"""LSP layer: spatially correlated large-scale-parameter maps.

Each map is a stationary standard-normal field with autocorrelation
``exp(-d / d_corr)``, generated by filtering white noise in the 2-D
frequency domain (circulant embedding on a zero-padded torus).  A map set
holds one field per (parameter, condition) for a given transmitter, band
and scenario; LSPs are read at the receiver position and then mixed and
transformed to their physical domains.
"""

from __future__ import annotations

import csv
import functools
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft

from .core import ANGLE_SPREAD_CAP_DEG, LSP_NAMES, Condition, ConfigError, QueryError
from .rng import substream
from .scenarios import ConditionParams, ScenarioParams

LSP_MAGIC = b"HCMLSP01"
_HEADER = struct.Struct("<8sIIddd")   # magic, rows, cols, origin x, origin y, cell size

#: Torus padding in correlation distances; the exponential kernel is below
#: e^-10 beyond this, so wrap-around leaves the field correlation intact.
PAD_CORRELATION_LENGTHS = 10.0


@dataclass(frozen=True, eq=False)
class LspField:
    grid: np.ndarray            # (rows, cols) = (ny, nx), row index along y
    origin: tuple[float, float]
    cell_size: float
    d_corr: float
    parameter: str
    condition: Condition

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@functools.lru_cache(maxsize=32)
def _filter(shape: tuple[int, int], cell_size: float, d_corr: float) -> np.ndarray:
    n_y, n_x = shape
    lag_x = np.minimum(np.arange(n_x), n_x - np.arange(n_x)) * cell_size
    lag_y = np.minimum(np.arange(n_y), n_y - np.arange(n_y)) * cell_size
    dist = np.hypot(lag_y[:, None], lag_x[None, :])
    spectrum = sp_fft.rfft2(np.exp(-dist / d_corr)).real
    out = np.sqrt(np.clip(spectrum, 0.0, None))
    out.setflags(write=False)
    return out


def correlated_normal_grid(shape, cell_size: float, d_corr: float, rng: np.random.Generator,
                           standardize: bool = True) -> np.ndarray:
    """Gaussian grid with autocorrelation ``exp(-d/d_corr)``.

    With ``standardize`` the realisation is shifted and scaled to exactly
    zero sample mean and unit sample variance.
    """
    ny, nx = shape
    pad = int(math.ceil(PAD_CORRELATION_LENGTHS * d_corr / cell_size))
    torus = (sp_fft.next_fast_len(ny + pad), sp_fft.next_fast_len(nx + pad))
    white = rng.standard_normal(torus)
    spec = sp_fft.rfft2(white) * _filter(torus, float(cell_size), float(d_corr))
    g = sp_fft.irfft2(spec, s=torus)[:ny, :nx]
    if standardize:
        g = (g - g.mean()) / g.std()
    return np.ascontiguousarray(g)


def generate_lsp_field(shape, origin, cell_size: float, d_corr: float, rng: np.random.Generator,
                       parameter: str = "SF", condition: Condition = Condition.LOS) -> LspField:
    if not cell_size <= d_corr / 2:
        raise ConfigError(f"cell size {cell_size} m exceeds d_corr/2 = {d_corr / 2} m", "lsp.cell_m")
    grid = correlated_normal_grid(tuple(shape), cell_size, d_corr, rng)
    grid.setflags(write=False)
    return LspField(grid, (float(origin[0]), float(origin[1])), float(cell_size), float(d_corr),
                    parameter, Condition(condition))


def value_at(lfield: LspField, p) -> float:
    """Bilinear interpolation; positions outside the grid clamp to its edge."""
    g = lfield.grid
    ny, nx = g.shape
    fx = min(max((float(p[0]) - lfield.origin[0]) / lfield.cell_size, 0.0), nx - 1.0)
    fy = min(max((float(p[1]) - lfield.origin[1]) / lfield.cell_size, 0.0), ny - 1.0)
    ix = min(int(fx), max(nx - 2, 0))
    iy = min(int(fy), max(ny - 2, 0))
    wx = fx - ix
    wy = fy - iy
    ix1 = min(ix + 1, nx - 1)
    iy1 = min(iy + 1, ny - 1)
    return float((1 - wy) * ((1 - wx) * g[iy, ix] + wx * g[iy, ix1])
                 + wy * ((1 - wx) * g[iy1, ix] + wx * g[iy1, ix1]))


def psd_cholesky(matrix, tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == matrix`` for PSD input.

    Rank-deficient matrices are handled by zeroing columns whose pivot falls
    below ``tol``.
    """
    a = np.asarray(matrix, dtype=float)
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if d <= tol:
            continue
        L[j, j] = math.sqrt(d)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


@functools.lru_cache(maxsize=64)
def _factor_cached(key: bytes, n: int) -> np.ndarray:
    return psd_cholesky(np.frombuffer(key).reshape(n, n))


def lsp_factor(matrix) -> np.ndarray:
    m = np.ascontiguousarray(matrix, dtype=float)
    return _factor_cached(m.tobytes(), m.shape[0])


@dataclass(frozen=True)
class LspSet:
    delay_spread: float       # seconds
    k_factor: float           # dB
    asd: float                # degrees
    asa: float                # degrees
    shadow_fading: float      # dB
    normals: tuple[float, ...] = field(default=(0.0,) * 5, compare=False)


def correlate_normals(raw, params: ConditionParams) -> np.ndarray:
    """Apply the cross-correlation factor to raw normals, shape (..., 5)."""
    return np.asarray(raw, dtype=float) @ lsp_factor(params.cross_correlation).T


def physical_lsps(g, params: ConditionParams) -> np.ndarray:
    """Map correlated normals (..., 5) to DS [s], K [dB], ASD, ASA [deg], SF [dB]."""
    g = np.asarray(g, dtype=float)
    mu = np.array([params.lsp[n].mu for n in LSP_NAMES])
    sd = np.array([params.lsp[n].sigma for n in LSP_NAMES])
    x = mu + sd * g
    out = np.empty_like(x)
    out[..., 0] = 10.0 ** x[..., 0]
    out[..., 1] = x[..., 1]
    out[..., 2] = np.minimum(10.0 ** x[..., 2], ANGLE_SPREAD_CAP_DEG)
    out[..., 3] = np.minimum(10.0 ** x[..., 3], ANGLE_SPREAD_CAP_DEG)
    out[..., 4] = sd[4] * g[..., 4]
    return out


def lsps_from_normals(raw, params: ConditionParams) -> LspSet:
    g = correlate_normals(raw, params)
    v = physical_lsps(g, params)
    return LspSet(float(v[0]), float(v[1]), float(v[2]), float(v[3]), float(v[4]),
                  tuple(float(x) for x in g))


@dataclass(frozen=True, eq=False)
class LspMapSet:
    tx: str
    band_index: int
    scenario_id: str
    fields: dict[tuple[str, Condition], LspField]

    def raw_normals(self, p, condition: Condition) -> np.ndarray:
        cond = Condition(condition)
        try:
            return np.array([value_at(self.fields[(n, cond)], p) for n in LSP_NAMES])
        except KeyError as exc:
            raise QueryError(f"map set {self.tx}/{self.band_index} lacks field {exc}") from exc


def grid_spec(extent: float, margin: float, cell: float) -> tuple[tuple[int, int], tuple[float, float]]:
    n = int(math.ceil((extent + 2 * margin) / cell)) + 1
    return (n, n), (-margin, -margin)


def auto_cell_size(scenario: ScenarioParams) -> float:
    return min(c.lsp[n].d_corr for c in (scenario.los, scenario.nlos) for n in LSP_NAMES) / 2


def generate_map_set(tx: str, band_index: int, scenario: ScenarioParams, extent: float,
                     seed: int, margin: float = 50.0, cell: float = 0.0) -> LspMapSet:
    """Ten fields (5 parameters x LOS/nLOS) sharing one grid geometry."""
    cell = cell or auto_cell_size(scenario)
    shape, origin = grid_spec(extent, margin, cell)
    fields = {}
    for cond in (Condition.LOS, Condition.NLOS):
        params = scenario.for_condition(cond)
        for name in LSP_NAMES:
            rng = substream(seed, "lsp", tx, scenario.scenario_id, name, cond.value, band_index)
            fields[(name, cond)] = generate_lsp_field(shape, origin, cell, params.d_corr(name), rng, name, cond)
    return LspMapSet(tx, band_index, scenario.scenario_id, fields)


def sample_lsps(maps: LspMapSet | None, rx_position, condition: Condition, scenario: ScenarioParams) -> LspSet:
    if maps is None:
        raise QueryError("no LSP map set for this link")
    raw = maps.raw_normals(rx_position, condition)
    return lsps_from_normals(raw, scenario.for_condition(condition))


# ---------------------------------------------------------------------------
# export

def field_to_bytes(lfield: LspField) -> bytes:
    rows, cols = lfield.shape
    head = _HEADER.pack(LSP_MAGIC, rows, cols, lfield.origin[0], lfield.origin[1], lfield.cell_size)
    return head + np.ascontiguousarray(lfield.grid, dtype="<f8").tobytes()


def field_from_bytes(data: bytes):
    """Return ``(grid, origin, cell_size)`` from a binary field export."""
    magic, rows, cols, ox, oy, cell = _HEADER.unpack_from(data)
    if magic != LSP_MAGIC:
        raise ValueError("not an LSP field file")
    grid = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=rows * cols).reshape(rows, cols)
    return grid, (ox, oy), cell


def field_to_csv(lfield: LspField) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iy", "ix", "x", "y", "value"])
    rows, cols = lfield.shape
    for iy in range(rows):
        y = lfield.origin[1] + iy * lfield.cell_size
        for ix in range(cols):
            w.writerow([iy, ix, repr(lfield.origin[0] + ix * lfield.cell_size), repr(y),
                        repr(float(lfield.grid[iy, ix]))])
    return buf.getvalue()
