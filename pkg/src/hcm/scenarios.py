"""Channel scenario parameter tables.

A scenario holds one :class:`ConditionParams` block per propagation
condition.  Tables are plain TOML documents; see ``data/scenarios.toml`` for
the built-in set and the key layout.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .core import LSP_NAMES, Condition, ConfigError
from .tomlio import loads

log = logging.getLogger(__name__)

#: Eigenvalues of a cross-correlation matrix down to this value are clamped
#: to zero; anything more negative is rejected.
PSD_TOLERANCE = 1e-9


@dataclass(frozen=True)
class LspDistribution:
    mu: float
    sigma: float
    d_corr: float


@dataclass(frozen=True)
class ConditionParams:
    pathloss_A: float
    pathloss_B: float
    pathloss_C: float
    lsp: dict[str, LspDistribution]
    cross_correlation: np.ndarray
    n_clusters: int
    r_tau: float
    per_cluster_shadow_sigma: float
    c_phi: float

    def d_corr(self, name: str) -> float:
        return self.lsp[name].d_corr

    def to_dict(self) -> dict:
        return {
            "pathloss": {"A": self.pathloss_A, "B": self.pathloss_B, "C": self.pathloss_C},
            "n_clusters": self.n_clusters,
            "r_tau": self.r_tau,
            "per_cluster_shadow_sigma": self.per_cluster_shadow_sigma,
            "c_phi": self.c_phi,
            "lsp": {
                k: {"mu": v.mu, "sigma": v.sigma, "d_corr": v.d_corr} for k, v in self.lsp.items()
            },
            "cross_correlation": self.cross_correlation.tolist(),
        }


@dataclass(frozen=True)
class ScenarioParams:
    scenario_id: str
    los: ConditionParams
    nlos: ConditionParams = field(repr=False)

    def for_condition(self, condition: Condition | str) -> ConditionParams:
        return self.los if Condition(condition) is Condition.LOS else self.nlos

    def to_dict(self) -> dict:
        return {"los": self.los.to_dict(), "nlos": self.nlos.to_dict()}


def repair_correlation(matrix, name: str = "cross_correlation") -> np.ndarray:
    """Validate a correlation matrix and clamp tiny negative eigenvalues.

    The matrix must be 5x5, symmetric and unit-diagonal.  Eigenvalues in
    ``[-PSD_TOLERANCE, 0)`` are clamped to zero and the result rescaled to
    unit diagonal (with a warning); more negative ones raise
    :class:`ConfigError`.
    """
    m = np.asarray(matrix, dtype=float)
    n = len(LSP_NAMES)
    if m.shape != (n, n):
        raise ConfigError(f"must be {n}x{n}, got {m.shape}", name)
    if not np.all(np.isfinite(m)):
        raise ConfigError("entries must be finite", name)
    if not np.allclose(m, m.T, atol=1e-12):
        raise ConfigError("matrix is not symmetric", name)
    if not np.allclose(np.diag(m), 1.0, atol=1e-12):
        raise ConfigError("diagonal must be 1", name)
    w, v = np.linalg.eigh(m)
    if w.min() < -PSD_TOLERANCE:
        raise ConfigError(f"not positive semi-definite (min eigenvalue {w.min():.3g})", name)
    if w.min() < 0.0:
        log.warning("%s: clamping eigenvalue %.3g to 0", name, w.min())
        m = (v * np.clip(w, 0.0, None)) @ v.T
        d = np.sqrt(np.diag(m))
        m = m / np.outer(d, d)
        m = 0.5 * (m + m.T)
    m = m.copy()
    m.setflags(write=False)
    return m


def _condition_from_dict(data: dict, where: str) -> ConditionParams:
    known = {"pathloss", "n_clusters", "r_tau", "per_cluster_shadow_sigma", "c_phi", "lsp",
             "cross_correlation"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", where)
    missing = known - set(data)
    if missing:
        raise ConfigError(f"missing keys {sorted(missing)}", where)

    pl = data["pathloss"]
    if set(pl) != {"A", "B", "C"}:
        raise ConfigError("needs exactly A, B, C", f"{where}.pathloss")
    lsp = {}
    if set(data["lsp"]) != set(LSP_NAMES):
        raise ConfigError(f"needs exactly {list(LSP_NAMES)}", f"{where}.lsp")
    for name in LSP_NAMES:
        entry = data["lsp"][name]
        if set(entry) != {"mu", "sigma", "d_corr"}:
            raise ConfigError("needs exactly mu, sigma, d_corr", f"{where}.lsp.{name}")
        dist = LspDistribution(float(entry["mu"]), float(entry["sigma"]), float(entry["d_corr"]))
        if dist.d_corr <= 0:
            raise ConfigError("must be > 0", f"{where}.lsp.{name}.d_corr")
        if dist.sigma < 0:
            raise ConfigError("must be >= 0", f"{where}.lsp.{name}.sigma")
        lsp[name] = dist

    n_clusters = data["n_clusters"]
    if not isinstance(n_clusters, int) or n_clusters < 1:
        raise ConfigError("must be an integer >= 1", f"{where}.n_clusters")
    r_tau = float(data["r_tau"])
    if not r_tau > 1.0:
        raise ConfigError("must be > 1", f"{where}.r_tau")
    zeta = float(data["per_cluster_shadow_sigma"])
    if zeta < 0:
        raise ConfigError("must be >= 0", f"{where}.per_cluster_shadow_sigma")
    c_phi = float(data["c_phi"])
    if c_phi < 0:
        raise ConfigError("must be >= 0", f"{where}.c_phi")

    return ConditionParams(
        pathloss_A=float(pl["A"]),
        pathloss_B=float(pl["B"]),
        pathloss_C=float(pl["C"]),
        lsp=lsp,
        cross_correlation=repair_correlation(data["cross_correlation"], f"{where}.cross_correlation"),
        n_clusters=n_clusters,
        r_tau=r_tau,
        per_cluster_shadow_sigma=zeta,
        c_phi=c_phi,
    )


def scenarios_from_dict(data: dict) -> dict[str, ScenarioParams]:
    out = {}
    for sid, body in data.items():
        if not isinstance(body, dict) or set(body) != {"los", "nlos"}:
            raise ConfigError("scenario needs exactly [los] and [nlos] sections", sid)
        out[sid] = ScenarioParams(
            sid,
            _condition_from_dict(body["los"], f"{sid}.los"),
            _condition_from_dict(body["nlos"], f"{sid}.nlos"),
        )
    return out


def load_scenarios(text: str) -> dict[str, ScenarioParams]:
    """Parse a scenario parameter document (TOML)."""
    return scenarios_from_dict(loads(text))


def load_scenario_file(path: str | Path) -> dict[str, ScenarioParams]:
    return load_scenarios(Path(path).read_text(encoding="utf-8"))


@functools.lru_cache(maxsize=1)
def _builtin() -> dict[str, ScenarioParams]:
    text = resources.files("hcm").joinpath("data/scenarios.toml").read_text(encoding="utf-8")
    return load_scenarios(text)


def builtin_scenarios() -> dict[str, ScenarioParams]:
    """The shipped scenario table, keyed by scenario id."""
    return dict(_builtin())
