"""Report figures.  Rendered off-screen with the Agg backend."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import import_geometry  # noqa: E402
from .mobility import import_trajectories  # noqa: E402


def _style(ax):
    ax.grid(True, alpha=0.3)
    ax.tick_params(labelsize=8)


def plot_playground(out: Path, path: Path) -> None:
    layers = import_geometry((out / "geometry.json").read_text(encoding="utf-8"))
    fig, ax = plt.subplots(figsize=(6, 6))
    for r in layers.roads:
        p = r.points
        ax.plot(p[:, 0], p[:, 1], color="0.75", lw=2, zorder=1)
    for b in layers.buildings:
        c, (sx, sy, _), yaw = b.center, b.size, b.yaw
        u = np.array([np.cos(yaw), np.sin(yaw)])
        v = np.array([-np.sin(yaw), np.cos(yaw)])
        corners = [c[:2] + a * sx / 2 * u + s * sy / 2 * v for a, s in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
        ax.add_patch(plt.Polygon(corners, closed=True, fc="0.35", ec="none", zorder=2))
    tracks = {}
    traj = out / "trajectories.csv"
    if traj.exists():
        for name, tr in import_trajectories(traj.read_text(encoding="utf-8")).items():
            tracks[name] = np.asarray(tr.points)[:, :2]
    for name, pts in sorted(tracks.items()):
        ax.plot(pts[:, 0], pts[:, 1], lw=1, zorder=3)
        ax.plot(pts[0, 0], pts[0, 1], "o", ms=3, zorder=4)
        ax.annotate(name, pts[0], fontsize=6)
    ax.set_xlim(0, layers.extent)
    ax.set_ylim(0, layers.extent)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_link(s, path: Path) -> None:
    fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
    t = s.times
    axes[0].plot(t, s.path_gain_db, lw=1)
    axes[0].set_ylabel("path gain [dB]")
    axes[1].plot(t, s.delay_spread * 1e9, lw=1)
    axes[1].set_ylabel("rms DS [ns]")
    if s.los.size == t.size:
        axes[2].step(t, s.los, where="post", lw=1)
    axes[2].set_ylabel("LOS")
    axes[2].set_yticks([0, 1])
    axes[2].set_xlabel("t [s]")
    for ax in axes:
        _style(ax)
    fig.suptitle(f"link {s.link_id}: {s.tx} -> {s.rx}, {s.band_hz / 1e9:.2f} GHz", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(out: Path, summaries) -> list[Path]:
    fig_dir = Path(out) / "figures"
    fig_dir.mkdir(exist_ok=True)
    paths = []
    if (Path(out) / "geometry.json").exists():
        p = fig_dir / "playground.png"
        plot_playground(Path(out), p)
        paths.append(p)
    for s in summaries:
        p = fig_dir / f"link{s.link_id}.png"
        plot_link(s, p)
        paths.append(p)
    (fig_dir / "index.json").write_text(json.dumps([q.name for q in paths], indent=1), encoding="utf-8")
    return paths
