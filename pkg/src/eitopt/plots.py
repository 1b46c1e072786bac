"""Static SVG renderings: meshes, layout overlays, metric bars, reconstructions."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import ElectrodeLayout, PolygonDomain
from .mesh import TriangularMesh

__all__ = [
    "mesh_svg",
    "overlay_svg",
    "mu_bar_svg",
    "field_svg",
    "training_svg",
    "delta_svg",
]

_META = {"Date": None}  # keep SVG output byte-stable across reruns


def _electrode_segments(domain: PolygonDomain, layout: ElectrodeLayout):
    segs = []
    for e in range(layout.k):
        lo, hi = layout.extent(e)
        side = int(layout.side_of[e])
        segs.append(domain.point_on_side(side, np.array([lo, hi])))
    return segs


def mesh_svg(path, mesh: TriangularMesh, domain=None, layout=None, title=None):
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.triplot(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.triangles, lw=0.3, color="0.55")
    if domain is not None and layout is not None:
        for e, seg in enumerate(_electrode_segments(domain, layout)):
            ax.plot(seg[:, 0], seg[:, 1], color="green", lw=3)
            mid = seg.mean(axis=0)
            ax.annotate(str(e + 1), mid, fontsize=7, color="darkgreen")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def overlay_svg(path, domain: PolygonDomain, optimized: ElectrodeLayout, uniform: ElectrodeLayout):
    """Uniform midpoints (black) plotted atop optimized midpoints (blue)."""
    fig, ax = plt.subplots(figsize=(6, 6))
    outline = np.vstack([domain.outer, domain.outer[:1]])
    ax.plot(outline[:, 0], outline[:, 1], color="0.4", lw=1)
    for h in domain.holes:
        hh = np.vstack([h, h[:1]])
        ax.plot(hh[:, 0], hh[:, 1], color="0.4", lw=1)
    xy_o, xy_u = optimized.xy, uniform.xy
    ax.plot(xy_o[:, 0], xy_o[:, 1], "o", color="tab:blue", ms=9, label="optimized")
    ax.plot(xy_u[:, 0], xy_u[:, 1], "o", mfc="none", mec="black", ms=12, label="uniform")
    for e in range(optimized.k):
        ax.annotate(str(e + 1), xy_o[e], fontsize=7, xytext=(4, 4), textcoords="offset points")
    ax.legend(loc="center")
    ax.set_aspect("equal")
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def mu_bar_svg(path, mu_a, mu_b, label_a="optimized", label_b="standard"):
    """Per-measurement mean modeling errors for two layouts."""
    fig, ax = plt.subplots(figsize=(9, 4))
    idx = np.arange(len(mu_a))
    ax.bar(idx, np.abs(mu_a), width=1.0, color="black", label=label_a)
    ax.bar(idx, np.abs(mu_b), width=1.0, color="red", alpha=0.55, label=label_b)
    ax.set_xlabel("measurement index")
    ax.set_ylabel("|mean modeling error| (V)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def field_svg(path, mesh: TriangularMesh, values, title=None, vmin=None, vmax=None):
    fig, ax = plt.subplots(figsize=(6, 6))
    tpc = ax.tripcolor(
        mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.triangles, np.asarray(values),
        shading="gouraud", vmin=vmin, vmax=vmax,
    )
    fig.colorbar(tpc, ax=ax, shrink=0.8)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def training_svg(path, record: dict):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].semilogy(record["loss_curve"])
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[1].semilogy(record["gradient_curve"])
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("gradient norm")
    fig.suptitle(f"stopped: {record.get('stop_reason', '?')}")
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def delta_svg(path, delta_values: dict):
    """Per-pair distinguishability for both layouts on coarse and fine meshes."""
    fig, ax = plt.subplots(figsize=(9, 4))
    styles = {"coarse": "--", "fine": "-"}
    colors = {"a": "tab:blue", "b": "black"}
    names = {"a": "optimized", "b": "standard"}
    for mesh_label, series in delta_values.items():
        for side in ("a", "b"):
            ax.semilogy(
                series[side],
                styles[mesh_label],
                color=colors[side],
                label=f"{names[side]} ({mesh_label})",
            )
    ax.set_xlabel("sample pair")
    ax.set_ylabel("distinguishability")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
