"""Smooth random conductivity fields and deterministic test targets.

Samples come from an exponential-kernel prior: the covariance over mesh
nodes is Gamma(i, j) = a*exp(-||x_i - x_j|| / (2b)) + c*delta_ij, and a draw
is G r where G is the lower Cholesky factor of Gamma (equivalently L^{-1} r
with L = G^{-1}, so L^T L = Gamma^{-1}) and r is a random vector with
entries uniform on (0, 1].
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.spatial.distance import cdist

from .mesh import TriangularMesh

__all__ = [
    "SamplerError",
    "SmoothnessPrior",
    "ConductivitySample",
    "build_covariance",
    "draw_samples",
    "ellipsoid_target",
    "rescale_to_range",
    "sample_to_csv",
    "sample_from_csv",
]


class SamplerError(RuntimeError):
    """Covariance construction failed (usually conditioning)."""


@dataclass(frozen=True)
class ConductivitySample:
    """Per-node conductivity values tied to the mesh they were drawn on."""

    values: np.ndarray
    mesh_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(eq=False)
class SmoothnessPrior:
    """Dense node covariance with cached Cholesky factor and inverse."""

    a: float
    b: float
    c: float
    Gamma: np.ndarray
    mesh_id: str
    chol_lower: np.ndarray

    _inverse: np.ndarray | None = None

    def inverse(self) -> np.ndarray:
        """Dense Gamma^{-1} (computed once, reused)."""
        if self._inverse is None:
            n = self.Gamma.shape[0]
            inv = cho_solve((self.chol_lower, True), np.eye(n))
            self._inverse = 0.5 * (inv + inv.T)
        return self._inverse


def build_covariance(mesh: TriangularMesh, a: float, b: float, c: float) -> SmoothnessPrior:
    """Exponential-kernel covariance over mesh nodes; fails if not SPD."""
    if min(a, b, c) <= 0:
        raise SamplerError("covariance parameters a, b, c must all be positive")
    d = cdist(mesh.nodes, mesh.nodes)
    Gamma = a * np.exp(-d / (2.0 * b))
    np.fill_diagonal(Gamma, a + c)
    try:
        G = np.linalg.cholesky(Gamma)
    except np.linalg.LinAlgError as exc:
        raise SamplerError(
            f"covariance Cholesky failed (a={a}, b={b}, c={c}); increase the nugget c"
        ) from exc
    return SmoothnessPrior(a=a, b=b, c=c, Gamma=Gamma, mesh_id=mesh.mesh_id, chol_lower=G)


def draw_samples(prior: SmoothnessPrior, n: int, seed) -> list[ConductivitySample]:
    """Draw n strictly positive fields, one independent RNG stream per index.

    Values below 1e-3 of the sample mean are clamped up to that floor, since
    the raw linear map of a nonnegative vector is not nodewise positive.
    """
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((0x5A, seed, i)))
        r = 1.0 - rng.random(prior.Gamma.shape[0])  # uniform on (0, 1]
        s = prior.chol_lower @ r
        mean = s.mean()
        floor = 1e-3 * mean if mean > 0 else 1e-9
        out.append(ConductivitySample(values=np.maximum(s, floor), mesh_id=prior.mesh_id))
    return out


def ellipsoid_target(
    mesh: TriangularMesh,
    center,
    semi_axes,
    angle: float,
    background: float,
    inclusion: float,
) -> ConductivitySample:
    """Rotated ellipse inclusion: nodes inside get ``inclusion``, rest ``background``."""
    if background <= 0 or inclusion <= 0:
        raise SamplerError("background and inclusion conductivities must be positive")
    cx, cy = center
    ax, ay = semi_axes
    ca, sa = np.cos(angle), np.sin(angle)
    dx = mesh.nodes[:, 0] - cx
    dy = mesh.nodes[:, 1] - cy
    xr = ca * dx + sa * dy
    yr = -sa * dx + ca * dy
    if ax <= 0 or ay <= 0:
        inside = np.zeros(mesh.n_nodes, dtype=bool)
    else:
        inside = (xr / ax) ** 2 + (yr / ay) ** 2 <= 1.0
    values = np.where(inside, float(inclusion), float(background))
    return ConductivitySample(values=values, mesh_id=mesh.mesh_id)


def rescale_to_range(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Min-max rescale onto [lo, hi]; constant input maps to the midpoint."""
    values = np.asarray(values, dtype=float)
    vmin, vmax = values.min(), values.max()
    if vmax - vmin < 1e-300:
        return np.full_like(values, 0.5 * (lo + hi))
    return lo + (values - vmin) * (hi - lo) / (vmax - vmin)


def sample_to_csv(sample: ConductivitySample) -> str:
    buf = io.StringIO()
    buf.write(f"# mesh_id {sample.mesh_id}\n")
    buf.write("node,value\n")
    for i, v in enumerate(sample.values):
        buf.write(f"{i},{v:.17g}\n")
    return buf.getvalue()


def sample_from_csv(text: str) -> ConductivitySample:
    mesh_id = ""
    values = []
    for line in text.splitlines():
        if line.startswith("# mesh_id"):
            mesh_id = line.split()[-1]
        elif line and not line.startswith(("#", "node")):
            values.append(float(line.split(",")[1]))
    return ConductivitySample(values=np.asarray(values), mesh_id=mesh_id)
