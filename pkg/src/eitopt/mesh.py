"""Unstructured triangular meshing of polygonal domains with tagged electrodes.

The mesher samples every boundary chain (outer sides and holes) with
electrode endpoints forced as vertices, fills the interior with a jittered
triangular lattice, Delaunay-triangulates the point set and keeps the
triangles whose centroid lies in the domain.  Interior points are kept out
of the diametral circle of every boundary segment, which guarantees each
boundary segment appears as an edge of the triangulation; the result is
verified (boundary edges present, all edges <= h_max, positive areas) and
the lattice is densified and the build retried if verification fails.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .geometry import ElectrodeLayout, PolygonDomain

__all__ = [
    "MeshError",
    "InterpolationError",
    "TriangularMesh",
    "generate_mesh",
    "reference_mesh",
    "interpolate_field",
    "mesh_to_text",
    "mesh_from_text",
]


class MeshError(RuntimeError):
    """Mesh generation could not satisfy its postconditions."""


class InterpolationError(ValueError):
    """A target point lies too far outside the source mesh."""


@dataclass(eq=False)
class TriangularMesh:
    """Conforming triangulation with per-electrode boundary edge lists.

    Treated as immutable after construction (arrays are write-locked);
    instances are safe to share across threads.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    electrode_edges: tuple[np.ndarray, ...]
    h_max: float
    h_min: float

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.electrode_edges = tuple(
            np.ascontiguousarray(e, dtype=np.int64) for e in self.electrode_edges
        )
        self.nodes.setflags(write=False)
        self.triangles.setflags(write=False)
        for e in self.electrode_edges:
            e.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_electrodes(self) -> int:
        return len(self.electrode_edges)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, each row sorted ascending."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    @cached_property
    def mesh_id(self) -> str:
        h = hashlib.sha1()
        h.update(self.nodes.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:16]

    @cached_property
    def node_scatter(self):
        """Sparse (n_nodes x n_triangles) incidence with weight 1/3 per slot.

        Maps per-element quantities to nodes the way linear-in-sigma element
        integrals distribute over a triangle's three vertices.
        """
        import scipy.sparse as sp

        e = np.arange(self.n_triangles)
        rows = self.triangles.T.reshape(-1)
        cols = np.concatenate([e, e, e])
        return sp.csr_matrix(
            (np.full(3 * self.n_triangles, 1.0 / 3.0), (rows, cols)),
            shape=(self.n_nodes, self.n_triangles),
        )

    @cached_property
    def shape_gradient_gram(self) -> np.ndarray:
        """Per-element matrices G_e[i,j] = area_e * grad(phi_i) . grad(phi_j).

        The P1 stiffness contribution of element e for linearly interpolated
        nodal sigma is mean(sigma on e) * G_e.
        """
        p = self.nodes[self.triangles]
        b = np.stack(
            [p[:, 1, 1] - p[:, 2, 1], p[:, 2, 1] - p[:, 0, 1], p[:, 0, 1] - p[:, 1, 1]],
            axis=1,
        )
        c = np.stack(
            [p[:, 2, 0] - p[:, 1, 0], p[:, 0, 0] - p[:, 2, 0], p[:, 1, 0] - p[:, 0, 0]],
            axis=1,
        )
        return (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (
            4.0 * self.areas[:, None, None]
        )

    def electrode_edge_lengths(self, e: int) -> np.ndarray:
        pairs = self.electrode_edges[e]
        d = self.nodes[pairs[:, 1]] - self.nodes[pairs[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])


# ----------------------------------------------------------------------
# construction
# ----------------------------------------------------------------------


def _subdivide(lo: float, hi: float, target: float, n_min: int = 1) -> np.ndarray:
    n = max(n_min, int(np.ceil((hi - lo) / target - 1e-12)))
    return np.linspace(lo, hi, n + 1)


@dataclass
class _Chain:
    """Closed boundary chain sampled at sorted arclengths per edge."""

    vertices: np.ndarray           # polygon vertices, traversal order
    arclengths: list[np.ndarray]   # per edge, sorted, includes 0 and edge length
    node_ids: list[np.ndarray] = field(default_factory=list)

    def edge_points(self, i: int) -> np.ndarray:
        a = self.vertices[i]
        b = self.vertices[(i + 1) % len(self.vertices)]
        L = np.hypot(*(b - a))
        u = (b - a) / L
        return a[None, :] + self.arclengths[i][:, None] * u


def _build_chains(
    domain: PolygonDomain,
    layout: ElectrodeLayout | None,
    h_max: float,
    h_min: float,
) -> list[_Chain]:
    # 0.62*h_max keeps corner hypotenuses (sqrt(2) * segment) below h_max
    gap_target = 0.62 * h_max
    chains = []

    side_arcs = []
    for i in range(domain.n_sides):
        L = domain.side_length(i)
        breaks = [0.0, L]
        if layout is not None:
            for e in np.flatnonzero(layout.side_of == i):
                lo, hi = layout.extent(e)
                breaks.extend([lo, hi])
        breaks = np.unique(np.clip(np.asarray(breaks), 0.0, L))
        pieces = [np.array([0.0])]
        for a, b in zip(breaks[:-1], breaks[1:]):
            if b - a < 1e-12:
                continue
            is_elec = False
            if layout is not None:
                for e in np.flatnonzero(layout.side_of == i):
                    lo, hi = layout.extent(e)
                    if lo - 1e-12 <= a and b <= hi + 1e-12:
                        is_elec = True
                        break
            if is_elec:
                pts = _subdivide(a, b, h_min, n_min=2)
            else:
                pts = _subdivide(a, b, gap_target)
            pieces.append(pts[1:])
        side_arcs.append(np.concatenate(pieces))
    chains.append(_Chain(vertices=np.asarray(domain.outer), arclengths=side_arcs))

    for hole in domain.holes:
        arcs = []
        for i in range(len(hole)):
            L = np.hypot(*(hole[(i + 1) % len(hole)] - hole[i]))
            arcs.append(_subdivide(0.0, L, gap_target))
        chains.append(_Chain(vertices=np.asarray(hole), arclengths=arcs))
    return chains


def _assemble_boundary(chains: list[_Chain]) -> tuple[np.ndarray, np.ndarray]:
    """Number the chain points and return (points, segment index pairs).

    Consecutive edges of a chain share their junction vertex; the last edge
    closes back onto the chain's first point.
    """
    points = []
    segments = []
    count = 0
    for chain in chains:
        chain.node_ids = []
        first_of_chain = count
        for i in range(len(chain.vertices)):
            pts = chain.edge_points(i)
            ids = np.empty(len(pts), dtype=np.int64)
            if i == 0:
                points.append(pts[0])
                ids[0] = count
                count += 1
            else:
                ids[0] = count - 1
            for p in pts[1:-1]:
                points.append(p)
            n_new = len(pts) - 2
            ids[1:-1] = np.arange(count, count + n_new)
            count += n_new
            if i == len(chain.vertices) - 1:
                ids[-1] = first_of_chain
            else:
                points.append(pts[-1])
                ids[-1] = count
                count += 1
            chain.node_ids.append(ids)
            segments.extend(zip(ids[:-1], ids[1:]))
    return np.asarray(points), np.asarray(segments, dtype=np.int64)


def _split_encroached(chains: list[_Chain]) -> bool:
    """Split boundary segments whose diametral circle holds another boundary point."""
    pts, segs = _assemble_boundary(chains)
    centers = 0.5 * (pts[segs[:, 0]] + pts[segs[:, 1]])
    radii = 0.5 * np.hypot(*(pts[segs[:, 1]] - pts[segs[:, 0]]).T)
    encroached = np.zeros(len(segs), dtype=bool)
    for s, (c, r) in enumerate(zip(centers, radii)):
        d = np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1])
        d[segs[s]] = np.inf
        if (d < r * (1.0 - 1e-9)).any():
            encroached[s] = True
    if not encroached.any():
        return False
    # map encroached segments back to (chain, edge, interval) and bisect
    s = 0
    for chain in chains:
        for i, arcs in enumerate(chain.arclengths):
            n_seg = len(arcs) - 1
            local = encroached[s : s + n_seg]
            if local.any():
                mids = 0.5 * (arcs[:-1] + arcs[1:])[local]
                chain.arclengths[i] = np.unique(np.concatenate([arcs, mids]))
            s += n_seg
    return True


def _interior_lattice(domain: PolygonDomain, spacing: float, rng) -> np.ndarray:
    lo = domain.outer.min(axis=0) - spacing
    hi = domain.outer.max(axis=0) + spacing
    dy = spacing * np.sqrt(3.0) / 2.0
    ys = np.arange(lo[1], hi[1] + dy, dy)
    rows = []
    for r, y in enumerate(ys):
        xs = np.arange(lo[0] + (0.5 * spacing if r % 2 else 0.0), hi[0] + spacing, spacing)
        rows.append(np.column_stack([xs, np.full_like(xs, y)]))
    pts = np.vstack(rows)
    pts = pts + rng.uniform(-0.08 * spacing, 0.08 * spacing, size=pts.shape)
    return pts[domain.contains(pts)]


def _clear_of_segments(points: np.ndarray, bpts: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Mask of points outside every boundary segment's (slightly grown) diametral circle."""
    keep = np.ones(len(points), dtype=bool)
    centers = 0.5 * (bpts[segs[:, 0]] + bpts[segs[:, 1]])
    radii = 0.5 * np.hypot(*(bpts[segs[:, 1]] - bpts[segs[:, 0]]).T) * 1.05
    tree = cKDTree(points)
    for c, r in zip(centers, radii):
        for idx in tree.query_ball_point(c, r):
            keep[idx] = False
    return keep


def _boundary_layer(domain, bpts, segs) -> np.ndarray:
    """One apex point inward of each boundary segment, just beyond its diametral circle.

    Fills the protected band next to the boundary so boundary triangles stay
    short; apexes that would encroach a neighboring segment (corners) are
    dropped.
    """
    a, b = bpts[segs[:, 0]], bpts[segs[:, 1]]
    t = b - a
    length = np.hypot(t[:, 0], t[:, 1])
    normal = np.column_stack([-t[:, 1], t[:, 0]]) / length[:, None]
    apex = 0.5 * (a + b) + normal * (0.62 * length)[:, None]
    apex = apex[domain.contains(apex)]
    return apex[_clear_of_segments(apex, bpts, segs)]


def _smooth(pts, n_fixed, domain, bpts, segs, rounds=4):
    """Laplacian smoothing of movable points, constrained to stay inside the
    domain and outside every boundary segment's protection circle."""
    for _ in range(rounds):
        tri = Delaunay(pts)
        idx = tri.simplices
        pairs = np.vstack([idx[:, [0, 1]], idx[:, [1, 2]], idx[:, [2, 0]]])
        pairs = np.vstack([pairs, pairs[:, ::-1]])
        sums = np.zeros_like(pts)
        counts = np.zeros(len(pts))
        np.add.at(sums, pairs[:, 0], pts[pairs[:, 1]])
        np.add.at(counts, pairs[:, 0], 1.0)
        new = sums / np.maximum(counts, 1.0)[:, None]
        new[:n_fixed] = pts[:n_fixed]
        ok = domain.contains(new)
        ok &= _clear_of_segments(new, bpts, segs)
        ok[:n_fixed] = False
        pts = np.where(ok[:, None], new, pts)
    return pts


def _try_build(domain, chains, spacing, rng):
    bpts, segs = _assemble_boundary(chains)
    layer = _boundary_layer(domain, bpts, segs)
    interior = _interior_lattice(domain, spacing, rng)
    interior = interior[_clear_of_segments(interior, bpts, segs)]
    if len(layer):
        near = cKDTree(layer).query(interior)[0] < 0.55 * spacing
        interior = interior[~near]
    pts = np.vstack([bpts, layer, interior])
    pts = _smooth(pts, len(bpts), domain, bpts, segs)

    tri = Delaunay(pts)
    simplices = tri.simplices
    centroids = pts[simplices].mean(axis=1)
    keep = domain.contains(centroids)
    triangles = simplices[keep]

    # consistent CCW orientation
    p = pts[triangles]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    flip = cross < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    # drop unused points, remap indices (keeps construction order)
    used = np.zeros(len(pts), dtype=bool)
    used[triangles] = True
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(int(used.sum()))
    nodes = pts[used]
    triangles = remap[triangles]
    return nodes, triangles, remap, bpts, segs


def _verify(domain, nodes, triangles, remap, segs, h_max) -> str | None:
    if (remap[segs] < 0).any():
        return "boundary point lost"
    edge_set = {tuple(e) for e in np.sort(remap[segs], axis=1)}
    t = triangles
    all_edges = np.sort(
        np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1
    )
    uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
    if counts.max() > 2:
        return "non-conforming edge"
    present = {tuple(e) for e in uniq}
    if not edge_set <= present:
        return "missing boundary edge"
    lengths = np.hypot(*(nodes[uniq[:, 1]] - nodes[uniq[:, 0]]).T)
    if lengths.max() > h_max * (1 + 1e-9):
        return f"edge length {lengths.max():.4g} exceeds h_max={h_max:.4g}"
    p = nodes[triangles]
    areas = 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    )
    if areas.min() <= 0:
        return "degenerate triangle"
    if abs(areas.sum() - domain.area) > 1e-6 * domain.area:
        return "triangulated area does not match the domain"
    return None


def _build_mesh(domain, layout, h_max, h_min, seed) -> TriangularMesh:
    if h_min > h_max:
        raise MeshError(f"h_min={h_min} exceeds h_max={h_max}")
    chains = _build_chains(domain, layout, h_max, h_min)
    for _ in range(12):
        if not _split_encroached(chains):
            break
    else:
        raise MeshError("boundary refinement did not settle; geometry too tight")

    spacing = 0.8 * h_max
    last = "unknown"
    for attempt in range(6):
        rng = np.random.default_rng(np.random.SeedSequence((0x6D65, seed, attempt)))
        nodes, triangles, remap, bpts, segs = _try_build(domain, chains, spacing, rng)
        last = _verify(domain, nodes, triangles, remap, segs, h_max)
        if last is None:
            electrode_edges = _tag_electrodes(chains[0], layout, remap)
            return TriangularMesh(
                nodes=nodes,
                triangles=triangles,
                electrode_edges=electrode_edges,
                h_max=float(h_max),
                h_min=float(h_min),
            )
        spacing *= 0.8
    raise MeshError(f"mesh generation failed after 6 attempts: {last}")


def _tag_electrodes(outer_chain: _Chain, layout, remap) -> tuple[np.ndarray, ...]:
    if layout is None:
        return ()
    groups = []
    for e in range(layout.k):
        side = int(layout.side_of[e])
        lo, hi = layout.extent(e)
        arcs = outer_chain.arclengths[side]
        ids = outer_chain.node_ids[side]
        tol = 1e-9 * max(arcs[-1], 1.0)
        mask = (arcs >= lo - tol) & (arcs <= hi + tol)
        sel = remap[ids[mask]]
        if len(sel) < 3 or (sel < 0).any():
            raise MeshError(f"electrode {e + 1} lost its boundary edges")
        groups.append(np.column_stack([sel[:-1], sel[1:]]))
    return tuple(groups)


def generate_mesh(
    domain: PolygonDomain,
    layout: ElectrodeLayout,
    h_max: float,
    h_min: float,
    seed: int = 0,
) -> TriangularMesh:
    """Mesh the domain with every electrode extent resolved by >= 2 boundary edges.

    Electrode extents are subdivided at ``h_min`` (so the default
    h_min = width/2 yields two edges per electrode), the remaining boundary
    at 0.9*h_max.  Deterministic for fixed inputs.
    """
    return _build_mesh(domain, layout, h_max, h_min, seed)


def reference_mesh(domain: PolygonDomain, spacing: float, seed: int = 0) -> TriangularMesh:
    """Electrode-free mesh of the domain, used as a neutral sampling grid."""
    return _build_mesh(domain, None, spacing, spacing / 2.0, seed)


# ----------------------------------------------------------------------
# interpolation
# ----------------------------------------------------------------------


def _barycentric(p, tri_pts):
    a, b, c = tri_pts[0], tri_pts[1], tri_pts[2]
    m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    try:
        l12 = np.linalg.solve(m, p - a)
    except np.linalg.LinAlgError:
        return None
    return np.array([1.0 - l12[0] - l12[1], l12[0], l12[1]])


def interpolate_field(
    values: np.ndarray, src: TriangularMesh, dst: TriangularMesh
) -> np.ndarray:
    """Barycentric-linear interpolation of nodal values from src onto dst nodes.

    Target points that fall just outside src (boundary faceting noise) snap
    to the nearest source triangle when within 1e-9 of the source mesh
    diameter, otherwise InterpolationError is raised.  Exact on affine
    fields and preserves constants.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (src.n_nodes,):
        raise ValueError("values must be nodal on the source mesh")
    from matplotlib.tri import Triangulation

    tri = Triangulation(src.nodes[:, 0], src.nodes[:, 1], src.triangles)
    finder = tri.get_trifinder()
    q = dst.nodes
    t_idx = finder(q[:, 0], q[:, 1])
    out = np.empty(dst.n_nodes)

    inside = t_idx >= 0
    if inside.any():
        tri_nodes = src.triangles[t_idx[inside]]
        a = src.nodes[tri_nodes[:, 0]]
        b = src.nodes[tri_nodes[:, 1]]
        c = src.nodes[tri_nodes[:, 2]]
        p = q[inside]
        det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (
            c[:, 0] - a[:, 0]
        )
        l1 = ((p[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (p[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])) / det
        l2 = ((b[:, 0] - a[:, 0]) * (p[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (p[:, 0] - a[:, 0])) / det
        l0 = 1.0 - l1 - l2
        out[inside] = (
            l0 * values[tri_nodes[:, 0]]
            + l1 * values[tri_nodes[:, 1]]
            + l2 * values[tri_nodes[:, 2]]
        )

    missing = np.flatnonzero(~inside)
    if len(missing):
        lo, hi = src.nodes.min(axis=0), src.nodes.max(axis=0)
        tol = 1e-9 * float(np.hypot(*(hi - lo)))
        incident = [[] for _ in range(src.n_nodes)]
        for t, tri_nodes in enumerate(src.triangles):
            for n in tri_nodes:
                incident[n].append(t)
        tree = cKDTree(src.nodes)
        for i in missing:
            p = q[i]
            _, nearest = tree.query(p)
            best_lam, best_tri, best_score = None, None, -np.inf
            for t in incident[nearest]:
                lam = _barycentric(p, src.nodes[src.triangles[t]])
                if lam is None:
                    continue
                score = lam.min()
                if score > best_score:
                    best_lam, best_tri, best_score = lam, t, score
            if best_lam is None:
                raise InterpolationError(f"point {p} cannot be located in the source mesh")
            lam = np.clip(best_lam, 0.0, None)
            lam /= lam.sum()
            snapped = lam @ src.nodes[src.triangles[best_tri]]
            dist = float(np.hypot(*(p - snapped)))
            if dist > tol:
                raise InterpolationError(
                    f"point {p} lies {dist:.3g} outside the source mesh (tol {tol:.3g})"
                )
            out[i] = lam @ values[src.triangles[best_tri]]
    return out


# ----------------------------------------------------------------------
# plain-text mesh format
# ----------------------------------------------------------------------


def mesh_to_text(mesh: TriangularMesh) -> str:
    """One record per line: 'n x y', 't a b c', 'e elec a b' (0-based indices)."""
    buf = io.StringIO()
    n_eedges = sum(len(g) for g in mesh.electrode_edges)
    buf.write("# eitopt-mesh 1\n")
    buf.write(f"# h_max {mesh.h_max:.17g}\n")
    buf.write(f"# h_min {mesh.h_min:.17g}\n")
    buf.write(
        f"# counts nodes={mesh.n_nodes} triangles={mesh.n_triangles} "
        f"electrodes={mesh.n_electrodes} electrode_edges={n_eedges}\n"
    )
    for x, y in mesh.nodes:
        buf.write(f"n {x:.17g} {y:.17g}\n")
    for a, b, c in mesh.triangles:
        buf.write(f"t {a} {b} {c}\n")
    for e, group in enumerate(mesh.electrode_edges):
        for a, b in group:
            buf.write(f"e {e} {a} {b}\n")
    return buf.getvalue()


def mesh_from_text(text: str) -> TriangularMesh:
    nodes, tris = [], []
    e_groups: dict[int, list] = {}
    h_max = h_min = 0.0
    for line in text.splitlines():
        if line.startswith("# h_max"):
            h_max = float(line.split()[-1])
        elif line.startswith("# h_min"):
            h_min = float(line.split()[-1])
        elif line.startswith("n "):
            _, x, y = line.split()
            nodes.append((float(x), float(y)))
        elif line.startswith("t "):
            tris.append([int(v) for v in line.split()[1:]])
        elif line.startswith("e "):
            parts = [int(v) for v in line.split()[1:]]
            e_groups.setdefault(parts[0], []).append(parts[1:])
    groups = tuple(
        np.asarray(e_groups[e], dtype=np.int64) for e in sorted(e_groups)
    )
    return TriangularMesh(
        nodes=np.asarray(nodes),
        triangles=np.asarray(tris, dtype=np.int64),
        electrode_edges=groups,
        h_max=h_max,
        h_min=h_min,
    )
