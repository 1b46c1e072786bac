"""Polygonal domains and electrode layouts on their boundary sides.

Electrodes live on the straight sides of the outer boundary.  Positions are
handled in arclength along a side, which for straight sides is plain
Euclidean distance.  Electrode indices ascend side by side in the domain's
natural side order (side ``i`` runs from outer vertex ``i`` to vertex
``i+1``), and ascend along each side's traversal direction.  The bundled
presets order their vertices counterclockwise starting at the top-right
corner, so electrode 1 is the first electrode past the top-right corner.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PolygonDomain",
    "ElectrodeLayout",
    "PlacementError",
    "place_random_electrodes",
    "uniform_layout",
    "validate_layout",
    "layout_to_csv",
    "layout_from_csv",
    "square_domain",
    "rectangle_domain",
    "right_triangle_domain",
]


class PlacementError(ValueError):
    """Requested electrodes cannot be placed on the given domain."""


def _signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    """Proper intersection test for open segments (shared endpoints excluded)."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(v) < 1e-14:
            return 0
        return 1 if v > 0 else -1

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def _is_simple(vertices: np.ndarray) -> bool:
    n = len(vertices)
    for i in range(n):
        a1, a2 = vertices[i], vertices[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b1, b2 = vertices[j], vertices[(j + 1) % n]
            if _segments_intersect(a1, a2, b1, b2):
                return False
    return True


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Vectorized ray-casting point-in-polygon test (boundary points undefined)."""
    points = np.atleast_2d(points)
    px, py = points[:, 0], points[:, 1]
    x1, y1 = vertices[:, 0], vertices[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    inside = np.zeros(len(points), dtype=bool)
    for ex1, ey1, ex2, ey2 in zip(x1, y1, x2, y2):
        crosses = (ey1 > py) != (ey2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ex1 + (py - ey1) * (ex2 - ex1) / (ey2 - ey1)
        inside ^= crosses & (px < xint)
    return inside


@dataclass(frozen=True)
class PolygonDomain:
    """Simple polygon with optional polygonal holes.

    The outer boundary is stored counterclockwise, holes clockwise;
    constructor input in either orientation is normalized.  All coordinates
    are in cm (or m for metre-scaled studies; the code is unit-agnostic).
    """

    outer: np.ndarray
    holes: tuple[np.ndarray, ...] = field(default_factory=tuple)

    def __post_init__(self):
        outer = np.asarray(self.outer, dtype=float)
        if outer.ndim != 2 or outer.shape[1] != 2 or len(outer) < 3:
            raise ValueError("outer boundary needs >= 3 (x, y) vertices")
        if not _is_simple(outer):
            raise ValueError("outer boundary is self-intersecting")
        if _signed_area(outer) < 0:
            outer = outer[::-1].copy()
        holes = []
        for h in self.holes:
            h = np.asarray(h, dtype=float)
            if not _is_simple(h):
                raise ValueError("hole boundary is self-intersecting")
            if _signed_area(h) > 0:
                h = h[::-1].copy()
            if not points_in_polygon(h, outer).all():
                raise ValueError("hole vertices must lie strictly inside the outer boundary")
            h.setflags(write=False)
            holes.append(h)
        for i in range(len(holes)):
            for j in range(i + 1, len(holes)):
                if points_in_polygon(holes[i], holes[j]).any() or points_in_polygon(
                    holes[j], holes[i]
                ).any():
                    raise ValueError("holes must be mutually disjoint")
        outer.setflags(write=False)
        object.__setattr__(self, "outer", outer)
        object.__setattr__(self, "holes", tuple(holes))

    @property
    def n_sides(self) -> int:
        return len(self.outer)

    def side(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Endpoints (start, end) of outer side ``i``."""
        return self.outer[i], self.outer[(i + 1) % len(self.outer)]

    def side_length(self, i: int) -> float:
        a, b = self.side(i)
        return float(np.hypot(*(b - a)))

    @property
    def side_lengths(self) -> np.ndarray:
        return np.array([self.side_length(i) for i in range(self.n_sides)])

    def point_on_side(self, i: int, t) -> np.ndarray:
        """Point at arclength ``t`` from the start of side ``i``."""
        a, b = self.side(i)
        u = (b - a) / self.side_length(i)
        return a + np.multiply.outer(np.asarray(t, dtype=float), u)

    @property
    def area(self) -> float:
        return _signed_area(self.outer) + sum(_signed_area(h) for h in self.holes)

    @property
    def diameter(self) -> float:
        lo, hi = self.outer.min(axis=0), self.outer.max(axis=0)
        return float(np.hypot(*(hi - lo)))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True for points inside the outer boundary and outside every hole."""
        inside = points_in_polygon(points, self.outer)
        for h in self.holes:
            inside &= ~points_in_polygon(points, h)
        return inside


@dataclass(frozen=True)
class ElectrodeLayout:
    """Electrode midpoints stacked as [x_1..x_k, y_1..y_k], all of one width.

    ``side_of[e]`` is the outer side carrying electrode ``e`` and
    ``arclengths[e]`` its midpoint arclength from that side's start vertex.
    """

    midpoints: np.ndarray
    width: float
    side_of: np.ndarray
    arclengths: np.ndarray

    def __post_init__(self):
        mp = np.asarray(self.midpoints, dtype=float)
        so = np.asarray(self.side_of, dtype=int)
        t = np.asarray(self.arclengths, dtype=float)
        if mp.size != 2 * so.size or so.size != t.size:
            raise ValueError("midpoints must hold 2k values for k electrodes")
        for a in (mp, so, t):
            a.setflags(write=False)
        object.__setattr__(self, "midpoints", mp)
        object.__setattr__(self, "side_of", so)
        object.__setattr__(self, "arclengths", t)

    @property
    def k(self) -> int:
        return len(self.side_of)

    @property
    def xy(self) -> np.ndarray:
        """Midpoints as a (k, 2) array."""
        return np.column_stack([self.midpoints[: self.k], self.midpoints[self.k :]])

    def extent(self, e: int) -> tuple[float, float]:
        """Arclength interval covered by electrode ``e`` on its side."""
        t = self.arclengths[e]
        return t - self.width / 2.0, t + self.width / 2.0


def _layout_from_positions(domain, per_side, width, positions) -> ElectrodeLayout:
    xs, ys, sides, ts = [], [], [], []
    for i, tlist in enumerate(positions):
        pts = domain.point_on_side(i, np.asarray(tlist))
        for t, p in zip(tlist, np.atleast_2d(pts)):
            xs.append(p[0])
            ys.append(p[1])
            sides.append(i)
            ts.append(t)
    return ElectrodeLayout(
        midpoints=np.array(xs + ys),
        width=float(width),
        side_of=np.array(sides, dtype=int),
        arclengths=np.array(ts),
    )


def _check_side_feasible(length: float, n: int, width: float, min_gap: float, side: int):
    if n == 0:
        return
    need = n * width + (n - 1) * min_gap
    if need > length + 1e-12:
        raise PlacementError(
            f"side {side}: {n} electrodes of width {width} with gap {min_gap} "
            f"need {need:.6g} but the side is only {length:.6g} long"
        )


def place_random_electrodes(
    domain: PolygonDomain,
    per_side,
    width: float,
    min_gap: float,
    seed,
) -> ElectrodeLayout:
    """Draw random electrode midpoints side by side, rejecting overlapping draws.

    Midpoints on each side are redrawn until all pairwise arclength
    separations are at least ``width + min_gap``, so electrode extents stay
    pairwise disjoint with the requested clearance.  Deterministic for a
    fixed seed.
    """
    per_side = list(per_side)
    if len(per_side) != domain.n_sides:
        raise PlacementError(
            f"per_side has {len(per_side)} entries for {domain.n_sides} sides"
        )
    rng = np.random.default_rng(seed)
    positions = []
    for i, n in enumerate(per_side):
        length = domain.side_length(i)
        _check_side_feasible(length, n, width, min_gap, i)
        if n == 0:
            positions.append([])
            continue
        lo, hi = width / 2.0, length - width / 2.0
        for _ in range(100_000):
            t = np.sort(rng.uniform(lo, hi, size=n))
            if n == 1 or np.diff(t).min() >= width + min_gap:
                positions.append(list(t))
                break
        else:
            raise PlacementError(
                f"side {i}: rejection sampling failed to place {n} electrodes; "
                "the feasible region is too tight"
            )
    return _layout_from_positions(domain, per_side, width, positions)


def uniform_layout(domain: PolygonDomain, per_side, width: float) -> ElectrodeLayout:
    """Evenly spaced layout: n electrodes on a side sit at fractions i/(n+1)."""
    per_side = list(per_side)
    if len(per_side) != domain.n_sides:
        raise PlacementError(
            f"per_side has {len(per_side)} entries for {domain.n_sides} sides"
        )
    positions = []
    for i, n in enumerate(per_side):
        length = domain.side_length(i)
        if n > 0:
            spacing = length / (n + 1)
            if spacing < width + 1e-12 and n > 1:
                raise PlacementError(
                    f"side {i}: uniform spacing {spacing:.6g} < electrode width {width}"
                )
            if spacing < width / 2.0 - 1e-12:
                raise PlacementError(f"side {i}: end electrodes extend past the corners")
        positions.append([length * j / (n + 1) for j in range(1, n + 1)])
    return _layout_from_positions(domain, per_side, width, positions)


def validate_layout(domain: PolygonDomain, layout: ElectrodeLayout, min_gap: float = 0.0):
    """Raise PlacementError unless every extent is inside its side and disjoint."""
    for i in range(domain.n_sides):
        length = domain.side_length(i)
        idx = np.flatnonzero(layout.side_of == i)
        exts = sorted(layout.extent(e) for e in idx)
        for lo, hi in exts:
            if lo < -1e-9 or hi > length + 1e-9:
                raise PlacementError(f"side {i}: electrode extent ({lo:.4g}, {hi:.4g}) leaves the side")
        for (_, hi1), (lo2, _) in zip(exts, exts[1:]):
            if lo2 - hi1 < min_gap - 1e-9:
                raise PlacementError(
                    f"side {i}: electrode extents closer than min_gap={min_gap:.4g}"
                )


def layout_to_csv(layout: ElectrodeLayout) -> str:
    """CSV of one electrode per row: index, x, y, side, width."""
    buf = io.StringIO()
    buf.write("index,x,y,side,width\n")
    xy = layout.xy
    for e in range(layout.k):
        buf.write(
            f"{e + 1},{xy[e, 0]:.17g},{xy[e, 1]:.17g},{layout.side_of[e]},{layout.width:.17g}\n"
        )
    return buf.getvalue()


def layout_from_csv(text: str, domain: PolygonDomain) -> ElectrodeLayout:
    rows = [ln.split(",") for ln in text.strip().splitlines()[1:] if ln and not ln.startswith("#")]
    xy = np.array([[float(r[1]), float(r[2])] for r in rows])
    sides = np.array([int(r[3]) for r in rows])
    width = float(rows[0][4])
    ts = np.empty(len(rows))
    for e, (p, s) in enumerate(zip(xy, sides)):
        a, b = domain.side(s)
        u = (b - a) / domain.side_length(s)
        ts[e] = float(np.dot(p - a, u))
    return ElectrodeLayout(
        midpoints=np.concatenate([xy[:, 0], xy[:, 1]]),
        width=width,
        side_of=sides,
        arclengths=ts,
    )


def square_domain(size: float = 1.0) -> PolygonDomain:
    """Unit-style square; vertex order starts at the top-right corner, CCW."""
    s = size
    return PolygonDomain(np.array([[s, s], [0.0, s], [0.0, 0.0], [s, 0.0]]))


def rectangle_domain(w: float = 2.0, h: float = 1.0) -> PolygonDomain:
    """w x h rectangle; sides in order: top (long), left, bottom (long), right."""
    return PolygonDomain(np.array([[w, h], [0.0, h], [0.0, 0.0], [w, 0.0]]))


def right_triangle_domain(size: float = 1.0) -> PolygonDomain:
    """Right triangle with legs along the axes and hypotenuse from (size,0) to (0,size).

    Side order: hypotenuse, left leg, bottom leg.
    """
    s = size
    return PolygonDomain(np.array([[s, 0.0], [0.0, s], [0.0, 0.0]]))
