"""
Floating-point geometric kernel: planes, convex cells, splitting, hulls,
volumes.

Cells are bounded intersections of half-spaces with a cached vertex/facet
realization. The realization is never re-enumerated from scratch after a
split: the parent's facet lattice is clipped against the cutting plane,
which keeps both children (and the shared interface polygon) consistent to
the last bit. All tolerances derive from a single ToleranceContext.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.spatial
from scipy.spatial import QhullError

from .errors import (
    DegenerateCell,
    DegenerateCut,
    DegenerateInput,
    NoIntersection,
)


@dataclass(frozen=True)
class ToleranceContext:
    """Absolute tolerance derived from the (dilated) scene bounding box.

    eps_abs = eps_rel * bbox_diagonal. A single context is threaded through
    an entire pipeline run so that "on plane", "degenerate area" and
    "inside cell" all agree on what negligible means.
    """

    bbox_diagonal: float
    eps_rel: float = 1e-9

    def __post_init__(self):
        if not (self.eps_rel > 0.0) or not (self.bbox_diagonal > 0.0):
            raise ValueError("tolerance context requires positive diagonal and eps_rel")

    @property
    def eps_abs(self) -> float:
        return self.eps_rel * self.bbox_diagonal

    @property
    def eps_area(self) -> float:
        return self.eps_abs * self.eps_abs

    @classmethod
    def from_points(cls, points, eps_rel: float = 1e-9) -> "ToleranceContext":
        points = np.asarray(points, dtype=float)
        diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
        return cls(bbox_diagonal=max(diag, 1e-12), eps_rel=eps_rel)


def normalize_plane(coef) -> np.ndarray:
    """Return [a,b,c,d] scaled so that ||(a,b,c)|| == 1."""
    coef = np.asarray(coef, dtype=float).reshape(4)
    if not np.all(np.isfinite(coef)):
        raise ValueError("plane coefficients must be finite")
    norm = float(np.linalg.norm(coef[:3]))
    if norm < 1e-300:
        raise ValueError("plane normal has zero length")
    return coef / norm


def plane_from_point_normal(point, normal) -> np.ndarray:
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    d = -float(np.dot(normal, np.asarray(point, dtype=float)))
    return np.array([normal[0], normal[1], normal[2], d])


def signed_distance(plane, points):
    """Signed distance n.p + d; positive on the side the normal points to.

    `points` may be a single (3,) point or an (n,3) array.
    """
    plane = np.asarray(plane, dtype=float)
    pts = np.asarray(points, dtype=float)
    return pts @ plane[:3] + plane[3]


def classify_points(plane, points, tol: ToleranceContext):
    """Partition point indices into (left, right, on) relative to a plane.

    "on" means |signed distance| <= eps_abs; left is the negative side.
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty, empty
    d = signed_distance(plane, pts)
    eps = tol.eps_abs
    on = np.abs(d) <= eps
    left = np.nonzero(~on & (d < 0.0))[0]
    right = np.nonzero(~on & (d > 0.0))[0]
    return left, right, np.nonzero(on)[0]


def plane_basis(plane) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal in-plane basis (u, v) with u x v = n."""
    n = np.asarray(plane, dtype=float)[:3]
    # pick the axis least aligned with n to avoid degeneracy
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    u = np.cross(axis, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


def project_to_plane(plane, points) -> np.ndarray:
    """2D coordinates of points in the plane's (u, v) basis."""
    plane = np.asarray(plane, dtype=float)
    u, v = plane_basis(plane)
    origin = -plane[3] * plane[:3]
    rel = np.atleast_2d(np.asarray(points, dtype=float)) - origin
    return np.column_stack([rel @ u, rel @ v])


def lift_from_plane(plane, coords2d) -> np.ndarray:
    """Inverse of project_to_plane for points exactly on the plane."""
    plane = np.asarray(plane, dtype=float)
    u, v = plane_basis(plane)
    origin = -plane[3] * plane[:3]
    uv = np.atleast_2d(np.asarray(coords2d, dtype=float))
    return origin + uv[:, :1] * u + uv[:, 1:2] * v


def polygon_area_3d(loop_points) -> float:
    """Area of a planar polygon given as an ordered 3D vertex loop."""
    pts = np.asarray(loop_points, dtype=float)
    if len(pts) < 3:
        return 0.0
    ref = pts[0]
    cross = np.cross(pts[1:-1] - ref, pts[2:] - ref)
    return 0.5 * float(np.linalg.norm(cross.sum(axis=0)))


def polygon_normal(loop_points) -> np.ndarray:
    """Unit normal of a planar polygon loop (right-hand rule)."""
    pts = np.asarray(loop_points, dtype=float)
    ref = pts[0]
    total = np.cross(pts[1:-1] - ref, pts[2:] - ref).sum(axis=0)
    norm = np.linalg.norm(total)
    if norm < 1e-300:
        raise DegenerateInput("polygon has no well-defined normal")
    return total / norm


def clip_polygon(loop_points, plane, tol: ToleranceContext, side: int):
    """Clip a convex 3D polygon to one closed side of a plane.

    side=-1 keeps the negative half-space, side=+1 the positive one.
    Returns the clipped loop as an (m,3) array, or None if the remaining
    area is below tolerance.
    """
    pts = np.asarray(loop_points, dtype=float)
    plane = np.asarray(plane, dtype=float)
    d = signed_distance(plane, pts) * float(side)
    eps = tol.eps_abs
    if np.all(d >= -eps):
        return pts
    if np.all(d <= eps):
        return None
    out = []
    n = len(pts)
    for i in range(n):
        j = (i + 1) % n
        di, dj = d[i], d[j]
        if di >= -eps:
            out.append(pts[i])
        if (di > eps and dj < -eps) or (di < -eps and dj > eps):
            t = di / (di - dj)
            out.append(pts[i] + t * (pts[j] - pts[i]))
    if len(out) < 3:
        return None
    out = np.asarray(out)
    if polygon_area_3d(out) <= tol.eps_area:
        return None
    return out


def _order_loop_in_plane(points, plane) -> np.ndarray:
    """Indices ordering convex coplanar points CCW w.r.t. the plane normal."""
    uv = project_to_plane(plane, points)
    center = uv.mean(axis=0)
    ang = np.arctan2(uv[:, 1] - center[1], uv[:, 0] - center[0])
    return np.argsort(ang, kind="stable")


class ConvexCell:
    """Bounded convex polyhedron.

    The half-space list is authoritative: the cell is the set
    {x : planes[i,:3].x + planes[i,3] <= 0 for all i}. `vertices` and
    `facets` cache the realization; facet loops are wound counter-clockwise
    when seen from outside (outward orientation), which makes the signed
    tetrahedral volume decomposition positive term by term.
    """

    __slots__ = ("planes", "plane_sources", "vertices", "facets", "_volume")

    def __init__(self, planes, plane_sources, vertices, facets, volume=None):
        self.planes = np.asarray(planes, dtype=float)
        self.plane_sources = list(plane_sources)
        self.vertices = np.asarray(vertices, dtype=float)
        self.facets = facets  # list of (plane_index, [vertex ids ...])
        self._volume = volume

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_bounds(cls, lower, upper, sources=None) -> "ConvexCell":
        """Axis-aligned box from corner points."""
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        if np.any(hi <= lo):
            raise DegenerateCell("box bounds must satisfy lower < upper")
        planes = np.array(
            [
                [-1.0, 0.0, 0.0, lo[0]],
                [1.0, 0.0, 0.0, -hi[0]],
                [0.0, -1.0, 0.0, lo[1]],
                [0.0, 1.0, 0.0, -hi[1]],
                [0.0, 0.0, -1.0, lo[2]],
                [0.0, 0.0, 1.0, -hi[2]],
            ]
        )
        x0, y0, z0 = lo
        x1, y1, z1 = hi
        verts = np.array(
            [
                [x0, y0, z0],
                [x1, y0, z0],
                [x1, y1, z0],
                [x0, y1, z0],
                [x0, y0, z1],
                [x1, y0, z1],
                [x1, y1, z1],
                [x0, y1, z1],
            ]
        )
        # outward-wound loops for the 6 box planes, same order as `planes`
        facets = [
            (0, [0, 4, 7, 3]),
            (1, [1, 2, 6, 5]),
            (2, [0, 1, 5, 4]),
            (3, [3, 7, 6, 2]),
            (4, [0, 3, 2, 1]),
            (5, [4, 5, 6, 7]),
        ]
        if sources is None:
            sources = [None] * 6
        return cls(planes, sources, verts, facets)

    # -- queries -----------------------------------------------------------

    def interior_point(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def contains(self, points, eps: float):
        """Boolean mask of points inside the cell within eps."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = pts @ self.planes[:, :3].T + self.planes[:, 3]
        return np.all(d <= eps, axis=1)

    def facet_loop(self, i) -> np.ndarray:
        plane_idx, loop = self.facets[i]
        return self.vertices[loop]

    def volume(self) -> float:
        if self._volume is None:
            self._volume = cell_volume(self)
        return self._volume

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def validate(self, tol: ToleranceContext, slack: float = 4.0):
        """Check structural invariants; raises DegenerateCell on violation.

        `slack` loosens eps_abs for checks on cells that went through many
        snapping splits.
        """
        eps = slack * tol.eps_abs
        if len(self.vertices) < 4:
            raise DegenerateCell("cell has fewer than 4 vertices")
        d = self.vertices @ self.planes[:, :3].T + self.planes[:, 3]
        if not np.all(d <= eps):
            raise DegenerateCell(
                f"vertex violates half-space by {float(d.max()):.3e} > {eps:.3e}"
            )
        for plane_idx, loop in self.facets:
            dist = signed_distance(self.planes[plane_idx], self.vertices[loop])
            if np.max(np.abs(dist)) > eps:
                raise DegenerateCell("facet loop is not planar within tolerance")
        if self.volume() <= 0.0:
            raise DegenerateCell("cell volume is not positive")


def cell_volume(cell: ConvexCell) -> float:
    """Volume via signed tetrahedra fanned from an interior point.

    Deterministic: facet loops are wound outward, so every term is
    (numerically) non-negative.
    """
    if len(cell.vertices) < 4:
        raise DegenerateCell("volume needs at least 4 vertices")
    origin = cell.interior_point()
    total = 0.0
    for plane_idx, loop in cell.facets:
        pts = cell.vertices[loop] - origin
        # fan around the first loop vertex; outward winding => positive terms
        cross = np.cross(pts[1:-1], pts[2:])
        total += float((cross @ pts[0]).sum())
    return total / 6.0


def split_cell(cell: ConvexCell, plane, tol: ToleranceContext, source=None):
    """Split a cell by a plane into (negative child, positive child, interface).

    Vertices within eps_abs of the plane are snapped onto it and shared by
    both children. Raises NoIntersection when every vertex is on one closed
    side, DegenerateCut when the interface polygon area is below eps_abs^2.
    The interface is returned as an (m,3) CCW loop w.r.t. the plane normal.
    """
    plane = normalize_plane(plane)
    eps = tol.eps_abs
    verts = cell.vertices
    d = signed_distance(plane, verts)
    on = np.abs(d) <= eps
    neg = ~on & (d < 0.0)
    pos = ~on & (d > 0.0)
    if not neg.any() or not pos.any():
        raise NoIntersection("plane does not cross the cell interior")

    snapped = verts.copy()
    if on.any():
        snapped[on] -= d[on, None] * plane[:3]

    side = np.where(on, 0, np.where(d < 0.0, -1, 1))

    # new vertices on crossing edges, deduplicated per undirected edge
    cut_points: dict[tuple[int, int], np.ndarray] = {}

    def cut(i, j):
        key = (i, j) if i < j else (j, i)
        p = cut_points.get(key)
        if p is None:
            t = d[i] / (d[i] - d[j])
            p = verts[i] + t * (verts[j] - verts[i])
            cut_points[key] = p
        return p

    # child loops reference vertices symbolically: ("v", idx) original,
    # ("c", key) cut point; resolved to child-local pools afterwards.
    neg_facets = []
    pos_facets = []
    interface_keys = []
    interface_seen = set()

    for plane_idx, loop in cell.facets:
        neg_loop = []
        pos_loop = []
        m = len(loop)
        for a_pos in range(m):
            i = loop[a_pos]
            j = loop[(a_pos + 1) % m]
            si, sj = side[i], side[j]
            if si == 0:
                neg_loop.append(("v", i))
                pos_loop.append(("v", i))
                if i not in interface_seen:
                    interface_seen.add(i)
                    interface_keys.append(("v", i))
                continue
            if si < 0:
                neg_loop.append(("v", i))
            else:
                pos_loop.append(("v", i))
            if si * sj < 0:
                cut(i, j)
                key = (i, j) if i < j else (j, i)
                neg_loop.append(("c", key))
                pos_loop.append(("c", key))
                if key not in interface_seen:
                    interface_seen.add(key)
                    interface_keys.append(("c", key))
        if len(neg_loop) >= 3:
            neg_facets.append((plane_idx, neg_loop))
        if len(pos_loop) >= 3:
            pos_facets.append((plane_idx, pos_loop))

    if len(interface_keys) < 3:
        raise DegenerateCut("interface has fewer than 3 vertices")

    def resolve(key):
        kind, ref = key
        return snapped[ref] if kind == "v" else cut_points[ref]

    iface_pts = np.asarray([resolve(k) for k in interface_keys])
    order = _order_loop_in_plane(iface_pts, plane)
    iface_pts = iface_pts[order]
    iface_keys_ordered = [interface_keys[k] for k in order]
    if polygon_area_3d(iface_pts) <= tol.eps_area:
        raise DegenerateCut("interface area below tolerance")

    def build_child(facets_sym, child_sign):
        # child-local vertex pool
        index: dict[tuple, int] = {}
        coords = []

        def vid(key):
            idx = index.get(key)
            if idx is None:
                idx = len(coords)
                index[key] = idx
                coords.append(resolve(key))
            return idx

        # keep only planes still realized by a facet, plus the cut plane
        plane_map: dict[int, int] = {}
        child_planes = []
        child_sources = []
        child_facets = []
        for plane_idx, loop_sym in facets_sym:
            loop = []
            for key in loop_sym:
                idx = vid(key)
                if not loop or (loop[-1] != idx and idx != loop[0]):
                    loop.append(idx)
            if len(loop) < 3:
                continue
            local = plane_map.get(plane_idx)
            if local is None:
                local = len(child_planes)
                plane_map[plane_idx] = local
                child_planes.append(cell.planes[plane_idx])
                child_sources.append(cell.plane_sources[plane_idx])
            child_facets.append((local, loop))

        # interface facet: CCW w.r.t. +n is outward for the negative child
        iface_loop = [vid(k) for k in iface_keys_ordered]
        cut_local = len(child_planes)
        if child_sign < 0:
            child_planes.append(plane)
            child_sources.append(source)
            child_facets.append((cut_local, iface_loop))
        else:
            child_planes.append(-plane)
            child_sources.append(source)
            child_facets.append((cut_local, iface_loop[::-1]))

        return ConvexCell(
            np.asarray(child_planes), child_sources, np.asarray(coords), child_facets
        )

    neg_cell = build_child(neg_facets, -1)
    pos_cell = build_child(pos_facets, +1)
    return neg_cell, pos_cell, iface_pts


def convex_hull_2d(points2d, tol: ToleranceContext) -> np.ndarray:
    """CCW convex polygon of 2D points; DegenerateInput when collinear."""
    pts = np.asarray(points2d, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise DegenerateInput("need at least 3 points in the plane")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= tol.eps_abs:
        raise DegenerateInput("points are collinear within tolerance")
    try:
        hull = scipy.spatial.ConvexHull(pts)
    except QhullError as exc:  # pragma: no cover - guarded by the SVD check
        raise DegenerateInput(str(exc)) from exc
    return pts[hull.vertices]


def polygon_area_2d(loop) -> float:
    """Shoelace area (signed) of a 2D polygon loop."""
    p = np.asarray(loop, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def convex_hull_3d(points, tol: ToleranceContext) -> ConvexCell:
    """ConvexCell hull of 3D points; DegenerateInput when coplanar.

    Qhull's simplicial output is regrouped into maximal coplanar facets and
    each facet plane is re-fit to its vertices.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise DegenerateInput("need at least 4 points")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[2] <= tol.eps_abs:
        raise DegenerateInput("points are coplanar within tolerance")
    try:
        hull = scipy.spatial.ConvexHull(pts)
    except QhullError as exc:  # pragma: no cover
        raise DegenerateInput(str(exc)) from exc

    verts3d = pts[hull.vertices]
    remap = {int(g): i for i, g in enumerate(hull.vertices)}

    # group simplices by (near-)identical outward plane equations
    groups: list[dict] = []
    for simplex, eq in zip(hull.simplices, hull.equations):
        placed = False
        for g in groups:
            if (
                float(eq[:3] @ g["normal"]) > 1.0 - 1e-9
                and abs(float(eq[3] - g["offset"])) <= 16 * tol.eps_abs
            ):
                g["verts"].update(int(v) for v in simplex)
                placed = True
                break
        if not placed:
            groups.append(
                {
                    "normal": eq[:3].copy(),
                    "offset": float(eq[3]),
                    "verts": {int(v) for v in simplex},
                }
            )

    planes = []
    sources = []
    facets = []
    for g in groups:
        ids = sorted(remap[v] for v in g["verts"])
        coords = verts3d[ids]
        # least-squares refit: centroid + smallest covariance direction
        centroid = coords.mean(axis=0)
        _, _, vt = np.linalg.svd(coords - centroid)
        n = vt[2]
        if float(n @ g["normal"]) < 0.0:
            n = -n
        plane = np.append(n, -float(n @ centroid))
        order = _order_loop_in_plane(coords, plane)
        # CCW w.r.t. outward normal == outward winding
        loop = [ids[int(k)] for k in order]
        planes.append(plane)
        sources.append(None)
        facets.append((len(planes) - 1, loop))

    cell = ConvexCell(np.asarray(planes), sources, verts3d, facets)
    inside = cell.contains(pts, 8 * tol.eps_abs)
    if not bool(inside.all()):
        raise DegenerateInput("hull realization failed to contain its inputs")
    return cell
