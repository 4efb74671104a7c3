"""2D constrained Delaunay triangulation of polygons with holes."""
from __future__ import annotations

import numpy as np
import shapely
from shapely.geometry import Polygon

from .errors import InvalidLoops


def _loop_valid(loop) -> bool:
    arr = np.asarray(loop, dtype=float)
    return arr.ndim == 2 and arr.shape[0] >= 3 and arr.shape[1] == 2


def constrained_delaunay_2d(outer, holes=()):
    """Triangulate outer-minus-holes; returns (vertices, triangles).

    `outer` and each hole are (m,2) loops without a repeated closing point.
    Triangles index into the returned vertex array, which starts with the
    loop vertices in input order (outer first, then holes) followed by any
    Steiner points the triangulator introduced. Raises InvalidLoops when a
    loop self-intersects, a hole is not strictly inside the outer loop, or
    loops touch each other.
    """
    if not _loop_valid(outer):
        raise InvalidLoops("outer loop needs at least 3 vertices in 2D")
    for k, h in enumerate(holes):
        if not _loop_valid(h):
            raise InvalidLoops(f"hole loop {k} needs at least 3 vertices in 2D")

    outer = np.asarray(outer, dtype=float)
    holes = [np.asarray(h, dtype=float) for h in holes]

    shell = Polygon(outer)
    if not shell.is_valid or shell.area <= 0.0:
        raise InvalidLoops("outer loop is self-intersecting or degenerate")
    for k, h in enumerate(holes):
        hp = Polygon(h)
        if not hp.is_valid or hp.area <= 0.0:
            raise InvalidLoops(f"hole loop {k} is self-intersecting or degenerate")
        if not shell.contains(hp):
            raise InvalidLoops(f"hole loop {k} is not strictly inside the outer loop")

    region = Polygon(outer, holes)
    if not region.is_valid:
        raise InvalidLoops("hole loops overlap each other")

    tris = shapely.constrained_delaunay_triangles(region)

    # vertex pool: input loop vertices first, extras appended
    pool: dict[tuple[float, float], int] = {}
    verts: list[tuple[float, float]] = []

    def vid(x: float, y: float) -> int:
        key = (x, y)
        idx = pool.get(key)
        if idx is None:
            idx = len(verts)
            pool[key] = idx
            verts.append(key)
        return idx

    for x, y in outer:
        vid(float(x), float(y))
    for h in holes:
        for x, y in h:
            vid(float(x), float(y))

    triangles = []
    for geom in tris.geoms:
        xs, ys = geom.exterior.coords.xy
        ids = [vid(float(xs[i]), float(ys[i])) for i in range(3)]
        # enforce CCW triangles
        a, b, c = (verts[i] for i in ids)
        if (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) < 0.0:
            ids = [ids[0], ids[2], ids[1]]
        triangles.append(ids)

    return np.asarray(verts, dtype=float), np.asarray(triangles, dtype=np.intp)


def ear_clip(points2d):
    """Triangulate a simple polygon by ear clipping.

    Returns index triples into `points2d`. Handles concave loops, tolerates
    collinear runs (their corners come out as zero-area triangles), never
    introduces vertices, and preserves the input winding.
    """
    pts = np.asarray(points2d, dtype=float)
    if not _loop_valid(pts):
        raise InvalidLoops("ear clipping needs >= 3 vertices in 2D")
    n = len(pts)
    if n == 3:
        return [(0, 1, 2)]
    x, y = pts[:, 0], pts[:, 1]
    area2 = float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))
    order = list(range(n))
    flipped = area2 < 0.0
    if flipped:
        order.reverse()
    span = float(np.ptp(pts, axis=0).max())
    eps = 1e-12 * max(span * span, 1.0)

    def cross2(u, v):
        return float(u[0] * v[1] - u[1] * v[0])

    def cross_at(k):
        a = pts[order[k - 1]]
        b = pts[order[k]]
        c = pts[order[(k + 1) % len(order)]]
        return cross2(b - a, c - b)

    def is_ear(k):
        m = len(order)
        ia, ib, ic = order[k - 1], order[k], order[(k + 1) % m]
        if cross_at(k) <= eps:
            return False  # reflex or flat corner cannot be clipped
        a, b, c = pts[ia], pts[ib], pts[ic]
        for j in order:
            if j in (ia, ib, ic):
                continue
            p = pts[j]
            if (cross2(b - a, p - a) > -eps
                    and cross2(c - b, p - b) > -eps
                    and cross2(a - c, p - c) > -eps):
                return False
        return True

    tris = []
    while len(order) > 3:
        ear = next((k for k in range(len(order)) if is_ear(k)), None)
        if ear is None:
            # degenerate remainder (collinear chain): clip flattest corner
            ear = max(range(len(order)), key=cross_at)
        tris.append((order[ear - 1], order[ear],
                     order[(ear + 1) % len(order)]))
        order.pop(ear)
    tris.append(tuple(order))
    if flipped:
        tris = [(c, b, a) for a, b, c in tris]
    return tris
