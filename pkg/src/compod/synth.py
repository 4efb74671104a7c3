"""Synthetic primitive scenes for benchmarks and scalability tests."""
from __future__ import annotations

import numpy as np

from .geometry import (
    ConvexCell,
    NoIntersection,
    ToleranceContext,
    plane_from_point_normal,
    split_cell,
)
from .primitives import PlanarPrimitive, PointCloud

_ = NoIntersection  # re-exported catch target for callers


def _sample_polygon(poly, count, rng):
    """Area-uniform samples on a convex 3D polygon (fan triangulation)."""
    a = poly[0]
    ab = poly[1:-1] - a
    ac = poly[2:] - a
    areas = 0.5 * np.linalg.norm(np.cross(ab, ac), axis=1)
    total = areas.sum()
    if total <= 0.0:
        return np.repeat(a[None, :], count, axis=0)
    picks = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=count))
    r2 = rng.uniform(size=count)
    return (
        a
        + ab[picks] * (r1 * (1.0 - r2))[:, None]
        + ac[picks] * (r1 * r2)[:, None]
    )


def synthetic_plane_scene(
    n_primitives,
    points_per_primitive=200,
    seed=0,
    bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
    patch_frac=1.0,
):
    """Random planes clipped to a box, each carrying surface samples.

    Deterministic per seed. Every primitive's points lie exactly on its
    plane, restricted to the plane's polygon inside the box; point normals
    are the plane normals, so normal-vote labelling stays applicable.
    patch_frac < 1 keeps only a compact patch of each polygon (the samples
    nearest a random anchor), mimicking detected shapes of local extent.
    """
    if not 0.0 < patch_frac <= 1.0:
        raise ValueError("patch_frac must be in (0, 1]")
    rng = np.random.default_rng(seed)
    box = ConvexCell.from_bounds(*bounds)
    tol = ToleranceContext.from_points(box.vertices)
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    all_points = []
    all_normals = []
    prims = []
    offset = 0
    attempts = 0
    while len(prims) < n_primitives:
        attempts += 1
        if attempts > 50 * n_primitives:
            raise RuntimeError("plane sampling failed to hit the box")
        normal = rng.normal(size=3)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        anchor = rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo))
        plane = plane_from_point_normal(anchor, normal)
        try:
            _, _, iface = split_cell(box, plane, tol)
        except Exception:
            continue
        if patch_frac < 1.0:
            # n nearest of n/frac uniform samples cover ~frac of the polygon
            pool_size = int(np.ceil(points_per_primitive / patch_frac))
            pool = _sample_polygon(iface, pool_size, rng)
            anchor = pool[int(rng.integers(len(pool)))]
            dist = np.linalg.norm(pool - anchor, axis=1)
            keep = np.argsort(dist, kind="stable")[:points_per_primitive]
            pts = pool[np.sort(keep)]
        else:
            pts = _sample_polygon(iface, points_per_primitive, rng)
        pid = len(prims)
        prims.append(
            PlanarPrimitive(
                id=pid,
                plane=plane,
                inliers=np.arange(offset, offset + len(pts)),
                orientation=1,
            )
        )
        all_points.append(pts)
        all_normals.append(np.repeat(plane[:3][None, :], len(pts), axis=0))
        offset += len(pts)
    cloud = PointCloud(
        points=np.vstack(all_points), normals=np.vstack(all_normals)
    )
    return cloud, prims
