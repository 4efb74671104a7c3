"""Evaluation metrics: Chamfer, Hausdorff, normal consistency, IoU, reports.

Distances are sample-to-sample over area-uniform surface samples (the common
evaluation shortcut); pass exact=True for point-to-triangle distances against
the other mesh. All routines are deterministic for a fixed seed. Distances
are returned in raw model units; report writers normalize by the bounding
box diagonal where noted.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMesh, OpenMesh
from .extraction import ConvexDecomposition, SurfaceMesh
from .ioutils import canonical_json
from .meshops import is_closed, ray_parity_inside, triangulate_faces

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleSet:
    points: np.ndarray
    normals: np.ndarray | None
    facet_ids: np.ndarray
    seed: int


def _as_mesh(obj):
    """Accept SurfaceMesh or a (vertices, faces) pair."""
    if isinstance(obj, SurfaceMesh):
        return obj
    vertices, faces = obj
    from .extraction import SurfaceFacet
    from .geometry import polygon_normal

    facets = []
    vertices = np.asarray(vertices, dtype=float)
    for f in faces:
        pts = vertices[list(f)]
        n = polygon_normal(pts)
        facets.append(SurfaceFacet(
            loop=tuple(int(i) for i in f), source=None,
            plane=np.append(n, -float(n @ pts[0])),
        ))
    return SurfaceMesh(vertices=vertices, facets=facets)


def sample_surface(mesh, n_samples, seed=0) -> SampleSet:
    """Area-uniform random samples with facet normals attached."""
    mesh = _as_mesh(mesh)
    if mesh.is_empty():
        raise EmptyMesh("cannot sample an empty mesh")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    tris, owner = mesh.triangulate()
    pts = mesh.vertices
    a = pts[tris[:, 0]]
    ab = pts[tris[:, 1]] - a
    ac = pts[tris[:, 2]] - a
    areas = 0.5 * np.linalg.norm(np.cross(ab, ac), axis=1)
    total = float(areas.sum())
    if total <= 0.0:
        raise EmptyMesh("mesh has zero total area")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(tris), size=n_samples, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=n_samples))
    r2 = rng.uniform(size=n_samples)
    # sqrt-barycentric: uniform over each triangle
    samples = (
        a[picks]
        + ab[picks] * (r1 * (1.0 - r2))[:, None]
        + ac[picks] * (r1 * r2)[:, None]
    )
    facet_normals = np.stack([f.plane[:3] for f in mesh.facets])
    normals = facet_normals[owner[picks]]
    return SampleSet(points=samples, normals=normals,
                     facet_ids=owner[picks], seed=seed)


def _point_triangle_distances(points, tri_pts):
    """Min distance from each point to any triangle (exact, chunked)."""
    best = np.full(len(points), np.inf)
    a = tri_pts[:, 0]
    ab = tri_pts[:, 1] - a
    ac = tri_pts[:, 2] - a
    block = max(1, int(1_000_000 // max(len(tri_pts), 1)))
    for start in range(0, len(points), block):
        p = points[start:start + block][:, None, :] - a[None, :, :]
        d1 = np.einsum("mkj,kj->mk", p, ab)
        d2 = np.einsum("mkj,kj->mk", p, ac)
        a11 = np.einsum("kj,kj->k", ab, ab)
        a12 = np.einsum("kj,kj->k", ab, ac)
        a22 = np.einsum("kj,kj->k", ac, ac)
        det = np.maximum(a11 * a22 - a12 * a12, 1e-300)
        u = (a22 * d1 - a12 * d2) / det
        v = (a11 * d2 - a12 * d1) / det
        # clamp barycentric coordinates onto the triangle
        u = np.clip(u, 0.0, 1.0)
        v = np.clip(v, 0.0, 1.0)
        over = u + v > 1.0
        scale = np.where(over, u + v, 1.0)
        u = np.where(over, u / scale, u)
        v = np.where(over, v / scale, v)
        # clamped foot point is not always the true closest point for
        # obtuse triangles; refine against each edge segment explicitly
        foot = a + u[..., None] * ab + v[..., None] * ac
        d_face = np.linalg.norm(points[start:start + block][:, None, :] - foot,
                                axis=2)
        dmin = d_face
        for e0, evec in ((a, ab), (a, ac), (tri_pts[:, 1], tri_pts[:, 2] - tri_pts[:, 1])):
            w = points[start:start + block][:, None, :] - e0[None, :, :]
            elen2 = np.einsum("kj,kj->k", evec, evec)
            t = np.clip(
                np.einsum("mkj,kj->mk", w, evec) / np.maximum(elen2, 1e-300),
                0.0, 1.0,
            )
            proj = e0 + t[..., None] * evec
            d_edge = np.linalg.norm(
                points[start:start + block][:, None, :] - proj, axis=2
            )
            dmin = np.minimum(dmin, d_edge)
        best[start:start + block] = dmin.min(axis=1)
    return best


def _sample_pair(mesh_a, mesh_b, n_samples, seed):
    sa = sample_surface(mesh_a, n_samples, seed)
    sb = sample_surface(mesh_b, n_samples, seed)
    return sa, sb


def _nearest(sa, sb):
    kd = cKDTree(sb.points)
    d, idx = kd.query(sa.points)
    return d, idx


def chamfer(mesh_a, mesh_b, n_samples=100_000, seed=0, exact=False) -> float:
    """Symmetric Chamfer distance over area-uniform samples."""
    ma, mb = _as_mesh(mesh_a), _as_mesh(mesh_b)
    sa, sb = _sample_pair(ma, mb, n_samples, seed)
    if exact:
        ta, _ = ma.triangulate()
        tb, _ = mb.triangulate()
        d_ab = _point_triangle_distances(sa.points, mb.vertices[tb])
        d_ba = _point_triangle_distances(sb.points, ma.vertices[ta])
    else:
        d_ab, _ = _nearest(sa, sb)
        d_ba, _ = _nearest(sb, sa)
    return 0.5 * float(d_ab.mean()) + 0.5 * float(d_ba.mean())


def hausdorff(mesh_a, mesh_b, n_samples=100_000, seed=0, exact=False) -> float:
    """Symmetric Hausdorff distance over area-uniform samples."""
    ma, mb = _as_mesh(mesh_a), _as_mesh(mesh_b)
    sa, sb = _sample_pair(ma, mb, n_samples, seed)
    if exact:
        ta, _ = ma.triangulate()
        tb, _ = mb.triangulate()
        d_ab = _point_triangle_distances(sa.points, mb.vertices[tb])
        d_ba = _point_triangle_distances(sb.points, ma.vertices[ta])
    else:
        d_ab, _ = _nearest(sa, sb)
        d_ba, _ = _nearest(sb, sa)
    return max(float(d_ab.max()), float(d_ba.max()))


def normal_consistency(mesh_a, mesh_b, n_samples=100_000, seed=0) -> float:
    """Symmetric mean |n_a . n_b| between samples and their nearest samples."""
    sa, sb = _sample_pair(_as_mesh(mesh_a), _as_mesh(mesh_b), n_samples, seed)
    _, idx_ab = _nearest(sa, sb)
    _, idx_ba = _nearest(sb, sa)
    dots_ab = np.abs(np.einsum("ij,ij->i", sa.normals, sb.normals[idx_ab]))
    dots_ba = np.abs(np.einsum("ij,ij->i", sb.normals, sa.normals[idx_ba]))
    return 0.5 * float(dots_ab.mean()) + 0.5 * float(dots_ba.mean())


def _solid_membership(obj):
    """(membership fn, lower corner, upper corner) for a solid."""
    if isinstance(obj, ConvexDecomposition):
        if not obj.cells:
            raise EmptyMesh("decomposition has no cells")
        lo = np.min([c.vertices.min(axis=0) for c in obj.cells], axis=0)
        hi = np.max([c.vertices.max(axis=0) for c in obj.cells], axis=0)

        def member(pts):
            out = np.zeros(len(pts), dtype=bool)
            for c in obj.cells:
                out |= c.contains(pts, 0.0)
            return out

        return member, lo, hi
    mesh = _as_mesh(obj)
    if mesh.is_empty():
        raise EmptyMesh("mesh has no facets")
    if not is_closed(mesh.loops):
        raise OpenMesh("parity membership needs a closed mesh")
    tris, _ = mesh.triangulate()
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)

    def member(pts):
        return ray_parity_inside(pts, mesh.vertices, tris)

    return member, lo, hi


def volumetric_iou(solid_a, solid_b, n_samples=1_000_000, seed=0) -> float:
    """Monte-Carlo |A intersect B| / |A union B| over the joint bbox."""
    mem_a, lo_a, hi_a = _solid_membership(solid_a)
    mem_b, lo_b, hi_b = _solid_membership(solid_b)
    lo = np.minimum(lo_a, lo_b)
    hi = np.maximum(hi_a, hi_b)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(int(n_samples), 3))
    in_a = mem_a(pts)
    in_b = mem_b(pts)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    inter = int(np.count_nonzero(in_a & in_b))
    return inter / union


def complexity_report(surface, decomp, stats=None) -> dict:
    """Count summary: |C|, |F_S|, |C_V|, |F_V|, time, peak memory."""
    stats = stats or {}
    return {
        "cells": int(stats.get("cells", 0)),
        "surface_facets": 0 if surface is None else len(surface.facets),
        "volume_cells": 0 if decomp is None else decomp.n_cells,
        "volume_facets": 0 if decomp is None else decomp.n_facets,
        "time_s": float(stats.get("wall_time_s", 0.0)),
        "peak_mem_mb": float(stats.get("peak_mem_mb", 0.0)),
    }


def report_json(report: dict) -> str:
    return canonical_json(report)


def report_table(report: dict) -> str:
    """Aligned two-column text rendering of a report dict."""
    keys = list(report)
    width = max(len(k) for k in keys)
    lines = [f"{k.ljust(width)}  {report[k]}" for k in keys]
    return "\n".join(lines) + "\n"
