"""Triangle/polygon mesh helpers: audits, triangulation, ray parity."""
from __future__ import annotations

import math

import numpy as np

from .errors import EmptyMesh

# fixed query direction chosen to dodge axis-aligned geometry
RAY_DIR = np.array([1.0, math.pi / 1000.0, math.e / 1000.0])
RAY_DIR = RAY_DIR / np.linalg.norm(RAY_DIR)


def triangulate_faces(faces):
    """Fan-triangulate polygon index loops; triangles inherit orientation."""
    tris = []
    for f in faces:
        for i in range(1, len(f) - 1):
            tris.append((f[0], f[i], f[i + 1]))
    return np.asarray(tris, dtype=np.intp).reshape(-1, 3)


def edge_incidence(faces):
    """Count of each undirected edge over polygon faces."""
    counts: dict[tuple[int, int], int] = {}
    for f in faces:
        m = len(f)
        for i in range(m):
            a, b = int(f[i]), int(f[(i + 1) % m])
            key = (a, b) if a < b else (b, a)
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_closed(faces) -> bool:
    """True when every undirected edge borders exactly two faces."""
    if not len(faces):
        return False
    return all(c == 2 for c in edge_incidence(faces).values())


def orientation_coherent(faces) -> bool:
    """True when every shared edge is traversed once in each direction."""
    directed: dict[tuple[int, int], int] = {}
    for f in faces:
        m = len(f)
        for i in range(m):
            a, b = int(f[i]), int(f[(i + 1) % m])
            directed[(a, b)] = directed.get((a, b), 0) + 1
    for (a, b), c in directed.items():
        if c != 1 or directed.get((b, a), 0) != 1:
            return False
    return True


def euler_characteristic(vertices, faces) -> int:
    used = {int(i) for f in faces for i in f}
    return len(used) - len(edge_incidence(faces)) + len(faces)


def _ray_hits(origin, direction, tri_pts, eps):
    """Moller-Trumbore over all triangles at once.

    Returns (ok, suspicious): ok = robust crossing count, suspicious = True
    when any hit is too close to a triangle edge or to the origin to trust.
    """
    v0 = tri_pts[:, 0]
    e1 = tri_pts[:, 1] - v0
    e2 = tri_pts[:, 2] - v0
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    parallel = np.abs(det) < 1e-14
    inv = np.where(parallel, 1.0, 1.0 / np.where(parallel, 1.0, det))
    tvec = origin - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,j->i", qvec, direction) * inv
    t = np.einsum("ij,ij->i", qvec, e2) * inv
    inside = (~parallel) & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    near_edge = inside & (
        (u < eps) | (v < eps) | (u + v > 1.0 - eps) | (t < eps)
    )
    grazing = (~parallel) & (np.abs(t) <= eps) & (u >= -eps) & (v >= -eps) & (
        u + v <= 1.0 + eps
    )
    suspicious = bool(near_edge.any() or grazing.any())
    return int(np.count_nonzero(inside)), suspicious


def _batch_hits(origins, direction, tri_pts, eps):
    """Vectorized Moller-Trumbore: crossings and suspicion per origin."""
    v0 = tri_pts[:, 0]
    e1 = tri_pts[:, 1] - v0
    e2 = tri_pts[:, 2] - v0
    pvec = np.cross(direction, e2)
    det = np.einsum("kj,kj->k", e1, pvec)
    parallel = np.abs(det) < 1e-14
    inv = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, det))
    tvec = origins[:, None, :] - v0[None, :, :]
    u = np.einsum("mkj,kj->mk", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("mkj,j->mk", qvec, direction) * inv
    t = np.einsum("mkj,kj->mk", qvec, e2) * inv
    alive = ~parallel
    inside = alive & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    near = inside & ((u < eps) | (v < eps) | (u + v > 1.0 - eps) | (t < eps))
    graze = alive & (np.abs(t) <= eps) & (u >= -eps) & (v >= -eps) & (
        u + v <= 1.0 + eps
    )
    return inside.sum(axis=1), (near | graze).any(axis=1)


def ray_parity_inside(points, vertices, triangles, eps=1e-9):
    """Point-in-solid test by ray-crossing parity against a closed mesh.

    Rays start along RAY_DIR; a hit that grazes a triangle edge or passes
    within eps of the origin triggers a deterministic re-cast with a
    perturbed direction (per point, so bulk throughput stays vectorized).
    """
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.intp)
    if len(triangles) == 0:
        raise EmptyMesh("parity test needs a non-empty mesh")
    tri_pts = vertices[triangles]
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros(len(pts), dtype=bool)
    block = max(1, int(2_000_000 // max(len(tri_pts), 1)))
    for start in range(0, len(pts), block):
        chunk = pts[start:start + block]
        crossings, suspicious = _batch_hits(chunk, RAY_DIR, tri_pts, eps)
        out[start:start + len(chunk)] = crossings % 2 == 1
        for i in np.flatnonzero(suspicious):
            direction = RAY_DIR
            crossed = crossings[i]
            for attempt in range(8):
                crossed, bad = _ray_hits(chunk[i], direction, tri_pts, eps)
                if not bad:
                    break
                # deterministic jitter sequence
                wobble = np.array(
                    [
                        math.sin(0.7 + 1.3 * attempt),
                        math.cos(1.1 + 0.9 * attempt),
                        math.sin(2.3 + 0.5 * attempt),
                    ]
                )
                direction = RAY_DIR + 1e-3 * (attempt + 1) * wobble
                direction = direction / np.linalg.norm(direction)
            out[start + i] = crossed % 2 == 1
    return out
