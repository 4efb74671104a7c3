"""Inside/outside labelling of leaf cells.

Two data-term routes feed one solver:

* label_cells_normal: inlier points near each cell-cell interface vote with
  their normals (a point votes "outside" for the cell its normal points
  into), cells touching the domain box get a strong outside prior, and the
  unary + area-weighted pairwise energy is minimized exactly by min-cut.
* label_cells_proxy: each leaf is labelled by majority ray-parity of jittered
  interior samples against a closed proxy mesh; no smoothing.

Vote weights use the alignment |n . N| between the point normal and the
interface normal, so points whose normals are tangential to an interface
contribute nothing instead of flipping on sign noise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from warnings import warn

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    EmptyVotesWarning,
    MissingNormals,
    NegativePairwise,
    OpenProxyMesh,
)
from .geometry import polygon_normal, project_to_plane
from .meshops import is_closed, ray_parity_inside, triangulate_faces

log = logging.getLogger(__name__)

INSIDE = "inside"
OUTSIDE = "outside"

BOUNDARY_PRIOR_FACTOR = 10.0


@dataclass(frozen=True)
class LabelConfig:
    lam: float = 0.5
    vote_radius_frac: float = 0.01
    proxy_samples_per_cell: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.proxy_samples_per_cell < 1:
            raise ValueError("proxy_samples_per_cell must be >= 1")


@dataclass
class OccupancyLabels:
    labels: dict[int, str]
    energy: float | None = None
    margins: dict[int, tuple[float, float]] = field(default_factory=dict)

    def is_inside(self, leaf_id: int) -> bool:
        return self.labels[leaf_id] == INSIDE


def min_cut(unary, edges):
    """Exact binary labelling minimizing sum(unary) + sum(pairwise).

    unary: (n, 2) array, unary[i, l] = cost of giving node i label l.
    edges: iterable of (i, j, w) with w >= 0 charged when labels differ.
    Returns (labels array of 0/1, optimal energy). Label 0 is the source
    side ("inside" by our convention).
    """
    unary = np.asarray(unary, dtype=float)
    n = len(unary)
    g = nx.DiGraph()
    g.add_node("s")
    g.add_node("t")
    for i in range(n):
        # cutting s->i puts i on the sink side (label 1), paying unary[i,1]
        g.add_edge("s", i, capacity=float(unary[i, 1]))
        g.add_edge(i, "t", capacity=float(unary[i, 0]))
    for i, j, w in edges:
        w = float(w)
        if w < 0:
            raise NegativePairwise(f"edge ({i},{j}) has weight {w}")
        if w == 0.0:
            continue
        g.add_edge(int(i), int(j), capacity=w)
        g.add_edge(int(j), int(i), capacity=w)
    value, (source_side, _) = nx.minimum_cut(g, "s", "t")
    labels = np.ones(n, dtype=np.intp)
    for node in source_side:
        if node != "s":
            labels[node] = 0
    return labels, float(value)


def _interface_side_sign(tree, edge_poly, normal, leaf_id):
    """+1 when `normal` points from the interface toward leaf_id's interior."""
    centroid = edge_poly.mean(axis=0)
    interior = tree.node(leaf_id).cell.interior_point()
    return 1.0 if float(normal @ (interior - centroid)) >= 0.0 else -1.0


def _point_near_polygon(points, poly, normal, radius):
    """Mask of points within `radius` of the polygon (plane slab + 2D test)."""
    centroid = poly.mean(axis=0)
    d = -float(normal @ centroid)
    plane = np.append(normal, d)
    dist = points @ normal + d
    mask = np.abs(dist) <= radius
    if not mask.any():
        return mask
    poly2d = project_to_plane(plane, poly)
    pts2d = project_to_plane(plane, points[mask])
    inside = np.ones(len(pts2d), dtype=bool)
    m = len(poly2d)
    for i in range(m):
        a = poly2d[i]
        e = poly2d[(i + 1) % m] - a
        elen = np.linalg.norm(e)
        if elen == 0.0:
            continue
        # signed in-plane distance to edge line, CCW loop => inside is left
        cross = e[0] * (pts2d[:, 1] - a[1]) - e[1] * (pts2d[:, 0] - a[0])
        inside &= cross >= -radius * elen
    out = np.zeros(len(points), dtype=bool)
    out[np.flatnonzero(mask)[inside]] = True
    return out


def label_cells_normal(tree, graph, primitives, cloud, cfg=None):
    """Occupancy via normal votes + boundary prior, solved by min-cut."""
    cfg = cfg or LabelConfig()
    if cloud.normals is None:
        raise MissingNormals("normal-based labelling needs oriented normals")
    leaf_ids = tree.leaf_ids()
    index = {lid: k for k, lid in enumerate(leaf_ids)}
    n = len(leaf_ids)
    votes = np.zeros((n, 2), dtype=float)  # [:, 0] inside, [:, 1] outside

    all_idx = np.unique(np.concatenate([p.inliers for p in primitives])) if primitives else np.array([], dtype=np.intp)
    radius = cfg.vote_radius_frac * tree.tol.bbox_diagonal
    kd = cKDTree(cloud.points[all_idx]) if len(all_idx) else None

    for a, b, data in graph.edges(data=True):
        poly = data["polygon"]
        if kd is None:
            continue
        normal = polygon_normal(poly)
        centroid = poly.mean(axis=0)
        reach = radius + float(np.linalg.norm(poly - centroid, axis=1).max())
        cand = kd.query_ball_point(centroid, reach)
        if not cand:
            continue
        cand = all_idx[np.asarray(cand, dtype=np.intp)]
        near = _point_near_polygon(cloud.points[cand], poly, normal, radius)
        if not near.any():
            continue
        cand = cand[near]
        align = cloud.normals[cand] @ normal
        side_a = _interface_side_sign(tree, poly, normal, a)
        # weight |align|; sign(align) picks which cell the normal points into
        toward_a = align * side_a
        w_a_out = float(np.abs(toward_a[toward_a > 0]).sum())
        w_b_out = float(np.abs(toward_a[toward_a < 0]).sum())
        ia, ib = index[a], index[b]
        votes[ia, 1] += w_a_out
        votes[ib, 0] += w_a_out
        votes[ib, 1] += w_b_out
        votes[ia, 0] += w_b_out

    total_mass = float(votes.sum())
    if total_mass <= 0.0:
        warn("no normal votes collected; labelling everything outside",
             EmptyVotesWarning, stacklevel=2)
        labels = {lid: OUTSIDE for lid in leaf_ids}
        return OccupancyLabels(labels=labels, energy=0.0)

    # unary[i, l] = cost of label l; inside pays the outside votes
    unary = np.empty((n, 2), dtype=float)
    unary[:, 0] = votes[:, 1] / total_mass
    unary[:, 1] = votes[:, 0] / total_mass
    prior = BOUNDARY_PRIOR_FACTOR * float(votes.sum(axis=1).max()) / total_mass
    for lid in leaf_ids:
        cell = tree.node(lid).cell
        if any(src is None for src in cell.plane_sources):
            unary[index[lid], 0] += prior

    areas = [float(d["area"]) for _, _, d in graph.edges(data=True)]
    total_area = sum(areas)
    edges = []
    if total_area > 0.0 and cfg.lam > 0.0:
        for (a, b, data) in graph.edges(data=True):
            edges.append((index[a], index[b],
                          cfg.lam * float(data["area"]) / total_area))

    raw, energy = min_cut(unary, edges)
    labels = {lid: (INSIDE if raw[index[lid]] == 0 else OUTSIDE)
              for lid in leaf_ids}
    margins = {lid: (float(votes[index[lid], 0]), float(votes[index[lid]].sum()))
               for lid in leaf_ids}
    n_in = sum(1 for v in labels.values() if v == INSIDE)
    log.info("labelled %d cells (%d inside), energy %.6g", n, n_in, energy)
    return OccupancyLabels(labels=labels, energy=energy, margins=margins)


def _cell_samples(cell, count, rng):
    """Jittered interior points: centroid pulled toward random vertices."""
    centroid = cell.vertices.mean(axis=0)
    if count == 1:
        return centroid[None, :]
    picks = rng.integers(0, len(cell.vertices), size=count)
    t = rng.uniform(0.0, 0.8, size=count)
    return centroid + t[:, None] * (cell.vertices[picks] - centroid)


def label_cells_proxy(tree, proxy_vertices, proxy_faces, cfg=None):
    """Occupancy by majority ray-parity of interior samples vs a proxy mesh."""
    cfg = cfg or LabelConfig()
    if not is_closed(proxy_faces):
        raise OpenProxyMesh("proxy mesh has edges not shared by exactly 2 faces")
    verts = np.asarray(proxy_vertices, dtype=float)
    tris = triangulate_faces(proxy_faces)
    labels: dict[int, str] = {}
    margins: dict[int, tuple[float, float]] = {}
    rng = np.random.default_rng(cfg.seed)
    for lid in tree.leaf_ids():
        cell = tree.node(lid).cell
        samples = _cell_samples(cell, cfg.proxy_samples_per_cell, rng)
        inside = ray_parity_inside(samples, verts, tris, eps=tree.tol.eps_abs)
        k = int(np.count_nonzero(inside))
        # strict majority required; ties go outside
        labels[lid] = INSIDE if 2 * k > len(samples) else OUTSIDE
        margins[lid] = (float(k), float(len(samples)))
    n_in = sum(1 for v in labels.values() if v == INSIDE)
    log.info("proxy-labelled %d cells (%d inside)", len(labels), n_in)
    return OccupancyLabels(labels=labels, energy=None, margins=margins)
