"""Surface extraction, facet aggregation, and convex-volume simplification.

The surface is read straight off the adjacency graph: every edge whose two
cells carry different labels contributes its interface polygon, oriented
from the inside cell to the outside cell. Facet vertices are welded and
T-junctions conformed so the audits (edge incidence exactly 2, coherent
orientation) hold combinatorially, not just geometrically.

Volume output goes through two reducers: merge_siblings collapses same-label
sibling leaves into their parent cell (pure tree bookkeeping), and
simplify_cells greedily merges adjacent inside cells whose convex-hull
volume defect |V_a + V_b - V_hull| stays below tau.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from warnings import warn

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptySurfaceWarning, NonManifoldClusterWarning
from .geometry import (
    ConvexCell,
    convex_hull_3d,
    polygon_area_2d,
    polygon_normal,
    project_to_plane,
)
from .ioutils import canonical_json, format_float, save_mesh
from .labelling import INSIDE, OccupancyLabels
from .meshops import edge_incidence, euler_characteristic, orientation_coherent
from .triangulation import constrained_delaunay_2d, ear_clip

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurfaceFacet:
    loop: tuple[int, ...]
    source: int | None
    plane: np.ndarray  # (4,) with normal = loop orientation normal


@dataclass
class SurfaceMesh:
    vertices: np.ndarray
    facets: list[SurfaceFacet]

    @property
    def loops(self) -> list[tuple[int, ...]]:
        return [f.loop for f in self.facets]

    def facet_points(self, i) -> np.ndarray:
        return self.vertices[list(self.facets[i].loop)]

    def is_empty(self) -> bool:
        return len(self.facets) == 0

    def is_watertight(self) -> bool:
        if self.is_empty():
            return False
        return all(c == 2 for c in edge_incidence(self.loops).values())

    def is_orientation_coherent(self) -> bool:
        return not self.is_empty() and orientation_coherent(self.loops)

    def euler_characteristic(self) -> int:
        return euler_characteristic(self.vertices, self.loops)

    def triangulate(self):
        """(triangles, facet index per triangle); concave loops ear-clipped.

        Aggregation can leave facets with concave boundary cycles, so a
        plain fan from loop[0] would spill triangles outside the surface.
        """
        tris = []
        owner = []
        for fi, f in enumerate(self.facets):
            if len(f.loop) == 3:
                tris.append(f.loop)
                owner.append(fi)
                continue
            # project along the loop's own normal so the triangulation is a
            # function of the loop alone (stored plane sign must not matter)
            pts = self.vertices[list(f.loop)]
            n = polygon_normal(pts)
            flat = project_to_plane(np.append(n, -float(n @ pts[0])), pts)
            for a, b, c in ear_clip(flat):
                tris.append((f.loop[a], f.loop[b], f.loop[c]))
                owner.append(fi)
        return (
            np.asarray(tris, dtype=np.intp).reshape(-1, 3),
            np.asarray(owner, dtype=np.intp),
        )

    def total_area(self) -> float:
        from .geometry import polygon_area_3d

        return sum(polygon_area_3d(self.facet_points(i))
                   for i in range(len(self.facets)))

    def save(self, path):
        save_mesh(self.vertices, self.loops, path)


@dataclass
class ConvexDecomposition:
    cells: list[ConvexCell]
    overlap: bool
    tau: float
    provenance: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_facets(self) -> int:
        return sum(len(c.facets) for c in self.cells)

    def total_volume(self) -> float:
        return sum(c.volume() for c in self.cells)


def _labels_dict(labels):
    return labels.labels if isinstance(labels, OccupancyLabels) else dict(labels)


# -- surface extraction ----------------------------------------------------


def _weld_vertices(raw_points, eps):
    """Map raw vertex rows to welded pool indices (exact + eps union-find)."""
    pool_index = {}
    order = []
    first_of = []
    for p in raw_points:
        key = p.tobytes()
        if key not in pool_index:
            pool_index[key] = len(order)
            order.append(p)
        first_of.append(pool_index[key])
    pts = np.asarray(order)
    parent = list(range(len(pts)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if len(pts) and eps > 0.0:
        kd = cKDTree(pts)
        for i, j in sorted(kd.query_pairs(eps)):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    reps = sorted({find(i) for i in range(len(pts))})
    compact = {r: k for k, r in enumerate(reps)}
    remap = np.array([compact[find(i)] for i in range(len(pts))], dtype=np.intp)
    final = pts[reps]
    return final, remap[np.asarray(first_of, dtype=np.intp)]


def _conform_t_junctions(vertices, loops, eps):
    """Insert pool vertices lying on facet edges so edges match exactly."""
    if not len(vertices):
        return loops
    kd = cKDTree(vertices)
    out = []
    for loop in loops:
        new_loop = []
        m = len(loop)
        for i in range(m):
            a, b = loop[i], loop[(i + 1) % m]
            new_loop.append(a)
            pa, pb = vertices[a], vertices[b]
            seg = pb - pa
            length = float(np.linalg.norm(seg))
            if length <= 2 * eps:
                continue
            cand = kd.query_ball_point((pa + pb) / 2.0, length / 2.0 + eps)
            inserts = []
            for c in cand:
                if c == a or c == b:
                    continue
                v = vertices[c] - pa
                t = float(v @ seg) / (length * length)
                if t * length <= eps or (1.0 - t) * length <= eps:
                    continue
                if float(np.linalg.norm(v - t * seg)) <= eps:
                    inserts.append((t, c))
            for _, c in sorted(inserts):
                new_loop.append(c)
        out.append(tuple(new_loop))
    return out


def _dedupe_loop(loop):
    out = []
    for idx in loop:
        if not out or idx != out[-1]:
            out.append(idx)
    if len(out) > 1 and out[0] == out[-1]:
        out.pop()
    return tuple(out)


def extract_surface(tree, graph, labels) -> SurfaceMesh:
    """One outward-oriented facet per label-discontinuous adjacency edge."""
    lab = _labels_dict(labels)
    eps = tree.tol.eps_abs
    polys = []
    sources = []
    for a, b, data in graph.edges(data=True):
        la, lb = lab[a], lab[b]
        if la == lb:
            continue
        outside_id = b if la == INSIDE else a
        poly = np.asarray(data["polygon"], dtype=float)
        n = polygon_normal(poly)
        toward_out = tree.node(outside_id).cell.interior_point() - poly.mean(axis=0)
        if float(n @ toward_out) < 0.0:
            poly = poly[::-1]
        polys.append(poly)
        sources.append(data["source"])
    if not polys:
        warn("no label-discontinuous interface; surface is empty",
             EmptySurfaceWarning, stacklevel=2)
        return SurfaceMesh(vertices=np.zeros((0, 3)), facets=[])

    counts = [len(p) for p in polys]
    vertices, remap = _weld_vertices(np.vstack(polys), eps)
    loops = []
    at = 0
    for c in counts:
        loops.append(_dedupe_loop(tuple(remap[at:at + c])))
        at += c
    loops = _conform_t_junctions(vertices, loops, eps)

    facets = []
    for loop, src in zip(loops, sources):
        if len(loop) < 3:
            continue
        pts = vertices[list(loop)]
        n = polygon_normal(pts)
        plane = np.append(n, -float(n @ pts[0]))
        facets.append(SurfaceFacet(loop=loop, source=src, plane=plane))
    mesh = SurfaceMesh(vertices=vertices, facets=facets)
    log.info("extracted surface: %d facets, %d vertices",
             len(facets), len(vertices))
    return mesh


# -- coplanar facet aggregation ---------------------------------------------


def _facet_clusters(mesh):
    """Group facet indices by (source, normal sign) then edge adjacency."""
    by_key = {}
    for fi, f in enumerate(mesh.facets):
        if f.source is None:
            by_key[("anon", fi)] = [fi]
            continue
        sign = None
        for key, members in by_key.items():
            if key[0] == f.source:
                ref = mesh.facets[members[0]].plane[:3]
                if float(ref @ f.plane[:3]) > 0.0:
                    sign = key
                    break
        if sign is None:
            sign = (f.source, fi)
        by_key.setdefault(sign, []).append(fi)

    clusters = []
    for members in by_key.values():
        # split the coplanar group into edge-connected components
        edge_owner = {}
        parent = {fi: fi for fi in members}

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for fi in members:
            loop = mesh.facets[fi].loop
            m = len(loop)
            for k in range(m):
                a, b = loop[k], loop[(k + 1) % m]
                e = (a, b) if a < b else (b, a)
                if e in edge_owner:
                    ra, rb = find(edge_owner[e]), find(fi)
                    if ra != rb:
                        parent[max(ra, rb)] = min(ra, rb)
                else:
                    edge_owner[e] = fi
        comp = {}
        for fi in members:
            comp.setdefault(find(fi), []).append(fi)
        clusters.extend(sorted(v) for v in comp.values())
    return sorted(clusters)


def _boundary_cycles(mesh, cluster):
    """Simple cycles of the cluster's once-used directed edges, or None."""
    undirected = {}
    directed = []
    for fi in cluster:
        loop = mesh.facets[fi].loop
        m = len(loop)
        for k in range(m):
            a, b = loop[k], loop[(k + 1) % m]
            e = (a, b) if a < b else (b, a)
            undirected[e] = undirected.get(e, 0) + 1
            directed.append((a, b))
    boundary = [(a, b) for a, b in directed
                if undirected[(a, b) if a < b else (b, a)] == 1]
    succ = {}
    for a, b in boundary:
        if a in succ:
            return None  # boundary vertex with more than 2 boundary edges
        succ[a] = b
    heads = set(succ.values())
    if heads != set(succ):
        return None
    cycles = []
    todo = set(succ)
    while todo:
        start = min(todo)
        cycle = [start]
        todo.discard(start)
        cur = succ[start]
        while cur != start:
            cycle.append(cur)
            todo.discard(cur)
            cur = succ[cur]
        if len(cycle) < 3:
            return None
        cycles.append(cycle)
    return cycles


def _point_in_loop_2d(pt, loop2d):
    """Even-odd rule point-in-polygon for a 2D loop."""
    x, y = pt
    inside = False
    m = len(loop2d)
    for i in range(m):
        x0, y0 = loop2d[i]
        x1, y1 = loop2d[(i + 1) % m]
        if (y0 > y) != (y1 > y):
            xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if xi > x:
                inside = not inside
    return inside


def aggregate_facets(mesh: SurfaceMesh) -> SurfaceMesh:
    """Replace coplanar facet clusters by their boundary-cycle polygons.

    Lone boundary cycle -> one polygon facet; a cycle nest (hole) -> the
    cluster is re-triangulated by a constrained Delaunay triangulation of
    the outer cycle with the holes as constraints. Non-manifold boundaries
    leave the cluster untouched.
    """
    if mesh.is_empty():
        return mesh
    keep = []
    new_facets = []
    for cluster in _facet_clusters(mesh):
        if len(cluster) == 1:
            keep.extend(cluster)
            continue
        cycles = _boundary_cycles(mesh, cluster)
        template = mesh.facets[cluster[0]]
        if cycles is None:
            warn(
                f"cluster on source {template.source} has a non-manifold "
                "boundary; left untouched",
                NonManifoldClusterWarning, stacklevel=2,
            )
            keep.extend(cluster)
            continue
        plane = template.plane
        loops2d = [project_to_plane(plane, mesh.vertices[cycle])
                   for cycle in cycles]
        areas = [polygon_area_2d(l2) for l2 in loops2d]
        outers = [i for i, s in enumerate(areas) if s > 0.0]
        holes = [i for i, s in enumerate(areas) if s <= 0.0]
        ok = True
        produced = []
        for oi in outers:
            inner = [hi for hi in holes
                     if _point_in_loop_2d(loops2d[hi][0], loops2d[oi])]
            if not inner:
                produced.append(SurfaceFacet(
                    loop=tuple(cycles[oi]), source=template.source,
                    plane=plane))
                continue
            index_map = list(cycles[oi])
            for hi in inner:
                index_map.extend(cycles[hi])
            try:
                verts2d, tris = constrained_delaunay_2d(
                    loops2d[oi], [loops2d[hi] for hi in inner]
                )
            except Exception:
                ok = False
                break
            if len(verts2d) != len(index_map):
                ok = False  # triangulation introduced vertices; bail out
                break
            for t in tris:
                produced.append(SurfaceFacet(
                    loop=tuple(index_map[k] for k in t),
                    source=template.source, plane=plane))
        if not ok:
            keep.extend(cluster)
            continue
        new_facets.extend(produced)
    out = [mesh.facets[i] for i in sorted(keep)] + new_facets
    log.info("aggregated %d facets into %d", len(mesh.facets), len(out))
    return SurfaceMesh(vertices=mesh.vertices, facets=out)


# -- volume simplification ---------------------------------------------------


def merge_siblings(tree, labels):
    """Collapse same-label sibling subtrees bottom-up.

    Returns (reduced, owner): reduced maps surviving node id -> label,
    owner maps every original leaf id -> the surviving node covering it.
    No geometry is computed; parent cells already exist in the tree.
    """
    lab = _labels_dict(labels)
    uniform = {}
    order = []
    stack = [tree.root]
    while stack:  # iterative postorder
        nid = stack.pop()
        order.append(nid)
        node = tree.node(nid)
        if not node.is_leaf:
            stack.extend(node.children)
    for nid in reversed(order):
        node = tree.node(nid)
        if node.is_leaf:
            uniform[nid] = lab[nid]
        else:
            l0, l1 = (uniform[c] for c in node.children)
            uniform[nid] = l0 if (l0 is not None and l0 == l1) else None

    reduced = {}
    owner = {}
    stack = [tree.root]
    while stack:
        nid = stack.pop()
        node = tree.node(nid)
        if uniform[nid] is not None:
            reduced[nid] = uniform[nid]
            inner = [nid]
            while inner:
                k = inner.pop()
                knode = tree.node(k)
                if knode.is_leaf:
                    owner[k] = nid
                else:
                    inner.extend(knode.children)
        else:
            stack.extend(node.children)
    log.info("sibling merge: %d leaves -> %d cells", len(owner), len(reduced))
    return reduced, owner


def merged_adjacency(graph, owner):
    """Collapse a leaf adjacency graph onto merge_siblings owners."""
    import networkx as nx

    out = nx.Graph()
    out.add_nodes_from(sorted(set(owner.values())))
    for a, b in graph.edges():
        oa, ob = owner.get(a, a), owner.get(b, b)
        if oa != ob:
            out.add_edge(oa, ob)
    return out


def simplify_cells(cells, graph, labels, tau, tol=None,
                   provenance=None) -> ConvexDecomposition:
    """Best-first pairwise hull merging of adjacent inside cells.

    cells: mapping id -> ConvexCell over the ids used by graph/labels.
    Merges the adjacent pair with the smallest volume defect
    |V_a + V_b - V_hull| while that defect is below tau (tau = 0 uses
    eps_vol = 1e-9 x total inside volume). tau > 0 permits overlap.
    """
    lab = _labels_dict(labels)
    alive = {cid: cell for cid, cell in cells.items() if lab.get(cid) == INSIDE}
    n_inside = len(alive)
    prov = {cid: tuple(provenance[cid]) if provenance else (cid,)
            for cid in alive}
    total = sum(c.volume() for c in alive.values())
    threshold = tau if tau > 0.0 else 1e-9 * total
    if tol is None:
        pts = np.vstack([c.vertices for c in alive.values()]) if alive else None
        from .geometry import ToleranceContext

        tol = (ToleranceContext.from_points(pts)
               if pts is not None else ToleranceContext(bbox_diagonal=1.0))

    neighbors = {cid: set() for cid in alive}
    for a, b in graph.edges():
        if a in alive and b in alive:
            neighbors[a].add(b)
            neighbors[b].add(a)

    seq = itertools.count()
    heap = []

    def try_push(a, b):
        try:
            hull = convex_hull_3d(
                np.vstack([alive[a].vertices, alive[b].vertices]), tol
            )
        except Exception:
            return
        defect = abs(alive[a].volume() + alive[b].volume() - hull.volume())
        if defect < threshold:
            heapq.heappush(heap, (defect, next(seq), a, b, hull))

    for a in sorted(neighbors):
        for b in sorted(neighbors[a]):
            if a < b:
                try_push(a, b)

    next_id = (max(alive) + 1) if alive else 0
    merges = 0
    while heap:
        defect, _, a, b, hull = heapq.heappop(heap)
        if a not in alive or b not in alive:
            continue
        cid = next_id
        next_id += 1
        alive.pop(a), alive.pop(b)
        alive[cid] = hull
        prov[cid] = tuple(sorted(prov.pop(a) + prov.pop(b)))
        nbrs = (neighbors.pop(a) | neighbors.pop(b)) - {a, b}
        neighbors[cid] = set()
        for n in nbrs:
            if n in alive:
                neighbors[n].discard(a)
                neighbors[n].discard(b)
                neighbors[n].add(cid)
                neighbors[cid].add(n)
                try_push(min(n, cid), max(n, cid))
        merges += 1

    order = sorted(alive)
    decomp = ConvexDecomposition(
        cells=[alive[cid] for cid in order],
        overlap=tau > 0.0,
        tau=float(tau),
        provenance=[prov[cid] for cid in order],
    )
    log.info("simplified %d inside cells to %d (tau=%g, %d merges)",
             n_inside, decomp.n_cells, tau, merges)
    return decomp


# -- export -------------------------------------------------------------------


def export_decomposition(decomp: ConvexDecomposition, path, format="obj"):
    """Write the decomposition as grouped OBJ or a JSON half-space list."""
    path = Path(path)
    if format == "obj":
        with open(path, "w", encoding="ascii") as fh:
            offset = 1
            for k, cell in enumerate(decomp.cells):
                fh.write(f"g cell_{k:04d}\n")
                for v in cell.vertices:
                    fh.write("v " + " ".join(format_float(x) for x in v) + "\n")
                for _, loop in cell.facets:
                    for i in range(1, len(loop) - 1):
                        fh.write(
                            f"f {offset + loop[0]} {offset + loop[i]} "
                            f"{offset + loop[i + 1]}\n"
                        )
                offset += len(cell.vertices)
        return
    if format == "json":
        payload = {
            "cells": [
                {
                    "halfspaces": [[float(x) for x in p] for p in cell.planes],
                    "provenance": [int(i) for i in prov],
                    "volume": cell.volume(),
                }
                for cell, prov in zip(decomp.cells, decomp.provenance)
            ],
            "overlap": decomp.overlap,
            "tau": decomp.tau,
            "counts": {"C_V": decomp.n_cells, "F_V": decomp.n_facets},
        }
        with open(path, "w", encoding="ascii") as fh:
            fh.write(canonical_json(payload))
        return
    raise ValueError(f"unknown decomposition format: {format!r}")


def load_decomposition_json(path):
    import json

    with open(path, "r", encoding="ascii") as fh:
        return json.load(fh)
