"""
Concise plane arrangement: BSP tree with dynamic, inlier-driven split
ordering, kept in lock-step with a cell adjacency graph.

The key departure from an exhaustive arrangement is the split schedule:
a plane whose remaining peers all sit weakly on one side takes priority
(condition i: the resulting child can never be split again); otherwise the
plane separating the most primitive pairs wins (condition ii, the
|L_p|*|R_p| product). Inlier points decide sides, so only the observed
extent of a primitive propagates splits, not its whole supporting plane.
"""
from __future__ import annotations

import heapq
import json
import logging
import resource
import time
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .errors import (
    DegenerateCut,
    DegenerateInput,
    InvalidPrimitive,
    NoIntersection,
    ParseError,
)
from .geometry import (
    ConvexCell,
    ToleranceContext,
    clip_polygon,
    convex_hull_2d,
    lift_from_plane,
    polygon_area_2d,
    polygon_area_3d,
    project_to_plane,
    split_cell,
)
from .ioutils import canonical_json
from .primitives import dilated_bbox

log = logging.getLogger("compod.arrangement")

ORDERINGS = ("dynamic", "product_only", "area_desc")
BASES = ("inlier_points", "hull_vertices", "hull_sampled")


@dataclass(frozen=True)
class OrderingMode:
    """Split schedule and the point basis that drives it."""

    ordering: str = "dynamic"
    basis: str = "inlier_points"
    hull_samples: int = 1_000_000

    def __post_init__(self):
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")
        if self.basis not in BASES:
            raise ValueError(f"basis must be one of {BASES}")
        if self.hull_samples < 1:
            raise ValueError("hull_samples must be positive")


class LeafAssignment:
    """Primitives assigned to a leaf, as concatenated point blocks.

    points[offsets[i]:offsets[i+1]] are the driving points of pids[i]
    inside this leaf. Kept flat so split selection can score every
    candidate plane with one matrix product per block.
    """

    __slots__ = ("pids", "points", "offsets")

    def __init__(self, pids, points, offsets):
        self.pids = np.asarray(pids, dtype=np.intp)
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.offsets = np.asarray(offsets, dtype=np.intp)

    @classmethod
    def from_blocks(cls, blocks):
        """blocks: list of (pid, (m,3) points), m >= 1 each."""
        if not blocks:
            return cls(
                np.empty(0, dtype=np.intp), np.empty((0, 3)), np.zeros(1, dtype=np.intp)
            )
        pids = [b[0] for b in blocks]
        pts = [np.asarray(b[1], dtype=float) for b in blocks]
        offsets = np.zeros(len(blocks) + 1, dtype=np.intp)
        offsets[1:] = np.cumsum([len(p) for p in pts])
        return cls(np.asarray(pids), np.vstack(pts), offsets)

    def __len__(self) -> int:
        return len(self.pids)

    def count(self, i: int) -> int:
        return int(self.offsets[i + 1] - self.offsets[i])

    def block(self, i: int) -> np.ndarray:
        return self.points[self.offsets[i] : self.offsets[i + 1]]

    def without(self, pid: int) -> "LeafAssignment":
        blocks = [
            (int(p), self.block(i)) for i, p in enumerate(self.pids) if p != pid
        ]
        return LeafAssignment.from_blocks(blocks)


@dataclass
class BspNode:
    node_id: int
    cell: ConvexCell
    depth: int = 0
    split_plane: np.ndarray | None = None
    split_source: int | None = None
    children: tuple[int, int] | None = None
    assigned: LeafAssignment | None = None
    label: str | None = None

    @property
    def is_leaf(self) -> bool:
        return self.children is None


class BspTree:
    """Indexed node pool; construction statistics in `stats`."""

    def __init__(self, root_cell: ConvexCell, tol: ToleranceContext, planes=None):
        self.nodes: list[BspNode] = [BspNode(node_id=0, cell=root_cell)]
        self.root = 0
        self.tol = tol
        self.planes = (
            np.asarray(planes, dtype=float) if planes is not None else None
        )
        # hull_vertices mode: assignment blocks are convex polygon loops
        # that get clipped at each split rather than partitioned by side;
        # point_blocks lists pids exempted from clipping (degenerate hulls)
        self.polygon_basis = False
        self.point_blocks: frozenset[int] = frozenset()
        self.stats = {"splits": 0, "reassigned_points": 0, "wall_time_s": 0.0}

    def node(self, node_id: int) -> BspNode:
        return self.nodes[node_id]

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def leaf_ids(self):
        return [n.node_id for n in self.nodes if n.is_leaf]

    def max_depth(self) -> int:
        return max((n.depth for n in self.nodes), default=0)

    def add_node(self, cell: ConvexCell, depth: int) -> int:
        nid = len(self.nodes)
        self.nodes.append(BspNode(node_id=nid, cell=cell, depth=depth))
        return nid


def _split_graph_node(graph, node_id, lid, rid, plane, iface, tol, source):
    """Redistribute `node_id`'s edges to its two children and link them.

    Each incident interface polygon is clipped against the cut plane; the
    part on each side goes to the child on that side. The new child-child
    edge carries the cut polygon itself.
    """
    plane = np.asarray(plane, dtype=float)
    for other in list(graph.neighbors(node_id)):
        data = graph.edges[node_id, other]
        poly = data["polygon"]
        for child, side in ((lid, -1), (rid, 1)):
            part = clip_polygon(poly, plane, tol, side)
            if part is not None:
                area = polygon_area_3d(part)
                if area > tol.eps_area:
                    graph.add_edge(
                        child, other, polygon=part, area=area, source=data["source"]
                    )
    graph.remove_node(node_id)
    graph.add_node(lid)
    graph.add_node(rid)
    graph.add_edge(
        lid, rid, polygon=iface, area=polygon_area_3d(iface), source=source
    )


def apply_split(tree: BspTree, graph, leaf_id: int, pid: int):
    """Split a leaf by the supporting plane of assigned primitive `pid`.

    Inlier points are re-distributed with strict side tests; points within
    eps_abs of the cut plane are dropped, and the splitting primitive is
    retired outright. Children that inherit no points are terminal.
    Raises NoIntersection / DegenerateCut from the cell split untouched.
    """
    node = tree.node(leaf_id)
    assert node.is_leaf and node.assigned is not None
    plane = tree.planes[pid]
    neg_cell, pos_cell, iface = split_cell(node.cell, plane, tree.tol, source=pid)

    eps = tree.tol.eps_abs
    assign = node.assigned
    left_blocks = []
    right_blocks = []
    moved = 0
    if tree.polygon_basis:
        # the block is an ordered convex loop on the primitive's plane;
        # clip it so presence follows the polygon, not its corner points
        for i, qid in enumerate(assign.pids):
            if int(qid) == int(pid):
                continue
            block = assign.block(i)
            if int(qid) in tree.point_blocks:
                d = block @ plane[:3] + plane[3]
                for mask, out in ((d < -eps, left_blocks), (d > eps, right_blocks)):
                    if mask.any():
                        out.append((int(qid), block[mask]))
                        moved += int(mask.sum())
                continue
            for side, out in ((-1, left_blocks), (1, right_blocks)):
                part = clip_polygon(block, plane, tree.tol, side)
                if part is not None and polygon_area_3d(part) > tree.tol.eps_area:
                    out.append((int(qid), np.asarray(part, dtype=float)))
                    moved += len(part)
    else:
        d_all = assign.points @ plane[:3] + plane[3]
        for i, qid in enumerate(assign.pids):
            if int(qid) == int(pid):
                continue
            lo, hi = assign.offsets[i], assign.offsets[i + 1]
            d = d_all[lo:hi]
            block = assign.points[lo:hi]
            lmask = d < -eps
            rmask = d > eps
            if lmask.any():
                left_blocks.append((int(qid), block[lmask]))
            if rmask.any():
                right_blocks.append((int(qid), block[rmask]))
            moved += int(lmask.sum() + rmask.sum())

    lid = tree.add_node(neg_cell, node.depth + 1)
    rid = tree.add_node(pos_cell, node.depth + 1)
    tree.node(lid).assigned = LeafAssignment.from_blocks(left_blocks)
    tree.node(rid).assigned = LeafAssignment.from_blocks(right_blocks)
    node.children = (lid, rid)
    node.split_plane = np.asarray(plane, dtype=float)
    node.split_source = int(pid)
    node.assigned = None
    tree.stats["splits"] += 1
    tree.stats["reassigned_points"] += moved

    _split_graph_node(graph, leaf_id, lid, rid, plane, iface, tree.tol, int(pid))
    return lid, rid


def select_split(tree: BspTree, leaf_id: int, product_only: bool = False):
    """Choose the next splitting primitive for a leaf.

    Returns (pid, priority flag) or None when nothing is assigned.
    Priority (condition i) fires when every driving point of every other
    assigned primitive sits weakly on one side of the candidate within
    eps_abs; on-plane points are ignored. Otherwise the candidate
    maximizing |L_p|*|R_p| wins, L/R counting primitives entirely strictly
    on one side. Ties: larger leaf-local point count, then smaller pid.
    """
    assign = tree.node(leaf_id).assigned
    if assign is None or len(assign) == 0:
        return None
    k = len(assign)
    pids = assign.pids
    counts = np.diff(assign.offsets)
    if k == 1:
        return (int(pids[0]), True) if not product_only else (int(pids[0]), False)

    planes = tree.planes[pids]
    pts = assign.points
    m = len(pts)
    eps = tree.tol.eps_abs
    offs = assign.offsets[:-1]

    priority = np.zeros(k, dtype=bool)
    product = np.zeros(k, dtype=np.int64)

    block = max(1, int(32_000_000 // max(m, 1)))
    for c0 in range(0, k, block):
        c1 = min(k, c0 + block)
        d = pts @ planes[c0:c1, :3].T + planes[c0:c1, 3]
        gmin = np.minimum.reduceat(d, offs, axis=0)
        gmax = np.maximum.reduceat(d, offs, axis=0)
        cols = np.arange(c1 - c0)
        rows = np.arange(c0, c1)
        has_neg = gmin < -eps
        has_pos = gmax > eps
        has_neg[rows, cols] = False
        has_pos[rows, cols] = False
        if not product_only:
            priority[c0:c1] = ~(has_neg.any(axis=0) & has_pos.any(axis=0))
        all_neg = gmax < -eps
        all_pos = gmin > eps
        all_neg[rows, cols] = False
        all_pos[rows, cols] = False
        product[c0:c1] = all_neg.sum(axis=0).astype(np.int64) * all_pos.sum(
            axis=0
        ).astype(np.int64)

    def best_of(mask):
        idx = np.nonzero(mask)[0]
        order = sorted(idx, key=lambda i: (-int(counts[i]), int(pids[i])))
        return order[0]

    if not product_only and priority.any():
        c = best_of(priority)
        return int(pids[c]), True
    top = product == product.max()
    c = best_of(top)
    return int(pids[c]), False


def _hull_polygon(plane, points, tol):
    """3D convex hull loop of a primitive's inliers projected on its plane."""
    uv = project_to_plane(plane, points)
    hull2d = convex_hull_2d(uv, tol)
    return lift_from_plane(plane, hull2d), hull2d


def _sample_hull(plane, hull2d, n, rng):
    """n points uniform in a convex 2D polygon, lifted back to the plane."""
    tri_areas = []
    tris = []
    for i in range(1, len(hull2d) - 1):
        tri = np.array([hull2d[0], hull2d[i], hull2d[i + 1]])
        tris.append(tri)
        tri_areas.append(abs(polygon_area_2d(tri)))
    tri_areas = np.asarray(tri_areas)
    probs = tri_areas / tri_areas.sum()
    choice = rng.choice(len(tris), size=n, p=probs)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    out = np.empty((n, 2))
    for t in range(len(tris)):
        mask = choice == t
        if not mask.any():
            continue
        a, b, c = tris[t]
        u = r1[mask][:, None]
        v = r2[mask][:, None]
        out[mask] = (1 - u) * a + u * (1 - v) * b + u * v * c
    return lift_from_plane(plane, out)


def _initial_blocks(primitives, cloud, mode: OrderingMode, tol, seed):
    """Per-primitive driving point blocks for the root assignment.

    Returns (blocks, point_pids): point_pids are primitives whose block is
    a raw point set rather than a polygon loop (degenerate-hull fallback),
    which the polygon-clipping split path must partition by side instead.
    """
    blocks = []
    if mode.basis == "inlier_points":
        for p in primitives:
            blocks.append((p.id, cloud.points[p.inliers]))
        return blocks, frozenset(p.id for p in primitives)

    hulls = []
    areas = []
    fallback = set()
    for p in primitives:
        try:
            loop3d, hull2d = _hull_polygon(p.plane, cloud.points[p.inliers], tol)
        except DegenerateInput:
            log.warning(
                "primitive %d has a degenerate hull; using raw inliers", p.id
            )
            hulls.append(None)
            areas.append(0.0)
            fallback.add(p.id)
            continue
        hulls.append((loop3d, hull2d))
        areas.append(abs(polygon_area_2d(hull2d)))

    if mode.basis == "hull_vertices":
        for p, h in zip(primitives, hulls):
            pts = cloud.points[p.inliers] if h is None else h[0]
            blocks.append((p.id, pts))
        return blocks, frozenset(fallback)

    # hull_sampled: distribute the sample budget by hull area, floor of 3
    rng = np.random.default_rng(seed)
    areas = np.asarray(areas)
    total = areas.sum()
    raw = areas / total * mode.hull_samples if total > 0 else np.zeros(len(areas))
    alloc = np.maximum(np.floor(raw).astype(int), 3)
    for p, h, n in zip(primitives, hulls, alloc):
        if h is None:
            blocks.append((p.id, cloud.points[p.inliers]))
            continue
        loop3d, hull2d = h
        blocks.append((p.id, _sample_hull(p.plane, hull2d, int(n), rng)))
    return blocks, frozenset(p.id for p in primitives)


def build_arrangement(
    primitives,
    cloud,
    mode: OrderingMode | None = None,
    padding_frac: float = 0.02,
    tol: ToleranceContext | None = None,
    seed: int = 0,
):
    """Build the adaptive arrangement; returns (BspTree, adjacency graph).

    Work queue holds one entry per splittable leaf, two FIFO tiers:
    priority (condition i) splits drain before any product split, ties in
    leaf creation order. A candidate whose plane misses its leaf's cell is
    discarded from that leaf and selection re-runs.
    """
    mode = mode or OrderingMode()
    if len(primitives) == 0:
        raise InvalidPrimitive("need at least one primitive")
    ids = [p.id for p in primitives]
    if len(set(ids)) != len(ids):
        raise InvalidPrimitive("primitive ids must be unique")
    n_pts = len(cloud.points)
    for p in primitives:
        if len(p.inliers) == 0:
            raise InvalidPrimitive(f"primitive {p.id} has no inliers")
        if p.inliers.min() < 0 or p.inliers.max() >= n_pts:
            raise InvalidPrimitive(
                f"primitive {p.id} references point {int(p.inliers.max())} "
                f"outside cloud of {n_pts}"
            )

    t0 = time.perf_counter()
    all_inliers = np.unique(np.concatenate([p.inliers for p in primitives]))
    inlier_pts = cloud.points[all_inliers]
    root_cell = dilated_bbox(inlier_pts, padding_frac)
    if tol is None:
        lo, hi = root_cell.bounds()
        tol = ToleranceContext(bbox_diagonal=float(np.linalg.norm(hi - lo)))

    max_pid = max(ids)
    planes = np.zeros((max_pid + 1, 4))
    for p in primitives:
        planes[p.id] = p.plane

    tree = BspTree(root_cell, tol, planes=planes)
    graph = nx.Graph()
    graph.add_node(tree.root)

    if mode.ordering == "area_desc":
        _build_area_desc(tree, graph, primitives, cloud)
    else:
        product_only = mode.ordering == "product_only"
        tree.polygon_basis = mode.basis == "hull_vertices"
        blocks, point_pids = _initial_blocks(primitives, cloud, mode, tol, seed)
        tree.point_blocks = point_pids
        tree.node(tree.root).assigned = LeafAssignment.from_blocks(blocks)
        _build_queue_driven(tree, graph, product_only)

    tree.stats["wall_time_s"] = time.perf_counter() - t0
    log.info(
        "arrangement done: %d cells, %d splits, %.3fs",
        len(tree.leaf_ids()),
        tree.stats["splits"],
        tree.stats["wall_time_s"],
    )
    return tree, graph


def _build_queue_driven(tree: BspTree, graph, product_only: bool):
    seq = 0
    heap = []

    def push(leaf_id):
        nonlocal seq
        sel = select_split(tree, leaf_id, product_only)
        if sel is None:
            return
        pid, prio = sel
        heapq.heappush(heap, (0 if prio else 1, seq, leaf_id, pid))
        seq += 1

    push(tree.root)
    while heap:
        _, _, leaf_id, pid = heapq.heappop(heap)
        try:
            lid, rid = apply_split(tree, graph, leaf_id, pid)
        except (NoIntersection, DegenerateCut):
            # plane misses this cell: drop the candidate here, re-select
            node = tree.node(leaf_id)
            node.assigned = node.assigned.without(pid)
            push(leaf_id)
            continue
        push(lid)
        push(rid)


def _build_area_desc(tree: BspTree, graph, primitives, cloud):
    """Fixed insertion order: descending 2D hull area of the inliers.

    Every primitive is inserted into every current leaf whose cell its hull
    polygon intersects; point assignments play no role.
    """
    tol = tree.tol
    entries = []
    for p in primitives:
        try:
            loop3d, hull2d = _hull_polygon(p.plane, cloud.points[p.inliers], tol)
        except DegenerateInput:
            log.warning("primitive %d hull degenerate; skipped in area order", p.id)
            continue
        entries.append((abs(polygon_area_2d(hull2d)), p.id, loop3d))
    entries.sort(key=lambda e: (-e[0], e[1]))

    for _, pid, loop3d in entries:
        for leaf_id in tree.leaf_ids():
            cell = tree.node(leaf_id).cell
            poly = loop3d
            inside = True
            for hp in cell.planes:
                poly = clip_polygon(poly, hp, tol, -1)
                if poly is None:
                    inside = False
                    break
            if not inside:
                continue
            plane = tree.planes[pid]
            try:
                neg_cell, pos_cell, iface = split_cell(cell, plane, tol, source=pid)
            except (NoIntersection, DegenerateCut):
                continue
            node = tree.node(leaf_id)
            lid = tree.add_node(neg_cell, node.depth + 1)
            rid = tree.add_node(pos_cell, node.depth + 1)
            node.children = (lid, rid)
            node.split_plane = np.asarray(plane, dtype=float)
            node.split_source = int(pid)
            tree.stats["splits"] += 1
            _split_graph_node(graph, leaf_id, lid, rid, plane, iface, tol, int(pid))


def exhaustive_arrangement(planes, domain: ConvexCell, tol: ToleranceContext):
    """Slice the domain by every plane in input order; the full arrangement.

    Returns (dict cell_id -> ConvexCell, adjacency graph). Cell identity is
    arbitrary; the set of cells is order-independent.
    """
    cells = {0: domain}
    graph = nx.Graph()
    graph.add_node(0)
    next_id = 1
    for plane in np.asarray(planes, dtype=float).reshape(-1, 4):
        for cid in list(cells.keys()):
            try:
                neg, pos, iface = split_cell(cells[cid], plane, tol)
            except (NoIntersection, DegenerateCut):
                continue
            lid, rid = next_id, next_id + 1
            next_id += 2
            del cells[cid]
            cells[lid] = neg
            cells[rid] = pos
            _split_graph_node(graph, cid, lid, rid, plane, iface, tol, None)
    return cells, graph


def locate_leaf(tree: BspTree, point) -> int:
    """Leaf id whose cell contains the point (ties resolve to the negative
    side, consistent with split_cell's closed negative half-space)."""
    p = np.asarray(point, dtype=float)
    nid = tree.root
    node = tree.node(nid)
    while not node.is_leaf:
        d = float(p @ node.split_plane[:3] + node.split_plane[3])
        nid = node.children[0] if d <= 0.0 else node.children[1]
        node = tree.node(nid)
    return nid


def arrangement_stats(tree: BspTree, graph) -> dict:
    peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return {
        "cells": len(tree.leaf_ids()),
        "splits": tree.stats["splits"],
        "max_depth": tree.max_depth(),
        "edges": graph.number_of_edges(),
        "wall_time_s": tree.stats["wall_time_s"],
        "peak_mem_mb": peak_kb / 1024.0,
    }


def dump_arrangement(tree: BspTree, graph, labels=None) -> str:
    """Canonical JSON dump of the tree and adjacency for golden files."""
    nodes = []
    for n in tree.nodes:
        rec = {
            "id": n.node_id,
            "halfspaces": [[float(v) for v in row] for row in n.cell.planes],
            "children": list(n.children) if n.children else None,
            "split_plane": (
                [float(v) for v in n.split_plane] if n.split_plane is not None else None
            ),
            "split_source": n.split_source,
            "label": labels.get(n.node_id) if labels else n.label,
        }
        nodes.append(rec)
    edges = sorted(
        [int(a), int(b), float(graph.edges[a, b]["area"])]
        if a < b
        else [int(b), int(a), float(graph.edges[a, b]["area"])]
        for a, b in graph.edges
    )
    return canonical_json({"root": tree.root, "nodes": nodes, "edges": edges})


def load_arrangement_dump(text: str) -> dict:
    return json.loads(text)


def _box_bounds_from_planes(planes):
    planes = np.asarray(planes, dtype=float)
    if planes.shape != (6, 4):
        raise ParseError("root cell must be a 6-plane box")
    lo = np.full(3, np.nan)
    hi = np.full(3, np.nan)
    for n0, n1, n2, d in planes:
        n = np.array([n0, n1, n2])
        axis = int(np.argmax(np.abs(n)))
        rest = [a for a in range(3) if a != axis]
        if n[rest[0]] != 0.0 or n[rest[1]] != 0.0 or abs(n[axis]) != 1.0:
            raise ParseError("root cell is not an axis-aligned box")
        if n[axis] < 0:
            lo[axis] = d
        else:
            hi[axis] = -d
    if np.isnan(lo).any() or np.isnan(hi).any():
        raise ParseError("root cell is missing a bounding plane")
    return lo, hi


def rebuild_arrangement(data):
    """Reconstruct (tree, graph) from a dump_arrangement dict.

    A node's cell depends only on the split chain from the root, so
    replaying splits in id order reproduces every cell bit-exactly; the
    adjacency polygons are re-derived the same way as during construction.
    """
    records = sorted(data["nodes"], key=lambda r: r["id"])
    if [r["id"] for r in records] != list(range(len(records))):
        raise ParseError("arrangement dump has non-contiguous node ids")
    lo, hi = _box_bounds_from_planes(records[0]["halfspaces"])
    root_cell = ConvexCell.from_bounds(lo, hi)
    tol = ToleranceContext.from_points(root_cell.vertices)
    tree = BspTree(root_cell, tol)
    tree.nodes = [None] * len(records)
    tree.nodes[0] = BspNode(node_id=0, cell=root_cell)
    graph = nx.Graph()
    graph.add_node(0)
    for rec in records:
        if rec.get("children") is None:
            continue
        nid = rec["id"]
        lid, rid = rec["children"]
        node = tree.nodes[nid]
        if node is None:
            raise ParseError(f"node {nid} split before being created")
        plane = np.asarray(rec["split_plane"], dtype=float)
        source = rec.get("split_source")
        neg, pos, iface = split_cell(node.cell, plane, tree.tol, source=source)
        node.split_plane = plane
        node.split_source = source
        node.children = (lid, rid)
        tree.nodes[lid] = BspNode(node_id=lid, cell=neg, depth=node.depth + 1)
        tree.nodes[rid] = BspNode(node_id=rid, cell=pos, depth=node.depth + 1)
        _split_graph_node(graph, nid, lid, rid, plane, iface, tree.tol, source)
        tree.stats["splits"] += 1
    for rec in records:
        if tree.nodes[rec["id"]] is None:
            raise ParseError(f"node {rec['id']} has no parent split")
        tree.nodes[rec["id"]].label = rec.get("label")
    return tree, graph
